#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <sstream>

#include "smpmc/errors.hpp"
#include "smpmc/smp.hpp"

using namespace smpmc;

namespace {

double riccati(double a, double r) { return ((2 * a - r) + std::sqrt((2 * a - r) * (2 * a - r) + 4)) / 2; }

}  // namespace

TEST_CASE("Hamiltonian") {
    auto lq = builtin_model("lq_scalar", {{"a", -1.0}});
    std::vector<double> x{1.0}, zero{0.0}, one{1.0};
    CHECK(hamiltonian(lq, x, 0.0, one, zero) == -2.0);
    CHECK(hamiltonian(lq, x, 0.3, zero, zero) == -lq.f(x, 0.3));

    // trace term through a matrix product instead of the elementwise sum
    auto m = builtin_model("gradient_flow_2d", {{"sigma0", 0.7}});
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> y{nd(rng), nd(rng)}, p{nd(rng), nd(rng)}, q{nd(rng), nd(rng), nd(rng), nd(rng)};
        const double u = 0.5 * nd(rng);
        std::vector<double> b(2), s(4);
        m.b(y, u, b);
        m.sigma(y, u, s);
        Eigen::Map<const Eigen::Matrix2d> Q(q.data()), S(s.data());
        const double oracle = p[0] * b[0] + p[1] * b[1] + (Q.transpose() * S).trace() - m.f(y, u);
        CHECK(std::abs(hamiltonian(m, y, u, p, q) - oracle) <= 1e-12 * (1 + std::abs(oracle)));
    }
}

TEST_CASE("H-function") {
    const double a = -0.7, s0 = 0.4, s1 = 0.6;
    auto m = builtin_model("lq_scalar", {{"a", a}, {"sigma0", s0}, {"sigma1", s1}});
    HAnchor an{{0.8}, 0.3, {-0.9}, {0.25}, {-1.2}};
    const double x = an.x[0], ub = an.u, p = an.p[0], q = an.q[0], P = an.P[0];
    SUBCASE("at the anchor the correction term vanishes") {
        const double H = hamiltonian(m, an.x, ub, an.p, an.q);
        const double sb = s0 + s1 * ub;
        CHECK(std::abs(h_function(m, an.x, ub, an) - (H - 0.5 * P * sb * sb)) <= 1e-15);
    }
    SUBCASE("P = 0 reduces to H") {
        HAnchor z = an;
        z.P = {0.0};
        for (double u : {-1.0, 0.0, 0.7}) CHECK(h_function(m, an.x, u, z) == hamiltonian(m, an.x, u, an.p, an.q));
    }
    SUBCASE("hand-expanded quadratic in u") {
        for (double u : {-2.0, -0.5, 0.0, 0.3, 1.1, 2.0}) {
            const double sb = s0 + s1 * ub;
            const double hand = p * (a * x + u) + q * (s0 + s1 * u) - x * x - u * u - 0.5 * P * sb * sb +
                                0.5 * P * s1 * s1 * (u - ub) * (u - ub);
            CHECK(std::abs(h_function(m, an.x, u, an) - hand) <= 1e-12);
        }
    }
}

TEST_CASE("argmax of the H-function") {
    auto lq = builtin_model("lq_scalar", {{"a", -1.0}, {"sigma0", 0.5}});
    const double P = riccati(-1.0, 0.5);
    SUBCASE("singleton grid") {
        HAnchor an{{1.0}, 0.0, {0.0}, {0.0}, {0.0}};
        std::vector<double> g{0.37};
        CHECK(argmax_h(lq, an, g) == 0);
    }
    SUBCASE("LQ maximizer is -P* x") {
        const auto& grid = lq.control_set.points();
        const double step = grid[1] - grid[0];
        for (double x : {-1.5, -0.4, 0.2, 1.0, 2.5}) {
            HAnchor an{{x}, -P * x, {-2 * P * x}, {0.0}, {-2.0 * (1 - std::exp(-2.5 * 10)) / 2.5}};
            const double v = grid[argmax_h(lq, an, grid)];
            CAPTURE(x);
            CHECK(std::abs(v - std::clamp(-P * x, -2.0, 2.0)) <= step);
        }
    }
    SUBCASE("constant in u picks the first point") {
        auto m = builtin_model("polynomial_x5", {{"control_cost", 0.0}});
        HAnchor an{{0.4}, 0.0, {0.3}, {-0.2}, {-0.5}};
        std::vector<double> g{0.5, -1.0, 0.0, 1.0};
        CHECK(argmax_h(m, an, g) == 0);
    }
    SUBCASE("empty grid") {
        HAnchor an{{0.4}, 0.0, {0.3}, {-0.2}, {-0.5}};
        CHECK_THROWS_AS(argmax_h(lq, an, std::vector<double>{}), EmptyControlGrid);
    }
    SUBCASE("scaling the whole H-function keeps the argmax") {
        auto m = builtin_model("logistic", {{"sigma0", 0.2}, {"sigma1", 0.5}});
        const auto& grid = m.control_set.points();
        std::mt19937_64 rng(8);
        std::normal_distribution<double> nd;
        for (int rep = 0; rep < 20; ++rep) {
            HAnchor an{{0.5 + 0.2 * nd(rng)}, 0.1 * nd(rng), {nd(rng)}, {nd(rng)}, {-std::abs(nd(rng))}};
            const std::size_t i0 = argmax_h(m, an, grid);
            for (double lam : {0.1, 3.0, 250.0}) {
                auto ms = with_cost(m, lam);
                // drift and diffusion do not depend on the cost; scale their multipliers instead
                HAnchor as = an;
                as.p[0] *= lam;
                as.q[0] *= lam;
                as.P[0] *= lam;
                CHECK(argmax_h(ms, as, grid) == i0);
            }
        }
    }
}

TEST_CASE("SMP check on LQ") {
    const double a = -1.0, r = 0.5, P = riccati(a, r);
    auto m = builtin_model("lq_scalar", {{"a", a}, {"sigma0", 0.5}});
    auto g = TimeGrid::make(12.0, 1e-2, r);
    SMPOptions opt;
    opt.times = {0.5, 1.0, 2.0};
    SUBCASE("optimal feedback satisfies the inequality") {
        auto rep = check_smp(m, ControlLaw::linear_feedback(-P), g, 5000, 3, {1.0}, opt);
        CHECK(rep.rows.size() == 3 * 41);
        CHECK(rep.violated == 0);
        CHECK(rep.worst_lhs <= rep.tolerance);
        for (const auto& ts : rep.times) {
            CAPTURE(ts.t);
            CHECK(ts.within_one_step > 0.95);
        }
    }
    SUBCASE("zero control is rejected") {
        auto rep = check_smp(m, ControlLaw::constant(0.0), g, 5000, 3, {1.0}, opt);
        CHECK(rep.violated >= 1);
        bool positive = false;
        for (const auto& row : rep.rows)
            if (row.verdict == Verdict::violated) positive = positive || row.lhs > 0;
        CHECK(positive);
    }
    SUBCASE("grid holding only the control gives lhs exactly zero") {
        opt.v_grid = {0.25};
        auto rep = check_smp(m, ControlLaw::constant(0.25), g, 500, 3, {1.0}, opt);
        for (const auto& row : rep.rows) {
            CHECK(row.lhs == 0.0);
            CHECK(row.std_err == 0.0);
            CHECK(row.verdict == Verdict::satisfied);
        }
    }
    SUBCASE("reports are deterministic") {
        auto r1 = check_smp(m, ControlLaw::linear_feedback(-P), g, 400, 11, {1.0}, opt);
        auto r2 = check_smp(m, ControlLaw::linear_feedback(-P), g, 400, 11, {1.0}, opt);
        std::ostringstream a1, a2;
        write_smp_csv(a1, r1);
        write_smp_summary(a1, r1);
        write_smp_csv(a2, r2);
        write_smp_summary(a2, r2);
        CHECK(a1.str() == a2.str());
    }
    SUBCASE("empty control grid") {
        CHECK_THROWS_AS(ControlSet::finite({}), EmptyControlGrid);
    }
}

TEST_CASE("SMP CSV layout") {
    SMPReport rep;
    rep.rows.push_back({0.5, 50, -1.0, -0.25, 0.01, Verdict::satisfied, 0.0});
    rep.rows.push_back({0.5, 50, 1.0, 0.5, 0.01, Verdict::violated, 0.9});
    std::ostringstream os;
    write_smp_csv(os, rep);
    CHECK(os.str() == "t,v,lhs,std_err,verdict\n0.5,-1,-0.25,0.01,satisfied\n0.5,1,0.5,0.01,violated\n");
}
