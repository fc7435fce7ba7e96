#include "doctest.h"

#include <cmath>
#include <memory>
#include <sstream>

#include "smpmc/errors.hpp"
#include "smpmc/sde.hpp"

using namespace smpmc;

namespace {

std::shared_ptr<const ControlModel> share(ControlModel m) { return std::make_shared<const ControlModel>(std::move(m)); }
std::shared_ptr<const ControlLaw> share(ControlLaw c) { return std::make_shared<const ControlLaw>(std::move(c)); }

ControlModel unit_cost_model() {
    auto m = builtin_model("lq_scalar", {{"sigma0", 0.0}});
    m.cost = [](ControlModel::In, double) { return 1.0; };
    m.cost_grad = [](ControlModel::In, double, ControlModel::Out o) { o[0] = 0.0; };
    m.cost_hess = [](ControlModel::In, double, ControlModel::Out o) { o[0] = 0.0; };
    return m;
}

std::string csv_of(const PathBundle& b) {
    std::ostringstream os;
    b.write_csv(os);
    return os.str();
}

}  // namespace

TEST_CASE("double well at rest stays at rest") {
    auto m = builtin_model("double_well", {{"sigma0", 0.0}});
    auto g = TimeGrid::make(5.0, 1e-2, 1.0);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 4, 1, {1.0});
    b.forward(0, g.steps, [&](const NodeView& nv) {
        for (double x : nv.x) CHECK(x == 1.0);
    });
}

TEST_CASE("deterministic linear decay") {
    auto m = builtin_model("lq_scalar", {{"a", -1.0}, {"sigma0", 0.0}});
    auto g = TimeGrid::make(5.0, 1e-3, 0.5);
    CHECK(g.steps == 5000);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 2, 9, {1.0});
    auto xT = b.states_at(g.steps);
    CHECK(std::abs(xT[0] - std::exp(-5.0)) < 1e-3);
    CHECK(xT[0] == xT[1]);
}

TEST_CASE("increments look like Brownian increments") {
    auto m = builtin_model("logistic");
    auto g = TimeGrid::make(1.0, 1e-2, 1.0);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 5000, 3, {0.5});
    auto d = check_increments(b);
    CHECK(d.ok);
    CHECK(d.max_var_deviation < 0.1);
}

TEST_CASE("replay is bit exact across workers and checkpoint strides") {
    auto m = builtin_model("polynomial_x5");
    auto g = TimeGrid::make(2.0, 1e-2, 3.0);
    auto law = ControlLaw::constant(0.0);
    BundleOptions o1;
    BundleOptions o3;
    o3.workers = 3;
    BundleOptions tiny;
    tiny.memory_budget = 64;
    auto a = simulate_state(m, law, g, 3000, 77, {0.8}, o1);
    auto b = simulate_state(m, law, g, 3000, 77, {0.8}, o3);
    auto c = simulate_state(m, law, g, 3000, 77, {0.8}, tiny);
    CHECK(a.fully_stored());
    CHECK_FALSE(c.fully_stored());
    const auto ca = csv_of(a);
    CHECK(ca == csv_of(b));
    CHECK(ca == csv_of(c));
    // backward sweep replays the same states
    c.backward(0, g.steps, [&](const NodeView& nv) {
        auto ref = a.states_at(nv.k);
        for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE(nv.x[i] == ref[i]);
    });
}

TEST_CASE("Newton reports divergence instead of returning garbage") {
    // b = K x with K h > 1 makes y - h b(y) = x singular/ill posed
    auto m = builtin_model("lq_scalar", {{"a", 50.0}, {"sigma0", 0.0}});
    double y;
    double x = 1.0, dw = 0.0;
    CHECK_THROWS_AS(split_step(m, std::span<const double>(&x, 1), 0.0, 0.02, std::span<const double>(&dw, 1),
                               std::span<double>(&y, 1)),
                    Error);
}

TEST_CASE("unit cost integrates to the discount integral") {
    auto m = unit_cost_model();
    const double h = 1e-2, r = 1.0, T = 20.0;
    auto g = TimeGrid::make(T, h, r);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 3, 1, {0.0});
    auto c = estimate_cost(m, b);
    // left-endpoint sum in closed form
    const double riemann = h * (1.0 - std::exp(-r * T)) / (1.0 - std::exp(-r * h));
    CHECK(c.value == doctest::Approx(riemann).epsilon(1e-12));
    // h/2 leading term plus h^2/12 curvature term
    CHECK(std::abs(c.value - (1.0 - std::exp(-20.0))) <= h / 2 + h * h / 12);
    CHECK(c.std_error == 0.0);
}

TEST_CASE("deterministic LQ cost is 0.4") {
    auto m = builtin_model("lq_scalar", {{"a", -1.0}, {"sigma0", 0.0}});
    const double h = 1e-3;
    auto g = TimeGrid::make(40.0, h, 0.5);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 2, 1, {1.0});
    auto c = estimate_cost(m, b);
    CHECK(std::abs(c.value - 0.4) <= 2 * c.std_error + h);
    CHECK(c.tail_bound >= 0.0);
}

TEST_CASE("logistic cost agrees with an independent finer grid") {
    auto m = builtin_model("logistic", {{"sigma0", 0.3}});
    const std::size_t M = 20000;
    auto coarse = simulate_state(m, ControlLaw::constant(0.1), TimeGrid::make(8.0, 0.02, 1.0), M, 5, {0.3});
    auto fine = simulate_state(m, ControlLaw::constant(0.1), TimeGrid::make(8.0, 0.002, 1.0), M, 6, {0.3});
    auto a = estimate_cost(m, coarse), b = estimate_cost(m, fine);
    const double se = std::hypot(a.std_error, b.std_error);
    CHECK(std::abs(a.value - b.value) <= 3 * se);
}

TEST_CASE("weighted moments") {
    SUBCASE("zero bundle") {
        auto m = builtin_model("lq_scalar", {{"sigma0", 0.0}});
        auto b = simulate_state(m, ControlLaw::constant(0.0), TimeGrid::make(5.0, 1e-2, 1.0), 4, 1, {0.0});
        CHECK(estimate_weighted_moment(b, 1.0, 1.0).value == 0.0);
    }
    SUBCASE("deterministic LQ") {
        const double a = -1.0, r = 0.5, T = 10.0, h = 1e-3;
        auto m = builtin_model("lq_scalar", {{"a", a}, {"sigma0", 0.0}});
        auto b = simulate_state(m, ControlLaw::constant(0.0), TimeGrid::make(T, h, r), 2, 1, {1.0});
        const double exact = (1.0 - std::exp((2 * a - r) * T)) / (r - 2 * a);
        CHECK(std::abs(estimate_weighted_moment(b, 1.0, r).value - exact) < 2 * h);
    }
    SUBCASE("x5 fourth moment scales like |x0|^4") {
        auto m = builtin_model("polynomial_x5");
        SamplingBox box;
        box.lo = {-3.0};
        box.hi = {3.0};
        box.samples = 4000;
        auto rec = recommend_discount(m, {}, box, 1);
        const double r = rec.r;
        const double T = default_horizon(r);
        auto g = TimeGrid::make(T, T / 200, r);
        auto lo = simulate_state(m, ControlLaw::constant(0.0), g, 2000, 2, {0.5});
        auto hi = simulate_state(m, ControlLaw::constant(0.0), g, 2000, 2, {1.0});
        const double vlo = estimate_weighted_moment(lo, 2.0, r).value;
        const double vhi = estimate_weighted_moment(hi, 2.0, r).value;
        CHECK(std::isfinite(vhi));
        const double ratio = vhi / vlo;
        CHECK(ratio >= 16.0 / 2);
        CHECK(ratio <= 16.0 * 2);
    }
}

TEST_CASE("x5 second moment stays under the exponential envelope") {
    // With b(0) = sigma(0) = 0, Ito plus joint monotonicity against the origin gives
    // E|X_t|^2 <= |x0|^2 exp(2 c_{1/2} t), i.e. the envelope with Ktilde = 1.
    auto m = builtin_model("polynomial_x5");
    SamplingBox box;
    box.lo = {-3.0};
    box.hi = {3.0};
    const double c = probe_joint_monotonicity(m, 0.5, box, 4).c_p_estimate;
    const double r = 3.0;
    CHECK(r > 2 * c);
    auto g = TimeGrid::make(10.0, 1e-3, r);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 10000, 8, {2.0});
    auto mp = discounted_second_moment(b, r);
    for (std::size_t k = 0; k < mp.t.size(); ++k) {
        CAPTURE(k);
        REQUIRE(mp.value[k] <= moment_envelope(2.0, 1.0, c, 1.0, r, mp.t[k]) + 3 * mp.std_error[k] + 1e-12);
    }
}

TEST_CASE("general linear SDE") {
    auto m = builtin_model("lq_scalar", {{"sigma0", 0.5}});
    auto g = TimeGrid::make(3.0, 1e-3, 1.0);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 50, 4, {1.0});
    const double v = 0.7;
    SUBCASE("zero coefficients keep the initial value") {
        auto y = simulate_linear_sde({}, std::span<const double>(&v, 1), b);
        for (double e : y.data) CHECK(e == v);
    }
    SUBCASE("A = -I decays exponentially") {
        LinearCoefficients cf;
        cf.A = [](std::size_t, std::size_t, std::span<const double>, double, std::span<double> o) { o[0] = -1.0; };
        auto y = simulate_linear_sde(cf, std::span<const double>(&v, 1), b);
        for (std::size_t k = 0; k <= g.steps; k += 250)
            CHECK(std::abs(y.at(7, k, 0) - v * std::exp(-g.time(k))) < 2e-3 * v);
    }
}

TEST_CASE("linear SDE estimate along the optimal LQ path, k = 1") {
    // A = a - P* (closed loop), alpha = X, beta = 0.5, B = 0; r >= 2 c_1 with c_1 = a - P*.
    const double a = -1.0, r = 0.5;
    const double Ps = ((2 * a - r) + std::sqrt((2 * a - r) * (2 * a - r) + 4)) / 2;
    auto m = builtin_model("lq_scalar", {{"a", a}, {"sigma0", 0.5}});
    auto g = TimeGrid::make(30.0, 1e-2, r);
    const std::size_t M = 10000;
    auto b = simulate_state(m, ControlLaw::linear_feedback(-Ps), g, M, 12, {1.0});
    LinearCoefficients cf;
    cf.A = [&](std::size_t, std::size_t, std::span<const double>, double, std::span<double> o) { o[0] = a - Ps; };
    cf.alpha = [](std::size_t, std::size_t, std::span<const double> x, double, std::span<double> o) { o[0] = x[0]; };
    cf.beta = [](std::size_t, std::size_t, std::span<const double>, double, std::span<double> o) { o[0] = 0.5; };
    const double y0 = 1.0;
    auto y = simulate_linear_sde(cf, std::span<const double>(&y0, 1), b);

    double lhs = 0.0, alpha_term = 0.0, beta_term = 0.0;
    for (std::size_t k = 0; k <= g.steps; ++k) {
        const double t = g.time(k);
        double ey2 = 0.0;
        for (std::size_t p = 0; p < M; ++p) ey2 += y.at(p, k, 0) * y.at(p, k, 0);
        lhs = std::max(lhs, std::exp(-r * t) * ey2 / M);
        if (k < g.steps) {
            auto x = b.states_at(k);
            double ex2 = 0.0;
            for (double e : x) ex2 += e * e;
            alpha_term += g.step * std::exp(-r * t / 2) * std::sqrt(ex2 / M);
            beta_term += g.step * std::exp(-r * t) * 0.25;
        }
    }
    const double rhs = y0 * y0 + alpha_term * alpha_term + beta_term;
    CHECK(lhs > 0.0);
    CHECK(lhs <= 4.0 * rhs);
}

TEST_CASE("linearized flow") {
    auto m = builtin_model("logistic", {{"sigma0", 0.3}});
    auto g = TimeGrid::make(4.0, 1e-2, 1.0);
    auto b = simulate_state(m, ControlLaw::constant(0.0), g, 200, 21, {0.4});
    const std::size_t t = 100, tau = 200;

    SUBCASE("zero start") {
        const double z = 0.0;
        auto y = simulate_linearized_flow(m, b, t, std::span<const double>(&z, 1));
        for (double e : y.data) CHECK(e == 0.0);
    }
    SUBCASE("linear in the initial value") {
        const double e1 = 0.3, e2 = 0.6;
        auto y1 = simulate_linearized_flow(m, b, t, std::span<const double>(&e1, 1));
        auto y2 = simulate_linearized_flow(m, b, t, std::span<const double>(&e2, 1));
        for (std::size_t i = 0; i < y1.data.size(); ++i) REQUIRE(y2.data[i] == 2.0 * y1.data[i]);
    }
    SUBCASE("semigroup") {
        const double one = 1.0;
        auto full = simulate_linearized_flow(m, b, t, std::span<const double>(&one, 1));
        auto tail = simulate_linearized_flow(m, b, tau, std::span<const double>(&one, 1));
        for (std::size_t p = 0; p < b.paths(); ++p)
            for (std::size_t k = tau; k <= g.steps; k += 37)
                CHECK(full.at(p, k, 0) == doctest::Approx(full.at(p, tau, 0) * tail.at(p, k, 0)).epsilon(1e-12));
    }
    SUBCASE("LQ flow is a deterministic exponential") {
        auto lq = builtin_model("lq_scalar", {{"a", -1.0}, {"sigma0", 0.5}});
        auto bl = simulate_state(lq, ControlLaw::constant(0.0), g, 5, 3, {1.0});
        const double eta = 1.5;
        auto y = simulate_linearized_flow(lq, bl, t, std::span<const double>(&eta, 1));
        for (std::size_t k = t; k <= g.steps; k += 50)
            CHECK(std::abs(y.at(2, k, 0) - eta * std::exp(-(g.time(k) - g.time(t)))) < 2e-2 * eta);
    }
}
