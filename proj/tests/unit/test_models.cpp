#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "smpmc/errors.hpp"
#include "smpmc/models.hpp"

using namespace smpmc;

namespace {

// Independent oracle: sup of the pair quotient on a dense 1e-3 grid of [-3,3]
// for b = x - x^5, sigma = x^2, p = 1/2 (computed offline, frozen).
constexpr double kX5HalfPairOracle = 1.199999171039016;

double quotient(const ControlModel& m, double x, double y, double u, double p) {
    double bx, by, sx, sy;
    m.b(std::span<const double>(&x, 1), u, std::span<double>(&bx, 1));
    m.b(std::span<const double>(&y, 1), u, std::span<double>(&by, 1));
    m.sigma(std::span<const double>(&x, 1), u, std::span<double>(&sx, 1));
    m.sigma(std::span<const double>(&y, 1), u, std::span<double>(&sy, 1));
    return ((bx - by) * (x - y) + p * (sx - sy) * (sx - sy)) / ((x - y) * (x - y));
}

ControlModel linear_model(double k) {
    ControlModel m;
    m.name = "linear";
    m.drift = [k](ControlModel::In x, double, ControlModel::Out o) { o[0] = k * x[0]; };
    m.diffusion = [](ControlModel::In, double, ControlModel::Out o) { o[0] = 0.0; };
    m.cost = [](ControlModel::In x, double) { return x[0] * x[0]; };
    m.drift_jac = [k](ControlModel::In, double, ControlModel::Out o) { o[0] = k; };
    m.diffusion_jac = [](ControlModel::In, double, ControlModel::Out o) { o[0] = 0.0; };
    m.cost_grad = [](ControlModel::In x, double, ControlModel::Out o) { o[0] = 2 * x[0]; };
    return m;
}

}  // namespace

TEST_CASE("polynomial_x5 coefficients") {
    auto m = builtin_model("polynomial_x5");
    CHECK(m.state_dim == 1);
    CHECK(m.growth_m == 2);
    for (double x : {-1.5, -0.3, 0.0, 0.7, 2.0}) {
        double b, s;
        m.b(std::span<const double>(&x, 1), 0.0, std::span<double>(&b, 1));
        m.sigma(std::span<const double>(&x, 1), 0.0, std::span<double>(&s, 1));
        CHECK(b == doctest::Approx(x - std::pow(x, 5)).epsilon(1e-14));
        CHECK(s == doctest::Approx(x * x).epsilon(1e-14));
    }
}

TEST_CASE("lq_scalar has constant jacobians") {
    auto m = builtin_model("lq_scalar", {{"a", -1.0}, {"sigma0", 0.5}});
    for (double x : {-2.0, 0.1, 3.0})
        for (double u : {-1.0, 0.0, 2.0}) {
            double db, ds;
            m.Db(std::span<const double>(&x, 1), u, std::span<double>(&db, 1));
            m.Dsigma(std::span<const double>(&x, 1), u, std::span<double>(&ds, 1));
            CHECK(db == -1.0);
            CHECK(ds == 0.0);
        }
}

TEST_CASE("double_well minima are fixed points") {
    auto m = builtin_model("double_well", {{"sigma0", 0.3}});
    for (double x : {-1.0, 1.0}) {
        double b;
        m.b(std::span<const double>(&x, 1), 0.0, std::span<double>(&b, 1));
        CHECK(b == 0.0);
    }
}

TEST_CASE("unknown model and bad params") {
    CHECK_THROWS_AS(builtin_model("nope"), UnknownModel);
    CHECK_THROWS_AS(builtin_model("logistic", {{"beta", 0.0}}), InvalidParams);
    CHECK_THROWS_AS(builtin_model("logistic", {{"alpha", -1.0}}), InvalidParams);
    CHECK_THROWS_AS(builtin_model("lq_scalar", {{"typo", 1.0}}), InvalidParams);
}

TEST_CASE("analytic derivatives agree with central differences for every builtin") {
    for (const auto& name : builtin_model_names()) {
        CAPTURE(name);
        auto m = builtin_model(name);
        SamplingBox box;
        if (name == "gompertz_uncontrolled_noise" || name == "logistic") {
            box.lo = {0.2};
            box.hi = {2.0};
        } else {
            box.lo = {-1.5};
            box.hi = {1.5};
        }
        auto chk = check_derivatives(m, box, 100, 7);
        CHECK(chk.max() < 1e-4);
    }
}

TEST_CASE("monotonicity probe on linear models") {
    SamplingBox box;
    box.lo = {-2.0};
    box.hi = {2.0};
    box.samples = 2000;
    auto r1 = probe_joint_monotonicity(linear_model(-1.0), 1.0, box, 3);
    CHECK(r1.c_p_estimate == doctest::Approx(-1.0).epsilon(1e-9));
    auto r2 = probe_joint_monotonicity(linear_model(2.5), 1.0, box, 3);
    CHECK(r2.c_p_estimate == doctest::Approx(2.5).epsilon(1e-9));
}

TEST_CASE("polynomial_x5 c_1/2 against dense-grid oracle") {
    auto m = builtin_model("polynomial_x5");
    SamplingBox box;
    box.lo = {-3.0};
    box.hi = {3.0};
    auto rep = probe_joint_monotonicity(m, 0.5, box, 11);
    // true supremum is 1.2, reached on the diagonal at x^2 = 0.2
    CHECK(rep.c_p_estimate == doctest::Approx(kX5HalfPairOracle).epsilon(1e-3));
    CHECK(rep.c_p_estimate <= 1.2 + 1e-9);
    CHECK(rep.p == 0.5);

    // independent spot check of the quotient at the reported worst pair
    if (!rep.diagonal_binding) {
        CHECK(quotient(m, rep.worst_x[0], rep.worst_y[0], rep.worst_u, 0.5) ==
              doctest::Approx(rep.pair_max).epsilon(1e-12));
    }

    // derivative-form condition holds at every grid point with the probed constant
    for (int i = 0; i <= 6000; ++i) {
        const double x = -3.0 + 1e-3 * i;
        CHECK_LE(derivative_form(m, std::span<const double>(&x, 1), 0.0, 0.5), rep.c_p_estimate + 1e-12);
    }
}

TEST_CASE("probe is reproducible bit for bit and independent of workers") {
    auto m = builtin_model("logistic");
    SamplingBox box;
    box.lo = {0.1};
    box.hi = {2.0};
    box.samples = 5000;
    auto a = probe_joint_monotonicity(m, 1.0, box, 42, 1);
    auto b = probe_joint_monotonicity(m, 1.0, box, 42, 3);
    CHECK(a.c_p_estimate == b.c_p_estimate);
    CHECK(a.worst_x == b.worst_x);
    CHECK(a.worst_y == b.worst_y);
    CHECK(a.worst_u == b.worst_u);
}

TEST_CASE("lq_scalar probe never exceeds a") {
    auto m = builtin_model("lq_scalar", {{"a", -1.0}});
    SamplingBox box;
    box.lo = {-3.0};
    box.hi = {3.0};
    box.samples = 3000;
    for (double p : {0.5, 1.0, 3.0, 7.0}) CHECK(probe_joint_monotonicity(m, p, box, 5).c_p_estimate <= -1.0 + 1e-9);
}

TEST_CASE("discount recommendation") {
    SamplingBox box;
    box.lo = {-2.0};
    box.hi = {2.0};
    box.samples = 2000;

    SUBCASE("all negative constants give the floor") {
        auto m = linear_model(-1.0);
        m.growth_m = 0;
        m.growth_l = 2;
        auto rec = recommend_discount(m, {}, box, 1);
        CHECK(rec.r == kDiscountFloor);
        CHECK(rec.floor_applied);
        CHECK(rec.all_nonpositive);
    }
    SUBCASE("formula with margin") {
        auto m = builtin_model("logistic");
        SamplingBox pb;
        pb.lo = {0.1};
        pb.hi = {2.0};
        pb.samples = 3000;
        auto rec = recommend_discount(m, {}, pb, 1);
        double mx = 0.0;
        for (const auto& rep : rec.reports) mx = std::max(mx, rep.c_p_estimate);
        CHECK(rec.max_c == doctest::Approx(mx));
        CHECK(rec.r == doctest::Approx(std::max(kDiscountFloor, kDiscountMargin * 64.0 * (2 * m.growth_m + 1) * mx)));
        CHECK(rec.r > 64.0 * (2 * m.growth_m + 1) * mx);
    }
    SUBCASE("index list") {
        auto idx = discount_indices(1, 2);
        // 1/2, 3, 5, 7, l-1, 3l-1, 2m-1, 3m-1, 4m-1, 2(2m+1)-1, 3(2m+1)-1, 4(2m+1)-1 with p <= 0 dropped
        std::vector<double> want{0.5, 3, 5, 7, 1, 5, 1, 2, 3, 5, 8, 11};
        std::sort(want.begin(), want.end());
        want.erase(std::unique(want.begin(), want.end()), want.end());
        CHECK(idx == want);
    }
}

TEST_CASE("control sets") {
    auto cs = ControlSet::interval(-2.0, 2.0, 41);
    CHECK(cs.size() == 41);
    CHECK(cs.points().front() == -2.0);
    CHECK(cs.points().back() == 2.0);
    CHECK(cs.points()[20] == doctest::Approx(0.0));
    CHECK(cs.contains(0.05));
    CHECK_FALSE(cs.contains(2.5));
    auto fs = ControlSet::finite({-1.0, 1.0});
    CHECK(fs.contains(1.0));
    CHECK_FALSE(fs.contains(0.0));
}
