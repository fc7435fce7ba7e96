#include "doctest.h"

#include <cmath>
#include <sstream>

#include "smpmc/errors.hpp"
#include "smpmc/variation.hpp"

using namespace smpmc;

namespace {

ControlModel logistic_diffusion_control() {
    return builtin_model("logistic", {{"sigma0", 0.2}, {"sigma1", 0.5}});
}

}  // namespace

TEST_CASE("spike rounding to the grid") {
    auto g = TimeGrid::make(5.0, 0.01, 1.0);
    auto law = ControlLaw::constant(0.0);

    SUBCASE("steps covering [1, 1.1)") {
        auto r = realize_spike(g, {1.0, 0.1, 1.0});
        CHECK(r.begin == 100);
        CHECK(r.end == 110);
        CHECK(r.epsilon == doctest::Approx(0.1).epsilon(1e-14));
        auto sp = make_spike(law, {1.0, 0.1, 1.0}, g);
        const double x = 0.3;
        for (std::size_t k = 0; k < g.steps; ++k) {
            const double want = (k >= 100 && k < 110) ? 1.0 : 0.0;
            REQUIRE(sp(k, g.time(k), std::span<const double>(&x, 1)) == want);
        }
    }
    SUBCASE("epsilon below half a step leaves the law unchanged") {
        auto sp = make_spike(ControlLaw::linear_feedback(-0.5), {1.0, 0.004, 1.0}, g);
        CHECK_FALSE(sp.has_spike());
    }
    SUBCASE("v equal to the base control") {
        auto sp = make_spike(law, {2.0, 0.5, 0.0}, g);
        const double x = 1.7;
        for (std::size_t k = 0; k < g.steps; ++k) REQUIRE(sp(k, g.time(k), std::span<const double>(&x, 1)) == 0.0);
    }
    SUBCASE("outside the horizon") {
        CHECK_THROWS_AS(realize_spike(g, {4.95, 0.1, 1.0}), SpikeOutsideHorizon);
        CHECK_THROWS_AS(realize_spike(g, {-0.1, 0.05, 1.0}), SpikeOutsideHorizon);
        CHECK_THROWS_AS(realize_spike(g, {1.0, 0.0, 1.0}), SpikeOutsideHorizon);
    }
}

TEST_CASE("no spike gap means no variation") {
    auto m = logistic_diffusion_control();
    auto g = TimeGrid::make(3.0, 0.01, 1.0);
    auto base = simulate_state(m, ControlLaw::constant(0.2), g, 300, 4, {0.5});
    auto vb = simulate_variations(m, base, {1.0, 0.2, 0.2});
    REQUIRE(vb.materialized());
    for (double v : vb.fields().y.data) REQUIRE(v == 0.0);
    for (double v : vb.fields().z.data) REQUIRE(v == 0.0);
    vb.sweep([&](const NodeView& nv, std::span<const VariationState> s) {
        for (std::size_t i = 0; i < nv.x.size(); ++i) REQUIRE(s[0].xe[i] == nv.x[i]);
    });
}

TEST_CASE("first variation vanishes up to the spike start") {
    auto m = logistic_diffusion_control();
    auto g = TimeGrid::make(3.0, 0.01, 1.0);
    auto base = simulate_state(m, ControlLaw::constant(0.0), g, 500, 8, {0.5});
    auto vb = simulate_variations(m, base, {1.0, 0.3, 0.5});
    const auto& y = vb.fields().y;
    for (std::size_t p = 0; p < base.paths(); ++p)
        for (std::size_t k = 0; k <= vb.spike().begin; ++k) REQUIRE(y.at(p, k, 0) == 0.0);
    // and it is switched on right after
    double s = 0.0;
    for (std::size_t p = 0; p < base.paths(); ++p) s += std::abs(y.at(p, vb.spike().begin + 1, 0));
    CHECK(s > 0.0);
}

TEST_CASE("LQ second variation is the deterministic drift response") {
    const double a = -1.0, v = 1.0;
    auto m = builtin_model("lq_scalar", {{"a", a}, {"sigma0", 0.5}});
    const double h = 1e-3;
    auto g = TimeGrid::make(4.0, h, 0.5);
    auto base = simulate_state(m, ControlLaw::constant(0.0), g, 20, 2, {1.0});
    auto vb = simulate_variations(m, base, {1.0, 0.5, v});
    const auto& f = vb.fields();
    for (double e : f.y.data) REQUIRE(e == 0.0);
    const double t0 = vb.spike().t0, t1 = t0 + vb.spike().epsilon;
    auto exact = [&](double t) {
        if (t <= t0) return 0.0;
        if (t <= t1) return v / (-a) * (1.0 - std::exp(a * (t - t0)));
        return v / (-a) * (1.0 - std::exp(a * (t1 - t0))) * std::exp(a * (t - t1));
    };
    for (std::size_t k = 0; k <= g.steps; k += 100)
        for (std::size_t p : {0u, 7u, 19u}) CHECK(std::abs(f.z.at(p, k, 0) - exact(g.time(k))) < 2 * h);
}

TEST_CASE("common random numbers shrink the variance of xi") {
    auto m = logistic_diffusion_control();
    auto g = TimeGrid::make(2.0, 0.01, 1.0);
    const std::size_t M = 1000;
    const SpikeSpec sp{0.5, 0.2, 0.5};
    auto base = simulate_state(m, ControlLaw::constant(0.0), g, M, 10, {0.5});
    auto vb = simulate_variations(m, base, sp);
    auto indep = simulate_state(m, make_spike(ControlLaw::constant(0.0), sp, g), g, M, 11, {0.5});
    const std::size_t k = g.index_of(1.0);
    auto xb = base.states_at(k), xi_ind = indep.states_at(k);
    auto var = [&](auto get) {
        double s = 0, s2 = 0;
        for (std::size_t p = 0; p < M; ++p) {
            const double d = get(p);
            s += d;
            s2 += d * d;
        }
        return s2 / M - (s / M) * (s / M);
    };
    const double v_crn = var([&](std::size_t p) { return vb.fields().xe.at(p, k, 0) - xb[p]; });
    const double v_ind = var([&](std::size_t p) { return xi_ind[p] - xb[p]; });
    CHECK(v_crn < v_ind);
}

TEST_CASE("first variation is linear in the diffusion gap") {
    auto m = builtin_model("lq_scalar", {{"sigma0", 0.5}, {"sigma1", 0.25}});
    auto g = TimeGrid::make(3.0, 0.01, 1.0);
    auto base = simulate_state(m, ControlLaw::constant(0.0), g, 200, 6, {1.0});
    auto v1 = simulate_variations(m, base, {1.0, 0.2, 1.0});
    auto v2 = simulate_variations(m, base, {1.0, 0.2, 2.0});
    const auto& y1 = v1.fields().y.data;
    const auto& y2 = v2.fields().y.data;
    for (std::size_t i = 0; i < y1.size(); ++i) REQUIRE(y2[i] == 2.0 * y1[i]);
}

TEST_CASE("streaming and materialized sweeps agree") {
    auto m = logistic_diffusion_control();
    auto g = TimeGrid::make(2.0, 0.01, 1.0);
    auto base = simulate_state(m, ControlLaw::constant(0.0), g, 100, 3, {0.5});
    const auto r = realize_spike(g, {0.4, 0.3, -0.5});
    VariationBundle stored(std::make_shared<const ControlModel>(m), base, r, true);
    VariationBundle streamed(std::make_shared<const ControlModel>(m), base, r, false);
    std::vector<double> a, b;
    stored.sweep([&](const NodeView&, std::span<const VariationState> s) {
        a.insert(a.end(), s[0].z.begin(), s[0].z.end());
        a.insert(a.end(), s[0].xe.begin(), s[0].xe.end());
    });
    streamed.sweep([&](const NodeView&, std::span<const VariationState> s) {
        b.insert(b.end(), s[0].z.begin(), s[0].z.end());
        b.insert(b.end(), s[0].xe.begin(), s[0].xe.end());
    });
    CHECK(a == b);
}

TEST_CASE("log-log slope of an exact power law") {
    std::vector<double> e{0.4, 0.2, 0.1, 0.05}, v;
    for (double x : e) v.push_back(3.0 * x * x);
    auto s = loglog_slope(e, v);
    CHECK(s.slope == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(s.ci_high - s.ci_low < 1e-9);
    auto z = loglog_slope(e, {0, 0, 0, 0});
    CHECK(z.degenerate);
}

TEST_CASE("expansion orders on the logistic model") {
    auto m = logistic_diffusion_control();
    auto g = TimeGrid::make(3.0, 0.01, 0.1);
    auto rep = estimate_expansion_orders(m, ControlLaw::constant(0.0), g, {0.5, 0.0, 0.5}, {0.4, 0.2, 0.1, 0.05}, 1,
                                         20000, 17, {0.5});
    CHECK(rep.rows.size() == 20);
    CHECK(rep.slope("xi").slope == doctest::Approx(1.0).epsilon(0.2));
    CHECK(rep.slope("y").slope == doctest::Approx(1.0).epsilon(0.2));
    CHECK(rep.slope("eta").slope == doctest::Approx(2.0).epsilon(0.15));
    CHECK(rep.slope("zeta").slope >= 2.1);
    std::ostringstream os;
    write_order_csv(os, rep);
    CHECK(os.str().rfind("kind,quantity,k,eps,weighted_sup,std_err", 0) == 0);
}

TEST_CASE("y is degenerate on LQ with drift-only control") {
    auto m = builtin_model("lq_scalar", {{"sigma0", 0.5}});
    auto g = TimeGrid::make(3.0, 0.01, 0.5);
    auto rep = estimate_expansion_orders(m, ControlLaw::constant(0.0), g, {0.5, 0.0, 1.0}, {0.4, 0.2, 0.1, 0.05}, 1,
                                         200, 3, {1.0});
    CHECK(rep.slope("y").degenerate);
    CHECK(rep.slope("z").slope == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("too few paths") {
    auto m = logistic_diffusion_control();
    auto g = TimeGrid::make(1.0, 0.01, 1.0);
    CHECK_THROWS_AS(estimate_expansion_orders(m, ControlLaw::constant(0.0), g, {0.2, 0.0, 0.5},
                                              {0.4, 0.2, 0.1, 0.05}, 1, 1, 3, {0.5}),
                    InsufficientPaths);
}

TEST_CASE("cost expansion") {
    SUBCASE("no gap gives zero terms") {
        auto m = logistic_diffusion_control();
        auto g = TimeGrid::make(2.0, 0.01, 1.0);
        auto base = simulate_state(m, ControlLaw::constant(0.1), g, 100, 3, {0.5});
        auto c = expand_cost(m, simulate_variations(m, base, {0.5, 0.2, 0.1}));
        CHECK(c.direct == 0.0);
        CHECK(c.expansion == 0.0);
    }
    SUBCASE("LQ residual is o(eps)") {
        auto m = builtin_model("lq_scalar", {{"sigma0", 0.5}, {"sigma1", 0.3}});
        auto g = TimeGrid::make(12.0, 2e-3, 0.5);
        auto base = simulate_state(m, ControlLaw::linear_feedback(-0.35), g, 4000, 5, {1.0});
        std::vector<RealizedSpike> spikes;
        for (double e : {0.4, 0.2, 0.1, 0.05}) spikes.push_back(realize_spike(g, {1.0, e, 1.0}));
        auto rows = expand_cost(m, base, spikes);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            CAPTURE(i);
            const double prev = std::abs(rows[i - 1].residual) / rows[i - 1].epsilon;
            const double cur = std::abs(rows[i].residual) / rows[i].epsilon;
            CHECK(cur <= prev + 3 * rows[i].residual_std_error / rows[i].epsilon);
        }
        CHECK(std::abs(rows.back().residual) / rows.back().epsilon < 0.1 * std::abs(rows.back().direct) / rows.back().epsilon);
    }
}
