#include <benchmark/benchmark.h>

#include <vector>

#include "smpmc/regression.hpp"
#include "smpmc/sde.hpp"

using namespace smpmc;

static void BM_NormalDraw(benchmark::State& st) {
    NoiseSource ns(1);
    std::uint64_t k = 0;
    for (auto _ : st) benchmark::DoNotOptimize(ns.normal(3, k++, 0));
}
BENCHMARK(BM_NormalDraw);

static void BM_SplitStep(benchmark::State& st, const char* name) {
    auto m = builtin_model(name);
    double x = 0.7, y = 0.0, dw = 0.01;
    for (auto _ : st) {
        split_step(m, {&x, 1}, 0.0, 1e-3, {&dw, 1}, {&y, 1});
        benchmark::DoNotOptimize(y);
    }
}
BENCHMARK_CAPTURE(BM_SplitStep, x5, "polynomial_x5");
BENCHMARK_CAPTURE(BM_SplitStep, lq, "lq_scalar");
BENCHMARK_CAPTURE(BM_SplitStep, logistic, "logistic");

static void BM_Simulate(benchmark::State& st) {
    auto m = builtin_model("lq_scalar");
    auto g = TimeGrid::make(1.0, 1e-2, 1.0);
    for (auto _ : st) {
        auto b = simulate_state(m, ControlLaw::linear_feedback(-0.35), g, static_cast<std::size_t>(st.range(0)), 1, {1.0});
        benchmark::DoNotOptimize(b.states_at(g.steps));
    }
    st.SetItemsProcessed(st.iterations() * st.range(0) * static_cast<std::int64_t>(g.steps));
}
BENCHMARK(BM_Simulate)->Arg(10000);

static void BM_Regression(benchmark::State& st) {
    const std::size_t M = 100000;
    NoiseSource ns(2);
    std::vector<double> x(M), y(M);
    for (std::size_t m = 0; m < M; ++m) {
        x[m] = ns.normal(m, 0, 0);
        y[m] = x[m] * x[m] + ns.normal(m, 1, 0);
    }
    RegressionBasis basis;
    basis.degree = static_cast<int>(st.range(0));
    for (auto _ : st) {
        Regressor reg(basis, x, M, 1, Executor(1));
        auto f = reg.fit(y, 1);
        benchmark::DoNotOptimize(f.coeffs.data());
    }
}
BENCHMARK(BM_Regression)->Arg(3)->Arg(5);
BENCHMARK_MAIN();
