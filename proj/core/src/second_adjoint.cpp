#include "smpmc/second_adjoint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <boost/math/tools/minima.hpp>

#include "smpmc/csv.hpp"
#include "smpmc/errors.hpp"
#include "stats.hpp"

namespace smpmc {

using detail::Stat;

void hessian_of_H(const ControlModel& model, std::span<const double> x, double u, std::span<const double> p,
                  std::span<const double> q, std::span<double> out, HessianWork& w) {
    const std::size_t n = model.n(), d = model.d(), nn = n * n;
    model.D2b(x, u, w.D2b);
    model.D2sigma(x, u, w.D2s);
    model.D2f(x, u, w.D2f);
    for (std::size_t e = 0; e < nn; ++e) {
        double acc = -w.D2f[e];
        for (std::size_t i = 0; i < n; ++i) acc += p[i] * w.D2b[i * nn + e];
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t i = 0; i < n; ++i) acc += q[i + n * j] * w.D2s[(i + n * j) * nn + e];
        out[e] = acc;
    }
}

void hessian_of_H(const ControlModel& model, std::span<const double> x, double u, std::span<const double> p,
                  std::span<const double> q, std::span<double> out) {
    HessianWork w(model.n(), model.d());
    hessian_of_H(model, x, u, p, q, out, w);
}

void HessianOfH::node(const NodeView& nv, const AdjointNode& a, std::span<double> out) const {
    const auto& m = model();
    const std::size_t n = m.n(), d = m.d(), M = bundle().paths();
    bundle().executor().for_each(M, [&](std::size_t b, std::size_t e) {
        HessianWork w(n, d);
        for (std::size_t i = b; i < e; ++i)
            hessian_of_H(m, nv.x.subspan(i * n, n), nv.u[i], a.p.subspan(i * n, n), a.q.subspan(i * n * d, n * d),
                         out.subspan(i * n * n, n * n), w);
    });
}

void HessianOfH::at(std::size_t k, std::span<const double> x, double u, std::span<double> out) const {
    const std::size_t n = model().n(), d = model().d();
    std::vector<double> p(n), ph(n), q(n * d);
    adjoint_->evaluate(k, x, u, p, ph, q);
    hessian_of_H(model(), x, u, p, q, out);
}

void HessianOfH::sweep(
    std::size_t k0, std::size_t k1,
    const std::function<void(const NodeView&, const AdjointNode&, std::span<const double>)>& visit) const {
    const std::size_t n = model().n(), M = bundle().paths();
    std::vector<double> H(M * n * n);
    adjoint_->sweep(k0, k1, [&](const NodeView& nv, const AdjointNode& a) {
        node(nv, a, H);
        visit(nv, a, H);
    });
}

HessianOfH hessian_H(const AdjointSolution& adjoint) { return HessianOfH(adjoint); }

Conditioning parse_conditioning(const std::string& s) {
    if (s == "regression") return Conditioning::regression;
    if (s == "nested") return Conditioning::nested;
    throw InvalidArgument("unknown conditioning mode '" + s + "' (expected regression or nested)");
}

std::string to_string(Conditioning c) { return c == Conditioning::nested ? "nested" : "regression"; }

std::size_t SecondAdjointEstimate::n() const {
    return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(matrix.size()))));
}

void SecondAdjointEstimate::at(std::span<const double> x, std::span<double> P) const {
    if (field.empty()) {
        std::copy(matrix.begin(), matrix.end(), P.begin());
        return;
    }
    field.evaluate(x, P);
}

double SecondAdjointEstimate::form(std::span<const double> eta, std::span<const double> gamma) const {
    const std::size_t nn = n();
    double s = 0.0;
    for (std::size_t i = 0; i < nn; ++i)
        for (std::size_t j = 0; j < nn; ++j) s += gamma[i] * matrix[i + nn * j] * eta[j];
    return s;
}

namespace {

double quad_form(const double* H, const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double hb = 0.0;
        for (std::size_t l = 0; l < n; ++l) hb += H[i + n * l] * b[l];
        s += a[i] * hb;
    }
    return s;
}

// Flows started at node k0 from the columns of `init`; per path and pair (a, b) the integral
// sum_k w_k e^{-r(t_k - t_k0)} <D^2H y_a, y_b> with trapezoid weights up to the horizon.
struct FlowJob {
    std::size_t k0 = 0;
    std::size_t cols = 0;
    std::vector<double> init;  // n * cols
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

struct FlowJobResult {
    std::vector<double> integral;  // M * pairs
    std::vector<double> x0;        // M * n, states at k0
    double tail = 0.0;
};

std::vector<FlowJobResult> run_flow_jobs(const HessianOfH& hess, const std::vector<FlowJob>& jobs) {
    const PathBundle& bundle = hess.bundle();
    const auto& g = bundle.grid();
    const auto& model = hess.model();
    const std::size_t M = bundle.paths(), n = bundle.n(), d = bundle.d(), N = g.steps, J = jobs.size();
    const double h = g.step, r = g.discount;
    std::vector<FlowJobResult> out(J);
    if (J == 0) return out;
    std::size_t kmin = N, maxcols = 0;
    std::vector<std::vector<double>> Y(J);
    for (std::size_t j = 0; j < J; ++j) {
        if (jobs[j].k0 > N) throw InvalidArgument("second adjoint time index outside the grid");
        if (jobs[j].init.size() != n * jobs[j].cols) throw InvalidArgument("flow initial values have the wrong size");
        kmin = std::min(kmin, jobs[j].k0);
        maxcols = std::max(maxcols, jobs[j].cols);
        out[j].integral.assign(M * jobs[j].pairs.size(), 0.0);
        Y[j].resize(M * n * jobs[j].cols);
        for (std::size_t m = 0; m < M; ++m) std::copy(jobs[j].init.begin(), jobs[j].init.end(), Y[j].begin() + m * n * jobs[j].cols);
    }
    const Executor ex = bundle.executor();
    std::vector<double> wk(J);

    hess.sweep(kmin, N, [&](const NodeView& nv, const AdjointNode&, std::span<const double> H) {
        const std::size_t k = nv.k;
        bool any = false;
        for (std::size_t j = 0; j < J; ++j) {
            const std::size_t k0 = jobs[j].k0;
            if (k < k0) {
                wk[j] = -1.0;
                continue;
            }
            any = true;
            if (k == k0) out[j].x0.assign(nv.x.begin(), nv.x.end());
            const double trap = (k == k0 || k == N) ? 0.5 : 1.0;
            wk[j] = k0 == N ? 0.0 : trap * h * std::exp(-r * (nv.t - g.time(k0)));
        }
        if (!any) return;
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            std::vector<double> Db(n * n), Ds(d * n * n), tmp(n * maxcols);
            for (std::size_t m = b; m < e; ++m) {
                const auto x = nv.x.subspan(m * n, n);
                const double u = nv.u[m];
                if (k < N) {
                    model.Db(x, u, Db);
                    model.Dsigma(x, u, Ds);
                }
                const double* Hm = H.data() + m * n * n;
                for (std::size_t j = 0; j < J; ++j) {
                    if (wk[j] < 0.0) continue;
                    const auto& job = jobs[j];
                    double* Yj = Y[j].data() + m * n * job.cols;
                    double* I = out[j].integral.data() + m * job.pairs.size();
                    for (std::size_t pi = 0; pi < job.pairs.size(); ++pi)
                        I[pi] += wk[j] * quad_form(Hm, Yj + n * job.pairs[pi].second, Yj + n * job.pairs[pi].first, n);
                    if (k < N) flow_step(n, d, job.cols, h, Db, Ds, nv.dw.subspan(m * d, d), {Yj, n * job.cols}, tmp);
                }
            }
        });
    });

    for (std::size_t j = 0; j < J; ++j) {
        double s = 0.0;
        for (double v : Y[j]) s += v * v;
        out[j].tail = std::exp(-r * (g.horizon - g.time(jobs[j].k0))) * s / static_cast<double>(M);
        for (double v : out[j].integral)
            if (!std::isfinite(v)) throw NonFiniteState("second adjoint flow integral became non-finite");
    }
    return out;
}

FlowJob basis_job(std::size_t k, std::size_t n) {
    FlowJob job;
    job.k0 = k;
    job.cols = n;
    job.init.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) job.init[i + n * i] = 1.0;
    // pair (i, j) lands at output i + n j: <D^2H y^{e_j}, y^{e_i}>
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) job.pairs.emplace_back(j, i);
    return job;
}

// mean of the symmetric part, its std error, and the antisymmetric diagnostics
void summarize(SecondAdjointEstimate& est, std::span<const double> raw, std::size_t P, std::size_t n,
               std::vector<double>& sym) {
    const std::size_t nn = n * n;
    sym.assign(P * nn, 0.0);
    std::vector<Stat> S(nn), A(nn);
    for (std::size_t m = 0; m < P; ++m) {
        const double* I = raw.data() + m * nn;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) {
                const double s = 0.5 * (I[i + n * j] + I[j + n * i]);
                sym[m * nn + i + n * j] = s;
                S[i + n * j].add(s);
                A[i + n * j].add(0.5 * (I[i + n * j] - I[j + n * i]));
            }
    }
    est.matrix.resize(nn);
    est.std_error_matrix.resize(nn);
    est.asymmetry.resize(nn);
    est.asymmetry_std_error.resize(nn);
    for (std::size_t e = 0; e < nn; ++e) {
        est.matrix[e] = S[e].mean();
        est.std_error_matrix[e] = S[e].se();
        est.asymmetry[e] = A[e].mean();
        est.asymmetry_std_error[e] = A[e].se();
    }
    // the mean of a symmetric set of outputs is symmetric up to summation order; make it exact
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = j + 1; i < n; ++i) {
            const double s = 0.5 * (est.matrix[i + n * j] + est.matrix[j + n * i]);
            est.matrix[i + n * j] = est.matrix[j + n * i] = s;
        }
    est.paths = P;
}

std::vector<SecondAdjointEstimate> estimate_regression(const HessianOfH& hess, const std::vector<std::size_t>& idx,
                                                       const SecondAdjointOptions& opt) {
    const PathBundle& bundle = hess.bundle();
    const std::size_t n = bundle.n(), M = bundle.paths();
    std::vector<FlowJob> jobs;
    for (std::size_t k : idx) jobs.push_back(basis_job(k, n));
    auto res = run_flow_jobs(hess, jobs);
    std::vector<SecondAdjointEstimate> out(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        auto& est = out[j];
        est.k = idx[j];
        est.t = bundle.grid().time(idx[j]);
        est.conditioning = Conditioning::regression;
        est.flows_per_basis = M;
        est.tail = res[j].tail;
        est.tail_ok = est.tail <= bundle.grid().tail_tolerance;
        std::vector<double> sym;
        summarize(est, res[j].integral, M, n, sym);
        Regressor reg(opt.basis, res[j].x0, M, n, bundle.executor());
        est.field = reg.fit(sym, n * n);
        est.pathwise.resize(M * n * n);
        reg.fitted(est.field, est.pathwise);
    }
    return out;
}

SecondAdjointEstimate estimate_nested(const HessianOfH& hess, std::size_t k0, const SecondAdjointOptions& opt) {
    const PathBundle& bundle = hess.bundle();
    const AdjointSolution& adj = hess.adjoint();
    const auto& model = hess.model();
    const auto& g = bundle.grid();
    const std::size_t n = bundle.n(), d = bundle.d(), N = g.steps, nn = n * n;
    const std::size_t L = opt.inner_paths, O = std::min(opt.outer_paths, bundle.paths());
    if (L < 2) throw InsufficientInnerPaths("nested conditioning needs at least 2 inner paths, got " + std::to_string(L));
    if (O < 1) throw InvalidArgument("nested conditioning needs at least one outer path");
    if (k0 > N) throw InvalidArgument("second adjoint time index outside the grid");
    const double h = g.step, r = g.discount;
    const std::size_t subs = g.noise_substeps;
    const double scale = std::sqrt(h / static_cast<double>(subs));
    const NoiseSource noise = bundle.noise().substream(0x6e65737465640000ULL + k0);
    const std::vector<double> X0 = bundle.states_at(k0);
    const ControlLaw& law = bundle.control();
    const Executor ex = bundle.executor();

    std::vector<double> raw(O * nn, 0.0), tails(O, 0.0);
    for (std::size_t o = 0; o < O; ++o) {
        std::vector<double> inner(L * nn, 0.0), itail(L, 0.0);
        ex.for_each(L, [&](std::size_t b, std::size_t e) {
            HessianWork hw(n, d);
            std::vector<double> x(n), xn(n), p(n), ph(n), q(n * d), H(nn), Db(nn), Ds(d * nn), Y(nn), tmp(nn), dw(d);
            for (std::size_t i = b; i < e; ++i) {
                const std::uint64_t path = o * L + i;
                std::copy(X0.begin() + o * n, X0.begin() + (o + 1) * n, x.begin());
                std::fill(Y.begin(), Y.end(), 0.0);
                for (std::size_t a = 0; a < n; ++a) Y[a + n * a] = 1.0;
                double* I = inner.data() + i * nn;
                for (std::size_t k = k0; k <= N; ++k) {
                    const double t = g.time(k);
                    const double u = law(k, t, x);
                    adj.evaluate(k, x, u, p, ph, q);
                    hessian_of_H(model, x, u, p, q, H, hw);
                    const double w = k0 == N ? 0.0 : ((k == k0 || k == N) ? 0.5 : 1.0) * h * std::exp(-r * (t - g.time(k0)));
                    for (std::size_t bj = 0; bj < n; ++bj)
                        for (std::size_t ai = 0; ai < n; ++ai)
                            I[ai + n * bj] += w * quad_form(H.data(), Y.data() + n * ai, Y.data() + n * bj, n);
                    if (k == N) break;
                    for (std::size_t j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (std::size_t s = 0; s < subs; ++s) acc += noise.normal(path, k * subs + s, j);
                        dw[j] = scale * acc;
                    }
                    model.Db(x, u, Db);
                    model.Dsigma(x, u, Ds);
                    flow_step(n, d, n, h, Db, Ds, dw, Y, tmp);
                    split_step(model, x, u, h, dw, xn);
                    x.swap(xn);
                }
                double s = 0.0;
                for (double v : Y) s += v * v;
                itail[i] = s;
            }
        });
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t e = 0; e < nn; ++e) raw[o * nn + e] += inner[i * nn + e];
            tails[o] += itail[i];
        }
        for (std::size_t e = 0; e < nn; ++e) raw[o * nn + e] /= static_cast<double>(L);
        tails[o] /= static_cast<double>(L);
    }

    SecondAdjointEstimate est;
    est.k = k0;
    est.t = g.time(k0);
    est.conditioning = Conditioning::nested;
    est.flows_per_basis = L;
    est.tail = std::exp(-r * (g.horizon - est.t)) * std::accumulate(tails.begin(), tails.end(), 0.0) /
               static_cast<double>(O);
    est.tail_ok = est.tail <= g.tail_tolerance;
    summarize(est, raw, O, n, est.pathwise);
    for (double v : est.matrix)
        if (!std::isfinite(v)) throw NonFiniteState("nested second adjoint estimate became non-finite");
    return est;
}

}  // namespace

std::vector<SecondAdjointEstimate> estimate_P(const HessianOfH& hess, const std::vector<std::size_t>& t_indices,
                                              const SecondAdjointOptions& options) {
    for (std::size_t k : t_indices)
        if (k > hess.bundle().grid().steps) throw InvalidArgument("second adjoint time index outside the grid");
    if (options.mode == Conditioning::regression) return estimate_regression(hess, t_indices, options);
    std::vector<SecondAdjointEstimate> out;
    for (std::size_t k : t_indices) out.push_back(estimate_nested(hess, k, options));
    return out;
}

SecondAdjointEstimate estimate_P(const HessianOfH& hess, std::size_t t_index, const SecondAdjointOptions& options) {
    return estimate_P(hess, std::vector<std::size_t>{t_index}, options).front();
}

std::vector<FormCheck> check_bilinear_form(const HessianOfH& hess, const SecondAdjointEstimate& estimate,
                                           const std::vector<std::pair<std::vector<double>, std::vector<double>>>& pairs) {
    const std::size_t n = hess.bundle().n(), M = hess.bundle().paths();
    FlowJob job;
    job.k0 = estimate.k;
    job.cols = 2 * pairs.size();
    for (std::size_t l = 0; l < pairs.size(); ++l) {
        if (pairs[l].first.size() != n || pairs[l].second.size() != n)
            throw InvalidArgument("direction vectors must have the state dimension");
        job.init.insert(job.init.end(), pairs[l].first.begin(), pairs[l].first.end());
        job.init.insert(job.init.end(), pairs[l].second.begin(), pairs[l].second.end());
        job.pairs.emplace_back(2 * l, 2 * l + 1);
    }
    auto res = run_flow_jobs(hess, {job});
    std::vector<FormCheck> out(pairs.size());
    for (std::size_t l = 0; l < pairs.size(); ++l) {
        Stat s;
        for (std::size_t m = 0; m < M; ++m) s.add(res[0].integral[m * pairs.size() + l]);
        out[l].direct = s.mean();
        out[l].std_err = s.se();
        out[l].from_matrix = estimate.form(pairs[l].first, pairs[l].second);
    }
    return out;
}

PPropertiesReport check_P_properties(const std::vector<SecondAdjointEstimate>& estimates,
                                     std::span<const double> gamma, std::span<const double> eta) {
    if (estimates.size() < 3) throw InvalidArgument("P property checks need at least 3 time points");
    std::vector<std::size_t> order(estimates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return estimates[a].t < estimates[b].t; });
    const std::size_t n = estimates.front().n(), nn = n * n;
    if (gamma.size() != n || eta.size() != n) throw InvalidArgument("direction vectors must have the state dimension");
    PPropertiesReport rep;
    for (std::size_t o : order) {
        const auto& est = estimates[o];
        const std::size_t P = est.pathwise.size() / nn;
        Stat s;
        for (std::size_t m = 0; m < P; ++m) {
            double f = 0.0;
            for (std::size_t e = 0; e < nn; ++e) f += est.pathwise[m * nn + e] * est.pathwise[m * nn + e];
            s.add(f);
        }
        rep.t.push_back(est.t);
        rep.norm2.push_back(s.mean());
        rep.norm2_std_error.push_back(s.se());
        rep.max_norm2 = std::max(rep.max_norm2, s.mean());
        for (std::size_t e = 0; e < nn; ++e) {
            const double a = std::abs(est.asymmetry[e]), se = est.asymmetry_std_error[e];
            double ratio = 0.0;
            if (se > 0.0)
                ratio = a / se;
            else if (a > 1e-14 * (1.0 + std::abs(est.matrix[e])))
                ratio = std::numeric_limits<double>::infinity();
            rep.max_asymmetry_ratio = std::max(rep.max_asymmetry_ratio, ratio);
        }
    }
    rep.asymmetry_ok = rep.max_asymmetry_ratio <= 3.0;

    const auto& base = estimates[order.front()];
    const std::size_t P = base.pathwise.size() / nn;
    for (std::size_t idx = order.size(); idx-- > 1;) {
        const auto& est = estimates[order[idx]];
        if (est.pathwise.size() != base.pathwise.size())
            throw InvalidArgument("P estimates compared pathwise must share their paths");
        Stat s;
        for (std::size_t m = 0; m < P; ++m) {
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    v += eta[i] * (est.pathwise[m * nn + i + n * j] - base.pathwise[m * nn + i + n * j]) * gamma[j];
            s.add(std::abs(v));
        }
        rep.eps.push_back(est.t - base.t);
        rep.modulus.push_back(s.mean());
        rep.modulus_std_error.push_back(s.se());
    }
    for (std::size_t i = 1; i < rep.modulus.size(); ++i) {
        const double tol = 3.0 * std::hypot(rep.modulus_std_error[i], rep.modulus_std_error[i - 1]);
        if (rep.modulus[i] > rep.modulus[i - 1] + tol) rep.modulus_decreasing = false;
    }
    return rep;
}

SpikeDualityReport check_spike_duality(const HessianOfH& hess, const std::vector<SecondAdjointEstimate>& estimates,
                                       std::span<const RealizedSpike> spikes) {
    if (estimates.empty()) throw InvalidArgument("spike duality needs at least one P estimate");
    const PathBundle& base = hess.bundle();
    const AdjointSolution& adj = hess.adjoint();
    const auto& model = hess.model();
    const auto& g = base.grid();
    const std::size_t S = spikes.size(), M = base.paths(), n = base.n(), d = base.d(), N = g.steps, nn = n * n;
    const double h = g.step, r = g.discount;
    std::vector<const SecondAdjointEstimate*> est;
    for (const auto& e : estimates) est.push_back(&e);
    std::stable_sort(est.begin(), est.end(), [](auto a, auto b) { return a->t < b->t; });

    std::size_t kfirst = N;
    for (const auto& sp : spikes)
        if (!sp.empty()) kfirst = std::min(kfirst, sp.begin);
    std::vector<double> acc(S * M * 2, 0.0);
    std::vector<double> p(M * n), ph(M * n), q(M * n * d);
    const Executor ex = base.executor();

    sweep_variations(model, base, spikes, [&](const NodeView& nv, std::span<const VariationState> vs) {
        const std::size_t k = nv.k;
        if (k < kfirst || k >= N) return;
        adj.evaluate_node(k, nv.x, nv.u, p, ph, q);
        const double w = h * std::exp(-r * nv.t);
        // bracketing estimates in time
        std::size_t hi = 0;
        while (hi < est.size() && est[hi]->t < nv.t) ++hi;
        const SecondAdjointEstimate* e0 = est[hi == 0 ? 0 : hi - 1];
        const SecondAdjointEstimate* e1 = est[std::min(hi, est.size() - 1)];
        const double lam = (e1 == e0 || e1->t <= e0->t) ? 0.0 : std::clamp((nv.t - e0->t) / (e1->t - e0->t), 0.0, 1.0);
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            HessianWork hw(n, d);
            std::vector<double> H(nn), P0(nn), P1(nn), sv(n * d), su(n * d), ds(n);
            for (std::size_t m = b; m < e; ++m) {
                const auto x = nv.x.subspan(m * n, n);
                const double u = nv.u[m];
                bool have_H = false, have_P = false;
                for (std::size_t s = 0; s < S; ++s) {
                    const auto& sp = spikes[s];
                    if (sp.empty() || k < sp.begin) continue;
                    double* a = acc.data() + (s * M + m) * 2;
                    if (k > sp.begin) {  // y vanishes at the first spike node
                        if (!have_H) {
                            hessian_of_H(model, x, u, std::span<const double>(p).subspan(m * n, n),
                                         std::span<const double>(q).subspan(m * n * d, n * d), H, hw);
                            have_H = true;
                        }
                        const double* y = vs[s].y.data() + m * n;
                        a[0] += w * quad_form(H.data(), y, y, n);
                    }
                    if (sp.active(k)) {
                        if (!have_P) {
                            e0->at(x, P0);
                            e1->at(x, P1);
                            for (std::size_t i = 0; i < nn; ++i) P0[i] = (1.0 - lam) * P0[i] + lam * P1[i];
                            model.sigma(x, u, su);
                            have_P = true;
                        }
                        model.sigma(x, sp.v, sv);
                        for (std::size_t j = 0; j < d; ++j) {
                            for (std::size_t i = 0; i < n; ++i) ds[i] = sv[i + n * j] - su[i + n * j];
                            a[1] += w * quad_form(P0.data(), ds.data(), ds.data(), n);
                        }
                    }
                }
            }
        });
    });

    SpikeDualityReport rep;
    rep.rows.resize(S);
    for (std::size_t s = 0; s < S; ++s) {
        Stat L, R, D;
        for (std::size_t m = 0; m < M; ++m) {
            const double* a = acc.data() + (s * M + m) * 2;
            L.add(a[0]);
            R.add(a[1]);
            D.add(a[0] - a[1]);
        }
        auto& row = rep.rows[s];
        auto& id = row.identity;
        id.name = "spike_duality";
        id.epsilon = spikes[s].epsilon;
        id.lhs = L.mean();
        id.rhs = R.mean();
        id.diff = id.lhs - id.rhs;
        id.std_err = D.se();
        id.tolerance = 3.0 * id.std_err;
        id.pass = std::abs(id.diff) <= id.tolerance;
        if (id.epsilon > 0.0) {
            row.ratio = std::abs(id.diff) / id.epsilon;
            row.ratio_std_error = id.std_err / id.epsilon;
        }
    }
    std::vector<std::size_t> order(S);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](auto a, auto b) { return spikes[a].epsilon > spikes[b].epsilon; });
    for (std::size_t i = 1; i < S; ++i) {
        const auto& a = rep.rows[order[i - 1]];
        const auto& b = rep.rows[order[i]];
        if (b.ratio > a.ratio + 3.0 * std::hypot(a.ratio_std_error, b.ratio_std_error)) rep.decreasing = false;
    }
    return rep;
}

YDynamicsReport check_Y_dynamics(const ControlModel& model, const PathBundle& base, const RealizedSpike& spike,
                                 double c_three_half) {
    const auto& g = base.grid();
    const std::size_t M = base.paths(), n = base.n(), d = base.d(), N = g.steps, nn = n * n;
    const double h = g.step, r = g.discount;
    YDynamicsReport rep;
    rep.epsilon = spike.epsilon;
    rep.c_three_half = c_three_half;
    // per path: lhs, gamma term, lambda term; predicted Y_{k+1} and the cumulative sample residual
    std::vector<double> acc(M * 3, 0.0), pred(M * nn, 0.0), cum(M * nn, 0.0), dres(M, 0.0);
    const Executor ex = base.executor();

    sweep_variations(model, base, std::span<const RealizedSpike>(&spike, 1),
                     [&](const NodeView& nv, std::span<const VariationState> vs) {
        const std::size_t k = nv.k;
        if (spike.empty() || k < spike.begin) return;
        const double disc = std::exp(-r * nv.t);
        const double prev_disc = k > 0 ? std::exp(-r * g.time(k - 1)) : 0.0;
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            std::vector<double> A(nn), B(d * nn), su(n * d), sv(n * d), ds(n * d, 0.0), Y(nn), drift(nn), G(nn),
                Ey(n), cond(nn), gj(n);
            for (std::size_t m = b; m < e; ++m) {
                const double* y = vs[0].y.data() + m * n;
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < n; ++i) Y[i + n * j] = y[i] * y[j];
                double* pr = pred.data() + m * nn;
                double* cu = cum.data() + m * nn;
                if (k > spike.begin)
                    for (std::size_t e2 = 0; e2 < nn; ++e2) cu[e2] += prev_disc * (Y[e2] - pr[e2]);
                dres[m] = 0.0;
                if (k == N) continue;
                const auto x = nv.x.subspan(m * n, n);
                const double u = nv.u[m];
                model.Db(x, u, A);
                model.Dsigma(x, u, B);
                const bool act = spike.active(k);
                if (act) {
                    model.sigma(x, spike.v, sv);
                    model.sigma(x, u, su);
                    for (std::size_t i = 0; i < n * d; ++i) ds[i] = sv[i] - su[i];
                } else {
                    std::fill(ds.begin(), ds.end(), 0.0);
                }
                // drift: A Y + Y A' + sum_j B^j Y B^j' + Gamma
                std::fill(G.begin(), G.end(), 0.0);
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < n; ++i) {
                        double s = 0.0;
                        for (std::size_t l = 0; l < n; ++l) s += A[i + n * l] * Y[l + n * j] + Y[i + n * l] * A[j + n * l];
                        drift[i + n * j] = s;
                    }
                double lam2 = 0.0;
                for (std::size_t jj = 0; jj < d; ++jj) {
                    const double* Bj = B.data() + jj * nn;
                    const double* dsj = ds.data() + n * jj;
                    for (std::size_t i = 0; i < n; ++i) {
                        double s = 0.0;
                        for (std::size_t l = 0; l < n; ++l) s += Bj[i + n * l] * y[l];
                        gj[i] = s;  // B^j y
                    }
                    for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t i = 0; i < n; ++i) {
                            double s = 0.0;
                            for (std::size_t a = 0; a < n; ++a)
                                for (std::size_t c = 0; c < n; ++c) s += Bj[i + n * a] * Y[a + n * c] * Bj[j + n * c];
                            drift[i + n * j] += s;
                            G[i + n * j] += dsj[i] * dsj[j] + gj[i] * dsj[j] + dsj[i] * gj[j];
                            const double L = dsj[i] * y[j] + y[i] * dsj[j];
                            lam2 += L * L;
                        }
                }
                double g2 = 0.0, y2 = 0.0;
                for (std::size_t e2 = 0; e2 < nn; ++e2) {
                    drift[e2] += G[e2];
                    g2 += G[e2] * G[e2];
                    y2 += Y[e2] * Y[e2];
                }
                double* a = acc.data() + m * 3;
                a[0] += h * disc * y2;
                a[1] += h * disc * g2;
                a[2] += h * disc * lam2;
                // conditional second moment of the explicit step: (y + hAy)(.)' + h sum_j g_j g_j'
                for (std::size_t i = 0; i < n; ++i) {
                    double s = 0.0;
                    for (std::size_t l = 0; l < n; ++l) s += A[i + n * l] * y[l];
                    Ey[i] = y[i] + h * s;
                }
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < n; ++i) cond[i + n * j] = Ey[i] * Ey[j];
                for (std::size_t jj = 0; jj < d; ++jj) {
                    const double* Bj = B.data() + jj * nn;
                    const double* dsj = ds.data() + n * jj;
                    for (std::size_t i = 0; i < n; ++i) {
                        double s = dsj[i];
                        for (std::size_t l = 0; l < n; ++l) s += Bj[i + n * l] * y[l];
                        gj[i] = s;
                    }
                    for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t i = 0; i < n; ++i) cond[i + n * j] += h * gj[i] * gj[j];
                }
                double dr = 0.0;
                for (std::size_t e2 = 0; e2 < nn; ++e2) {
                    const double v = cond[e2] - Y[e2] - h * drift[e2];
                    dr += v * v;
                }
                dres[m] = disc * std::sqrt(dr) / h;
                // predicted Y_{k+1} from the discretized equation
                for (std::size_t e2 = 0; e2 < nn; ++e2) pr[e2] = Y[e2] + h * drift[e2];
                for (std::size_t jj = 0; jj < d; ++jj) {
                    const double* Bj = B.data() + jj * nn;
                    const double* dsj = ds.data() + n * jj;
                    const double dw = nv.dw[m * d + jj];
                    for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t i = 0; i < n; ++i) {
                            double s = dsj[i] * y[j] + y[i] * dsj[j];
                            for (std::size_t l = 0; l < n; ++l) s += Bj[i + n * l] * Y[l + n * j] + Y[i + n * l] * Bj[j + n * l];
                            pr[i + n * j] += s * dw;
                        }
                }
            }
        });
        if (k < N) {
            double s = 0.0;
            for (double v : dres) s += v;
            s /= static_cast<double>(M);
            if (s > rep.drift_residual) {
                rep.drift_residual = s;
                rep.drift_residual_node = k;
            }
        }
    });

    Stat L, Gs, Ls;
    for (std::size_t m = 0; m < M; ++m) {
        L.add(acc[m * 3]);
        Gs.add(acc[m * 3 + 1]);
        Ls.add(acc[m * 3 + 2]);
    }
    std::vector<Stat> C(nn);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t e = 0; e < nn; ++e) C[e].add(cum[m * nn + e]);
    double sr = 0.0, se2 = 0.0;
    for (const auto& c : C) {
        sr += c.mean() * c.mean();
        se2 += c.se() * c.se();
    }
    rep.sample_residual = std::sqrt(sr);
    rep.sample_residual_std_error = std::sqrt(se2);
    rep.lhs = L.mean();
    rep.lhs_std_error = L.se();
    rep.gamma_term = Gs.mean();
    rep.lambda_term = Ls.mean();
    const double kappa = r - 2.0 * c_three_half;
    rep.applicable = kappa > 0.0;
    if (!rep.applicable) {
        rep.bound = std::numeric_limits<double>::infinity();
        rep.holds = false;
        return rep;
    }
    // (kappa - delta) lhs <= gamma / delta + lambda, best delta in (0, kappa)
    auto F = [&](double dl) { return (rep.gamma_term / dl + rep.lambda_term) / (kappa - dl); };
    if (rep.gamma_term == 0.0) {
        rep.delta = 0.0;
        rep.bound = rep.lambda_term / kappa;
    } else {
        auto best = boost::math::tools::brent_find_minima(F, kappa * 1e-12, kappa * (1.0 - 1e-12), 52);
        rep.delta = best.first;
        rep.bound = best.second;
    }
    rep.holds = rep.lhs <= rep.bound + 3.0 * rep.lhs_std_error;
    return rep;
}

void write_second_adjoint_csv(std::ostream& os, const std::vector<SecondAdjointEstimate>& estimates) {
    os << "t,i,j,P_ij,stderr_ij,mode,flows_per_basis\n";
    for (const auto& est : estimates) {
        const std::size_t n = est.n();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                os << num(est.t) << ',' << (i + 1) << ',' << (j + 1) << ',' << num(est.matrix[i + n * j]) << ','
                   << num(est.std_error_matrix[i + n * j]) << ',' << to_string(est.conditioning) << ','
                   << est.flows_per_basis << '\n';
    }
}

}  // namespace smpmc
