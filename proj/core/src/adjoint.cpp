#include "smpmc/adjoint.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "smpmc/csv.hpp"
#include "smpmc/errors.hpp"

namespace smpmc {

namespace {

std::size_t truncation_index(const TimeGrid& g, double truncation) {
    if (!(truncation > 0.0)) throw InvalidArgument("adjoint truncation must be positive");
    if (std::isinf(truncation)) return g.steps;
    if (truncation > g.horizon * (1.0 + 1e-12)) throw InvalidArgument("adjoint truncation beyond the grid horizon");
    return std::min<std::size_t>(g.steps, static_cast<std::size_t>(std::llround(truncation / g.step)));
}

struct Stat {
    double sum = 0.0, sum2 = 0.0;
    void add(double v) {
        sum += v;
        sum2 += v * v;
    }
};

double mean_of(const Stat& s, std::size_t M) { return s.sum / static_cast<double>(M); }
double se_of(const Stat& s, std::size_t M) {
    if (M < 2) return 0.0;
    const double Md = static_cast<double>(M), mu = s.sum / Md;
    return std::sqrt(std::max(0.0, (s.sum2 / Md - mu * mu) * Md / (Md - 1.0)) / Md);
}

}  // namespace

AdjointSolution::AdjointSolution(std::shared_ptr<const ControlModel> model, const PathBundle& bundle,
                                 AdjointOptions options, std::size_t truncation_node)
    : model_(std::move(model)), bundle_(&bundle), options_(std::move(options)), K_(truncation_node) {}

void AdjointSolution::driver(std::size_t k, std::span<const double> x, double u, std::span<const double> phat,
                             std::span<const double> q, std::span<double> p, std::span<double> w) const {
    const std::size_t n = bundle_->n(), d = bundle_->d();
    const double h = bundle_->grid().step, disc = std::exp(-bundle_->grid().discount * h);
    (void)k;
    double* Db = w.data();
    double* Ds = Db + n * n;
    double* g = Ds + d * n * n;
    double* cur = g + n;
    model_->Db(x, u, {Db, n * n});
    model_->Dsigma(x, u, {Ds, d * n * n});
    model_->Df(x, u, {g, n});
    auto apply = [&](const double* src) {
        for (std::size_t i = 0; i < n; ++i) {
            double a = 0.0;
            for (std::size_t l = 0; l < n; ++l) a += Db[l + n * i] * src[l];
            for (std::size_t j = 0; j < d; ++j) {
                const double* B = Ds + j * n * n;
                for (std::size_t l = 0; l < n; ++l) a += B[l + n * i] * q[l + n * j];
            }
            p[i] = disc * (phat[i] + h * (a - g[i]));
        }
    };
    apply(phat.data());
    for (int s = 0; s < options_.picard_sweeps; ++s) {
        std::copy(p.begin(), p.end(), cur);
        apply(cur);
    }
}

void AdjointSolution::continuation(std::size_t k, std::span<const double> x, std::span<double> phat) const {
    if (k >= K_) {
        std::fill(phat.begin(), phat.end(), 0.0);
        return;
    }
    phat_fit_[k].evaluate(x, phat);
}

void AdjointSolution::q(std::size_t k, std::span<const double> x, std::span<double> q) const {
    if (k >= K_) {
        std::fill(q.begin(), q.end(), 0.0);
        return;
    }
    q_fit_[k].evaluate(x, q);
}

void AdjointSolution::evaluate(std::size_t k, std::span<const double> x, double u, std::span<double> p,
                               std::span<double> phat, std::span<double> qv) const {
    const std::size_t n = bundle_->n(), d = bundle_->d();
    if (k >= K_) {
        std::fill(p.begin(), p.end(), 0.0);
        std::fill(phat.begin(), phat.end(), 0.0);
        std::fill(qv.begin(), qv.end(), 0.0);
        return;
    }
    phat_fit_[k].evaluate(x, phat);
    q_fit_[k].evaluate(x, qv);
    std::vector<double> w(n * n * (1 + d) + 2 * n);
    driver(k, x, u, phat, qv, p, w);
}

void AdjointSolution::p(std::size_t k, std::span<const double> x, double u, std::span<double> p) const {
    const std::size_t n = bundle_->n(), d = bundle_->d();
    std::vector<double> phat(n), qv(n * d);
    evaluate(k, x, u, p, phat, qv);
}

void AdjointSolution::evaluate_node(std::size_t k, std::span<const double> x, std::span<const double> u,
                                    std::span<double> p, std::span<double> phat, std::span<double> q) const {
    const std::size_t n = bundle_->n(), d = bundle_->d(), M = bundle_->paths();
    bundle_->executor().for_each(M, [&](std::size_t b, std::size_t e) {
        std::vector<double> w(n * n * (1 + d) + 2 * n);
        for (std::size_t m = b; m < e; ++m) {
            auto pm = p.subspan(m * n, n), hm = phat.subspan(m * n, n), qm = q.subspan(m * n * d, n * d);
            if (k >= K_) {
                std::fill(pm.begin(), pm.end(), 0.0);
                std::fill(hm.begin(), hm.end(), 0.0);
                std::fill(qm.begin(), qm.end(), 0.0);
                continue;
            }
            const auto xm = x.subspan(m * n, n);
            phat_fit_[k].evaluate(xm, hm);
            q_fit_[k].evaluate(xm, qm);
            driver(k, xm, u[m], hm, qm, pm, w);
        }
    });
}

void AdjointSolution::sweep(std::size_t k0, std::size_t k1,
                            const std::function<void(const NodeView&, const AdjointNode&)>& visit) const {
    const std::size_t n = bundle_->n(), d = bundle_->d(), M = bundle_->paths();
    std::vector<double> p(M * n), ph(M * n), q(M * n * d);
    bundle_->forward(k0, k1, [&](const NodeView& nv) {
        evaluate_node(nv.k, nv.x, nv.u, p, ph, q);
        visit(nv, AdjointNode{nv.k, p, ph, q});
    });
}

void AdjointSolution::write_csv(std::ostream& os, std::size_t max_paths) const {
    const std::size_t n = bundle_->n(), d = bundle_->d();
    const std::size_t P = max_paths == 0 ? bundle_->paths() : std::min(max_paths, bundle_->paths());
    os << "path_id,step,t";
    for (std::size_t i = 0; i < n; ++i) os << ",p_" << (i + 1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) os << ",q_" << (i + 1) << (j + 1);
    os << '\n';
    sweep(0, bundle_->grid().steps, [&](const NodeView& nv, const AdjointNode& a) {
        for (std::size_t m = 0; m < P; ++m) {
            os << m << ',' << nv.k << ',' << num(nv.t);
            for (std::size_t i = 0; i < n; ++i) os << ',' << num(a.p[m * n + i]);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) os << ',' << num(a.q[m * n * d + i + n * j]);
            os << '\n';
        }
    });
}

AdjointSolution solve_first_adjoint(const ControlModel& model, const PathBundle& bundle,
                                    const AdjointOptions& options) {
    if (options.picard_sweeps < 0) throw InvalidArgument("picard_sweeps must be >= 0");
    const auto& g = bundle.grid();
    const std::size_t K = truncation_index(g, options.truncation);
    AdjointSolution sol(std::make_shared<const ControlModel>(model), bundle, options, K);
    const std::size_t n = bundle.n(), d = bundle.d(), M = bundle.paths();
    const double h = g.step;
    sol.phat_fit_.resize(K);
    sol.q_fit_.resize(K);
    sol.diag_.resize(K);
    std::vector<double> p_next(M * n, 0.0), ph(M * n), resid(M * n * d), p_cur(M * n);
    const Executor ex = bundle.executor();

    bundle.backward(0, K, [&](const NodeView& nv) {
        const std::size_t k = nv.k;
        if (k == K) return;  // p_K = 0
        Regressor reg(options.basis, nv.x, M, n, ex);
        RegressionFit fp = reg.fit(p_next, n);
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            for (std::size_t m = b; m < e; ++m) {
                fp.evaluate(nv.x.subspan(m * n, n), std::span<double>(ph).subspan(m * n, n));
                for (std::size_t j = 0; j < d; ++j)
                    for (std::size_t i = 0; i < n; ++i)
                        resid[m * n * d + i + n * j] = (p_next[m * n + i] - ph[m * n + i]) * nv.dw[m * d + j] / h;
            }
        });
        RegressionFit fq = reg.fit(resid, n * d);
        auto& dg = sol.diag_[k];
        dg.basis_size = reg.size();
        dg.condition = reg.condition();
        dg.r2_p = *std::min_element(fp.r2.begin(), fp.r2.end());
        dg.r2_q = *std::min_element(fq.r2.begin(), fq.r2.end());
        dg.low_r2 = dg.r2_p < 0.9;
        sol.phat_fit_[k] = std::move(fp);
        sol.q_fit_[k] = std::move(fq);
        std::vector<double> qbuf(M * n * d);
        sol.evaluate_node(k, nv.x, nv.u, p_cur, ph, qbuf);
        for (double v : p_cur)
            if (!std::isfinite(v)) throw NonFiniteRegression("adjoint became non-finite at step " + std::to_string(k));
        p_next.swap(p_cur);
    });
    return sol;
}

std::vector<DualityPair> check_dualities(const ControlModel& model, const AdjointSolution& adjoint,
                                         std::span<const RealizedSpike> spikes, double rel_h) {
    const PathBundle& base = adjoint.bundle();
    const std::size_t S = spikes.size(), M = base.paths(), n = base.n(), d = base.d();
    const std::size_t K = adjoint.truncation_node();
    const double h = base.grid().step, r = base.grid().discount;
    // per spike, per path: yp lhs, yp rhs, zp lhs, zp rhs
    std::vector<double> acc(S * M * 4, 0.0);
    std::vector<double> p(M * n), ph(M * n), q(M * n * d);
    const Executor ex = base.executor();

    sweep_variations(model, base, spikes, [&](const NodeView& nv, std::span<const VariationState> vs) {
        const std::size_t k = nv.k;
        if (k >= K) return;
        adjoint.evaluate_node(k, nv.x, nv.u, p, ph, q);
        const double w = h * std::exp(-r * nv.t);
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            std::vector<double> g(n), D2b(n * n * n), D2s(n * d * n * n), sv(n * d), su(n * d), bv(n), bu(n),
                Dsv(d * n * n), Dsu(d * n * n);
            for (std::size_t m = b; m < e; ++m) {
                const auto x = nv.x.subspan(m * n, n);
                const double u = nv.u[m];
                model.Df(x, u, g);
                bool have_second = false, have_first_u = false;
                const double* phm = ph.data() + m * n;
                const double* qm = q.data() + m * n * d;
                for (std::size_t s = 0; s < S; ++s) {
                    const auto& sp = spikes[s];
                    if (sp.empty() || k < sp.begin) continue;
                    const double* y = vs[s].y.data() + m * n;
                    const double* z = vs[s].z.data() + m * n;
                    const bool act = sp.active(k);
                    double* a = acc.data() + (s * M + m) * 4;
                    double ly = 0.0, lz = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        ly += y[i] * g[i];
                        lz += z[i] * g[i];
                    }
                    a[0] += w * ly;
                    a[2] -= w * lz;
                    double ry = 0.0, rz = 0.0;
                    const bool ynz = k > sp.begin;
                    if (ynz && !have_second) {
                        model.D2b(x, u, D2b);
                        model.D2sigma(x, u, D2s);
                        have_second = true;
                    }
                    if (act) {
                        model.sigma(x, sp.v, sv);
                        model.sigma(x, u, su);
                        model.b(x, sp.v, bv);
                        model.b(x, u, bu);
                        model.Dsigma(x, sp.v, Dsv);
                        if (!have_first_u) {
                            model.Dsigma(x, u, Dsu);
                            have_first_u = true;
                        }
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        double drift = act ? bv[i] - bu[i] : 0.0;
                        if (ynz) {
                            const double* Hm = D2b.data() + i * n * n;
                            double qv = 0.0;
                            for (std::size_t aa = 0; aa < n; ++aa)
                                for (std::size_t bb = 0; bb < n; ++bb) qv += y[aa] * Hm[aa + n * bb] * y[bb];
                            drift += 0.5 * qv;
                        }
                        rz += drift * phm[i];
                        for (std::size_t j = 0; j < d; ++j) {
                            double diff = 0.0;
                            if (act) {
                                ry -= qm[i + n * j] * (sv[i + n * j] - su[i + n * j]);
                                const double* Bv = Dsv.data() + j * n * n;
                                const double* Bu = Dsu.data() + j * n * n;
                                for (std::size_t l = 0; l < n; ++l) diff += (Bv[i + n * l] - Bu[i + n * l]) * y[l];
                            }
                            if (ynz) {
                                const double* Hm = D2s.data() + (i + n * j) * n * n;
                                double qv = 0.0;
                                for (std::size_t aa = 0; aa < n; ++aa)
                                    for (std::size_t bb = 0; bb < n; ++bb) qv += y[aa] * Hm[aa + n * bb] * y[bb];
                                diff += 0.5 * qv;
                            }
                            rz += diff * qm[i + n * j];
                        }
                    }
                    a[1] += w * ry;
                    a[3] += w * rz;
                }
            }
        });
    });

    std::vector<DualityPair> out(S);
    for (std::size_t s = 0; s < S; ++s) {
        Stat L[2], R[2], D[2];
        for (std::size_t m = 0; m < M; ++m) {
            const double* a = acc.data() + (s * M + m) * 4;
            for (int t = 0; t < 2; ++t) {
                L[t].add(a[2 * t]);
                R[t].add(a[2 * t + 1]);
                D[t].add(a[2 * t] - a[2 * t + 1]);
            }
        }
        for (int t = 0; t < 2; ++t) {
            IdentityReport& rep = t == 0 ? out[s].yp : out[s].zp;
            rep.name = t == 0 ? "duality_yp" : "duality_zp";
            rep.epsilon = spikes[s].epsilon;
            rep.lhs = mean_of(L[t], M);
            rep.rhs = mean_of(R[t], M);
            rep.diff = rep.lhs - rep.rhs;
            rep.std_err = se_of(D[t], M);
            rep.tolerance = 3.0 * rep.std_err + rel_h * h * std::abs(rep.lhs);
            rep.pass = std::abs(rep.diff) <= rep.tolerance;
        }
    }
    return out;
}

IdentityReport check_duality_yp(const ControlModel& model, const AdjointSolution& adjoint,
                                const VariationBundle& variations, double rel_h) {
    const RealizedSpike s = variations.spike();
    return check_dualities(model, adjoint, std::span<const RealizedSpike>(&s, 1), rel_h).front().yp;
}

IdentityReport check_duality_zp(const ControlModel& model, const AdjointSolution& adjoint,
                                const VariationBundle& variations, double rel_h) {
    const RealizedSpike s = variations.spike();
    return check_dualities(model, adjoint, std::span<const RealizedSpike>(&s, 1), rel_h).front().zp;
}

ContractionReport apriori_contraction_check(const AdjointSolution& a1, const AdjointSolution& a2, double c_half,
                                            double delta) {
    const PathBundle& b = a1.bundle();
    if (&b != &a2.bundle()) throw InvalidArgument("contraction check needs adjoints on the same bundle");
    if (!(delta > 0.0)) throw InvalidArgument("delta must be positive");
    const std::size_t M = b.paths(), n = b.n(), d = b.d(), N = b.grid().steps;
    const double h = b.grid().step, r = b.grid().discount;
    std::vector<double> acc(M * 3, 0.0);
    std::vector<double> p1(M * n), h1(M * n), q1(M * n * d), p2(M * n), h2(M * n), q2(M * n * d);
    b.forward(0, N - 1, [&](const NodeView& nv) {
        a1.evaluate_node(nv.k, nv.x, nv.u, p1, h1, q1);
        a2.evaluate_node(nv.k, nv.x, nv.u, p2, h2, q2);
        const double w = h * std::exp(-r * nv.t);
        b.executor().for_each(M, [&](std::size_t lo, std::size_t hi) {
            std::vector<double> g1(n), g2(n);
            for (std::size_t m = lo; m < hi; ++m) {
                const auto x = nv.x.subspan(m * n, n);
                a1.model().Df(x, nv.u[m], g1);
                a2.model().Df(x, nv.u[m], g2);
                double dp = 0, dq = 0, df = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    dp += (p1[m * n + i] - p2[m * n + i]) * (p1[m * n + i] - p2[m * n + i]);
                    df += (g1[i] - g2[i]) * (g1[i] - g2[i]);
                }
                for (std::size_t i = 0; i < n * d; ++i)
                    dq += (q1[m * n * d + i] - q2[m * n * d + i]) * (q1[m * n * d + i] - q2[m * n * d + i]);
                acc[m * 3] += w * dp;
                acc[m * 3 + 1] += w * dq;
                acc[m * 3 + 2] += w * df;
            }
        });
    });
    ContractionReport rep;
    rep.c_half = c_half;
    rep.delta = delta;
    rep.r = r;
    const double coef = r - 2.0 * c_half - delta;
    Stat P, Q, F, L, R, D;
    for (std::size_t m = 0; m < M; ++m) {
        const double* a = acc.data() + m * 3;
        P.add(a[0]);
        Q.add(a[1]);
        F.add(a[2]);
        const double l = coef * a[0] + 0.5 * a[1], rr = a[2] / delta;
        L.add(l);
        R.add(rr);
        D.add(l - rr);
    }
    rep.p_gap = mean_of(P, M);
    rep.q_gap = mean_of(Q, M);
    rep.forcing = mean_of(F, M);
    rep.lhs = mean_of(L, M);
    rep.rhs = mean_of(R, M);
    rep.lhs_std_err = se_of(L, M);
    rep.rhs_std_err = se_of(R, M);
    rep.holds = rep.lhs <= rep.rhs + 3.0 * se_of(D, M);
    // (A + Q - delta B) delta <= D  with A = (r - 2c) B
    const double cap = r - 2.0 * c_half;
    const double B = rep.p_gap, AQ = cap * rep.p_gap + 0.5 * rep.q_gap, Fv = rep.forcing;
    rep.delta_lo = 0.0;
    rep.delta_hi = cap;
    if (B > 0.0) {
        const double disc = AQ * AQ - 4.0 * B * Fv;
        if (disc >= 0.0) rep.delta_hi = std::min(cap, (AQ - std::sqrt(disc)) / (2.0 * B));
    } else if (AQ > 0.0) {
        rep.delta_hi = std::min(cap, Fv / AQ);
    }
    return rep;
}

ContractionReport apriori_contraction_check(const ControlModel& f1, const ControlModel& f2, const PathBundle& bundle,
                                            const AdjointOptions& options, double c_half, double delta) {
    auto a1 = solve_first_adjoint(f1, bundle, options);
    auto a2 = solve_first_adjoint(f2, bundle, options);
    return apriori_contraction_check(a1, a2, c_half, delta);
}

std::vector<CauchyStep> truncation_cauchy(const ControlModel& model, const PathBundle& bundle,
                                          const AdjointOptions& options, const std::vector<double>& truncations) {
    std::vector<AdjointSolution> sols;
    for (double t : truncations) {
        AdjointOptions o = options;
        o.truncation = t;
        sols.push_back(solve_first_adjoint(model, bundle, o));
    }
    const std::size_t M = bundle.paths(), n = bundle.n(), d = bundle.d(), S = sols.size();
    const double h = bundle.grid().step, r = bundle.grid().discount;
    std::vector<double> acc(S > 0 ? (S - 1) * M : 0, 0.0);
    std::vector<std::vector<double>> p(S, std::vector<double>(M * n)), ph(S, std::vector<double>(M * n)),
        q(S, std::vector<double>(M * n * d));
    bundle.forward(0, bundle.grid().steps - 1, [&](const NodeView& nv) {
        for (std::size_t s = 0; s < S; ++s) sols[s].evaluate_node(nv.k, nv.x, nv.u, p[s], ph[s], q[s]);
        const double w = h * std::exp(-r * nv.t);
        for (std::size_t s = 0; s + 1 < S; ++s)
            for (std::size_t m = 0; m < M; ++m) {
                double dd = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double e = p[s][m * n + i] - p[s + 1][m * n + i];
                    dd += e * e;
                }
                acc[s * M + m] += w * dd;
            }
    });
    std::vector<CauchyStep> out;
    for (std::size_t s = 0; s + 1 < S; ++s) {
        Stat st;
        for (std::size_t m = 0; m < M; ++m) st.add(acc[s * M + m]);
        out.push_back({sols[s].truncation_time(), sols[s + 1].truncation_time(), mean_of(st, M), se_of(st, M)});
    }
    return out;
}

LinearFit regress_p_on_state(const AdjointSolution& adjoint, std::size_t k) {
    const PathBundle& b = adjoint.bundle();
    if (b.n() != 1) throw InvalidArgument("regress_p_on_state needs a scalar state");
    const std::size_t M = b.paths(), d = b.d();
    auto x = b.states_at(k);
    auto u = b.controls_at(k);
    std::vector<double> p(M), ph(M), q(M * d);
    adjoint.evaluate_node(k, x, u, p, ph, q);
    double mx = 0, my = 0;
    for (std::size_t m = 0; m < M; ++m) {
        mx += x[m];
        my += p[m];
    }
    mx /= M;
    my /= M;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t m = 0; m < M; ++m) {
        sxx += (x[m] - mx) * (x[m] - mx);
        sxy += (x[m] - mx) * (p[m] - my);
        syy += (p[m] - my) * (p[m] - my);
    }
    LinearFit f;
    f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    f.r2 = (sxx > 0.0 && syy > 0.0) ? sxy * sxy / (sxx * syy) : 1.0;
    return f;
}

void write_identity_csv(std::ostream& os, const std::vector<IdentityReport>& reports) {
    os << "name,eps,lhs,rhs,diff,std_err,tolerance,verdict\n";
    for (const auto& r : reports)
        os << r.name << ',' << num(r.epsilon) << ',' << num(r.lhs) << ',' << num(r.rhs) << ',' << num(r.diff) << ','
           << num(r.std_err) << ',' << num(r.tolerance) << ',' << r.verdict() << '\n';
}

}  // namespace smpmc
