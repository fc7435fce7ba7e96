#include "smpmc/variation.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "smpmc/csv.hpp"
#include "smpmc/errors.hpp"

namespace smpmc {

RealizedSpike realize_spike(const TimeGrid& grid, const SpikeSpec& spike) {
    const double T = grid.horizon, h = grid.step;
    if (!(spike.epsilon > 0.0) || !(spike.t0 >= 0.0) || spike.t0 + spike.epsilon > T * (1.0 + 1e-12) + 1e-12)
        throw SpikeOutsideHorizon("spike [" + num(spike.t0) + ", " + num(spike.t0 + spike.epsilon) +
                                  "] is not inside [0, " + num(T) + "]");
    RealizedSpike r;
    r.requested = spike;
    r.begin = static_cast<std::size_t>(std::llround(spike.t0 / h));
    r.end = static_cast<std::size_t>(std::llround((spike.t0 + spike.epsilon) / h));
    r.end = std::min(r.end, grid.steps);
    r.begin = std::min(r.begin, r.end);
    r.t0 = static_cast<double>(r.begin) * h;
    r.epsilon = static_cast<double>(r.end - r.begin) * h;
    r.v = spike.v;
    return r;
}

ControlLaw make_spike(const ControlLaw& control, const SpikeSpec& spike, const TimeGrid& grid) {
    const auto r = realize_spike(grid, spike);
    if (r.empty()) return control;
    return control.with_spike(r.begin, r.end, r.v);
}

namespace {

// Per-chunk scratch for derivative blocks.
struct Scratch {
    std::vector<double> Db, Ds, D2b, D2s, Dsv, sv, su, bv, bu, y1, z1, tmp;
    Scratch(std::size_t n, std::size_t d)
        : Db(n * n), Ds(d * n * n), D2b(n * n * n), D2s(n * d * n * n), Dsv(d * n * n), sv(n * d), su(n * d),
          bv(n), bu(n), y1(n), z1(n), tmp(n) {}
};

// out_i = y' M_i y for n blocks M_i (n x n, column major)
inline double quad(const double* M, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        double c = 0.0;
        for (std::size_t b = 0; b < n; ++b) c += M[a + n * b] * y[b];
        s += y[a] * c;
    }
    return s;
}

}  // namespace

void sweep_variations(const ControlModel& model, const PathBundle& base, std::span<const RealizedSpike> spikes,
                      const VariationVisitor& visit) {
    const std::size_t M = base.paths(), n = base.n(), d = base.d(), N = base.grid().steps, S = spikes.size();
    const double h = base.grid().step;
    std::vector<std::vector<double>> xe(S, std::vector<double>(M * n)), ue(S, std::vector<double>(M)),
        y(S, std::vector<double>(M * n, 0.0)), z(S, std::vector<double>(M * n, 0.0));
    std::vector<VariationState> states(S);
    const Executor ex = base.executor();

    base.forward(0, N, [&](const NodeView& nv) {
        const std::size_t k = nv.k;
        for (std::size_t s = 0; s < S; ++s) {
            const auto& sp = spikes[s];
            if (k <= sp.begin) {
                std::copy(nv.x.begin(), nv.x.end(), xe[s].begin());
                std::fill(y[s].begin(), y[s].end(), 0.0);
                std::fill(z[s].begin(), z[s].end(), 0.0);
            }
            for (std::size_t m = 0; m < M; ++m) ue[s][m] = sp.active(k) ? sp.v : nv.u[m];
            states[s] = VariationState{&sp, xe[s], ue[s], y[s], z[s]};
        }
        visit(nv, states);
        if (k == N) return;

        bool any = false;
        for (const auto& sp : spikes)
            if (k >= sp.begin && !sp.empty()) any = true;
        if (!any) return;

        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            Scratch w(n, d);
            for (std::size_t m = b; m < e; ++m) {
                const auto x = nv.x.subspan(m * n, n);
                const double u = nv.u[m];
                const auto dw = nv.dw.subspan(m * d, d);
                bool have_first = false, have_second = false;
                for (std::size_t s = 0; s < S; ++s) {
                    const auto& sp = spikes[s];
                    if (sp.empty() || k < sp.begin) continue;
                    double* yy = y[s].data() + m * n;
                    double* zz = z[s].data() + m * n;
                    const bool act = sp.active(k);
                    if (!have_first) {
                        model.Db(x, u, w.Db);
                        model.Dsigma(x, u, w.Ds);
                        have_first = true;
                    }
                    const bool y_nonzero = k > sp.begin;
                    if (y_nonzero && !have_second) {
                        model.D2b(x, u, w.D2b);
                        model.D2sigma(x, u, w.D2s);
                        have_second = true;
                    }
                    if (act) {
                        model.sigma(x, sp.v, w.sv);
                        model.sigma(x, u, w.su);
                        model.b(x, sp.v, w.bv);
                        model.b(x, u, w.bu);
                        model.Dsigma(x, sp.v, w.Dsv);
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        double dy = 0.0, dz = 0.0;
                        for (std::size_t a = 0; a < n; ++a) {
                            dy += w.Db[i + n * a] * yy[a];
                            dz += w.Db[i + n * a] * zz[a];
                        }
                        double ny = yy[i] + h * dy;
                        double nz = zz[i] + h * dz;
                        if (act) nz += h * (w.bv[i] - w.bu[i]);
                        if (y_nonzero) nz += 0.5 * h * quad(w.D2b.data() + i * n * n, yy, n);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double* B = w.Ds.data() + j * n * n;
                            double gy = 0.0, gz = 0.0;
                            for (std::size_t a = 0; a < n; ++a) {
                                gy += B[i + n * a] * yy[a];
                                gz += B[i + n * a] * zz[a];
                            }
                            if (act) {
                                gy += w.sv[i + n * j] - w.su[i + n * j];
                                const double* Bv = w.Dsv.data() + j * n * n;
                                for (std::size_t a = 0; a < n; ++a) gz += (Bv[i + n * a] - B[i + n * a]) * yy[a];
                            }
                            if (y_nonzero) gz += 0.5 * quad(w.D2s.data() + (i + n * j) * n * n, yy, n);
                            ny += gy * dw[j];
                            nz += gz * dw[j];
                        }
                        w.y1[i] = ny;
                        w.z1[i] = nz;
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        if (!std::isfinite(w.y1[i]) || !std::isfinite(w.z1[i]))
                            throw NonFiniteState("variation became non-finite at path " + std::to_string(m) +
                                                 ", step " + std::to_string(k));
                        yy[i] = w.y1[i];
                        zz[i] = w.z1[i];
                    }
                    double* xx = xe[s].data() + m * n;
                    std::copy(xx, xx + n, w.tmp.begin());
                    split_step(model, w.tmp, ue[s][m], h, dw, {xx, n});
                }
            }
        });
    });
}

VariationBundle::VariationBundle(std::shared_ptr<const ControlModel> model, const PathBundle& base,
                                 RealizedSpike spike, bool materialize)
    : model_(std::move(model)), base_(&base), spike_(spike) {
    if (!materialize) return;
    const std::size_t M = base.paths(), n = base.n(), nodes = base.grid().nodes();
    VariationFields f;
    for (PathField* p : {&f.xe, &f.y, &f.z}) {
        p->paths = M;
        p->k0 = 0;
        p->nodes = nodes;
        p->dim = n;
        p->data.assign(M * nodes * n, 0.0);
    }
    sweep_variations(*model_, base, std::span<const RealizedSpike>(&spike_, 1),
                     [&](const NodeView& nv, std::span<const VariationState> vs) {
                         const auto& s = vs[0];
                         for (std::size_t m = 0; m < M; ++m)
                             for (std::size_t i = 0; i < n; ++i) {
                                 f.xe.at(m, nv.k, i) = s.xe[m * n + i];
                                 f.y.at(m, nv.k, i) = s.y[m * n + i];
                                 f.z.at(m, nv.k, i) = s.z[m * n + i];
                             }
                     });
    fields_ = std::move(f);
}

const VariationFields& VariationBundle::fields() const {
    if (!fields_) throw InvalidArgument("variation bundle was not materialized");
    return *fields_;
}

void VariationBundle::sweep(const VariationVisitor& visit) const {
    if (!fields_) {
        sweep_variations(*model_, *base_, std::span<const RealizedSpike>(&spike_, 1), visit);
        return;
    }
    const std::size_t M = base_->paths(), n = base_->n();
    std::vector<double> xe(M * n), ue(M), y(M * n), z(M * n);
    base_->forward(0, base_->grid().steps, [&](const NodeView& nv) {
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t i = 0; i < n; ++i) {
                xe[m * n + i] = fields_->xe.at(m, nv.k, i);
                y[m * n + i] = fields_->y.at(m, nv.k, i);
                z[m * n + i] = fields_->z.at(m, nv.k, i);
            }
            ue[m] = spike_.active(nv.k) ? spike_.v : nv.u[m];
        }
        const VariationState s{&spike_, xe, ue, y, z};
        visit(nv, std::span<const VariationState>(&s, 1));
    });
}

VariationBundle simulate_variations(const ControlModel& model, const PathBundle& base, const SpikeSpec& spike) {
    if (!model.control_set.contains(spike.v))
        throw InvalidArgument("spike value " + num(spike.v) + " is outside the control set");
    const auto r = realize_spike(base.grid(), spike);
    const std::size_t bytes = 3 * base.paths() * base.grid().nodes() * base.n() * sizeof(double);
    return VariationBundle(std::make_shared<const ControlModel>(model), base, r,
                           bytes <= base.options().memory_budget);
}

const SlopeSummary& OrderReport::slope(const std::string& quantity) const {
    for (const auto& s : slopes)
        if (s.quantity == quantity) return s;
    throw InvalidArgument("no slope for quantity '" + quantity + "'");
}

SlopeSummary loglog_slope(const std::vector<double>& eps, const std::vector<double>& values) {
    SlopeSummary s;
    const std::size_t n = eps.size();
    bool all_zero = true;
    for (double v : values)
        if (v > 0.0) all_zero = false;
    if (all_zero || n < 2) {
        s.degenerate = true;
        s.slope = s.ci_low = s.ci_high = s.std_error = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(values[i] > 0.0)) continue;
        lx.push_back(std::log(eps[i]));
        ly.push_back(std::log(values[i]));
    }
    const std::size_t m = lx.size();
    if (m < 2) {
        s.degenerate = true;
        s.slope = s.ci_low = s.ci_high = s.std_error = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= m;
    my /= m;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    s.slope = sxy / sxx;
    if (m > 2) {
        double ssr = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double r = ly[i] - my - s.slope * (lx[i] - mx);
            ssr += r * r;
        }
        s.std_error = std::sqrt(ssr / static_cast<double>(m - 2) / sxx);
        boost::math::students_t dist(static_cast<double>(m - 2));
        const double tq = boost::math::quantile(dist, 0.975);
        s.ci_low = s.slope - tq * s.std_error;
        s.ci_high = s.slope + tq * s.std_error;
    } else {
        s.std_error = std::numeric_limits<double>::infinity();
        s.ci_low = -std::numeric_limits<double>::infinity();
        s.ci_high = std::numeric_limits<double>::infinity();
    }
    return s;
}

OrderReport estimate_expansion_orders(const ControlModel& model, const PathBundle& base, SpikeSpec templ,
                                      const std::vector<double>& eps_list, int k, std::optional<double> rho) {
    if (eps_list.size() < 3) throw InvalidArgument("the epsilon ladder needs at least three entries");
    if (k < 1) throw InvalidArgument("moment order k must be >= 1");
    if (base.paths() < 2) throw InsufficientPaths("need at least two paths for standard errors");
    OrderReport rep;
    rep.k = k;
    rep.rho = rho.value_or(base.grid().discount);
    std::vector<RealizedSpike> spikes;
    for (double e : eps_list) {
        SpikeSpec s = templ;
        s.epsilon = e;
        spikes.push_back(realize_spike(base.grid(), s));
        if (spikes.back().empty())
            throw InvalidArgument("epsilon " + num(e) + " rounds to zero grid steps");
        rep.eps_requested.push_back(e);
        rep.eps_realized.push_back(spikes.back().epsilon);
    }
    const std::size_t S = spikes.size(), Q = 5, n = base.n(), M = base.paths();
    const double Md = static_cast<double>(M);
    std::vector<double> best(S * Q, -1.0), best_se(S * Q, 0.0);
    std::vector<std::size_t> best_k(S * Q, 0);
    const Executor ex = base.executor();

    sweep_variations(model, base, spikes, [&](const NodeView& nv, std::span<const VariationState> vs) {
        const std::size_t nc = ex.chunks(M);
        std::vector<std::vector<double>> parts(nc);
        ex.for_chunks(M, [&](std::size_t c, std::size_t b, std::size_t e) {
            std::vector<double> acc(S * Q * 2, 0.0);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t m = b; m < e; ++m) {
                    double q2[5] = {0, 0, 0, 0, 0};
                    for (std::size_t i = 0; i < n; ++i) {
                        const double xi = vs[s].xe[m * n + i] - nv.x[m * n + i];
                        const double y = vs[s].y[m * n + i], z = vs[s].z[m * n + i];
                        const double eta = xi - y, zeta = eta - z;
                        q2[0] += xi * xi;
                        q2[1] += y * y;
                        q2[2] += z * z;
                        q2[3] += eta * eta;
                        q2[4] += zeta * zeta;
                    }
                    for (std::size_t q = 0; q < Q; ++q) {
                        const double v = k == 1 ? q2[q] : std::pow(q2[q], k);
                        acc[(s * Q + q) * 2] += v;
                        acc[(s * Q + q) * 2 + 1] += v * v;
                    }
                }
            parts[c] = std::move(acc);
        });
        std::vector<double> tot(S * Q * 2, 0.0);
        for (const auto& p : parts)
            for (std::size_t i = 0; i < tot.size(); ++i) tot[i] += p[i];
        const double w = std::exp(-rep.rho * k * nv.t);
        for (std::size_t i = 0; i < S * Q; ++i) {
            const double mean = tot[2 * i] / Md;
            const double var = std::max(0.0, tot[2 * i + 1] / Md - mean * mean) * Md / (Md - 1.0);
            const double val = w * mean;
            if (val > best[i]) {
                best[i] = val;
                best_se[i] = w * std::sqrt(var / Md);
                best_k[i] = nv.k;
            }
        }
    });

    const auto& names = variation_quantities();
    for (std::size_t q = 0; q < Q; ++q) {
        std::vector<double> vals;
        for (std::size_t s = 0; s < S; ++s) {
            const std::size_t i = s * Q + q;
            rep.rows.push_back({names[q], k, rep.eps_realized[s], best[i], best_se[i], best_k[i]});
            vals.push_back(best[i]);
            if (best[i] > 0.0 && best_se[i] >= best[i])
                throw InsufficientPaths("standard error exceeds the signal for " + names[q] + " at eps " +
                                        num(rep.eps_realized[s]));
        }
        SlopeSummary sl = loglog_slope(rep.eps_realized, vals);
        sl.quantity = names[q];
        sl.expected = (q <= 1) ? k : 2.0 * k;
        sl.strict = (q == 4);
        rep.slopes.push_back(sl);
    }
    return rep;
}

OrderReport estimate_expansion_orders(const ControlModel& model, const ControlLaw& control, const TimeGrid& grid,
                                      SpikeSpec templ, const std::vector<double>& eps_list, int k, std::size_t M,
                                      std::uint64_t seed, std::vector<double> x0, const BundleOptions& options) {
    auto base = simulate_state(model, control, grid, M, seed, std::move(x0), options);
    return estimate_expansion_orders(model, base, templ, eps_list, k);
}

std::vector<CostExpansion> expand_cost(const ControlModel& model, const PathBundle& base,
                                       std::span<const RealizedSpike> spikes) {
    const std::size_t S = spikes.size(), M = base.paths(), n = base.n(), N = base.grid().steps;
    const double h = base.grid().step, r = base.grid().discount;
    // per spike, per path: linear, quadratic, direct
    std::vector<double> acc(S * M * 3, 0.0);
    const Executor ex = base.executor();
    sweep_variations(model, base, spikes, [&](const NodeView& nv, std::span<const VariationState> vs) {
        if (nv.k == N) return;
        const double w = h * std::exp(-r * nv.t);
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            std::vector<double> g(n), H(n * n);
            for (std::size_t m = b; m < e; ++m) {
                const auto x = nv.x.subspan(m * n, n);
                const double u = nv.u[m];
                bool have = false;
                const double fu = model.f(x, u);
                for (std::size_t s = 0; s < S; ++s) {
                    const auto& sp = spikes[s];
                    double* a = acc.data() + (s * M + m) * 3;
                    a[2] += w * (model.f(vs[s].xe.subspan(m * n, n), vs[s].ue[m]) - fu);
                    if (sp.empty() || nv.k < sp.begin) continue;
                    if (!have) {
                        model.Df(x, u, g);
                        model.D2f(x, u, H);
                        have = true;
                    }
                    const double* y = vs[s].y.data() + m * n;
                    const double* z = vs[s].z.data() + m * n;
                    double lin = 0.0;
                    for (std::size_t i = 0; i < n; ++i) lin += g[i] * (y[i] + z[i]);
                    double qd = 0.5 * quad(H.data(), y, n);
                    if (sp.active(nv.k)) qd += model.f(x, sp.v) - fu;
                    a[0] += w * lin;
                    a[1] += w * qd;
                }
            }
        });
    });
    std::vector<CostExpansion> out(S);
    const double Md = static_cast<double>(M);
    for (std::size_t s = 0; s < S; ++s) {
        double sl = 0, sq = 0, sd = 0, sdd = 0, sr = 0, srr = 0;
        for (std::size_t m = 0; m < M; ++m) {
            const double* a = acc.data() + (s * M + m) * 3;
            sl += a[0];
            sq += a[1];
            sd += a[2];
            sdd += a[2] * a[2];
            const double res = a[2] - a[0] - a[1];
            sr += res;
            srr += res * res;
        }
        auto se = [&](double s1, double s2) {
            if (M < 2) return 0.0;
            const double mu = s1 / Md;
            return std::sqrt(std::max(0.0, (s2 / Md - mu * mu) * Md / (Md - 1.0)) / Md);
        };
        auto& c = out[s];
        c.epsilon = spikes[s].epsilon;
        c.linear_term = sl / Md;
        c.quadratic_term = sq / Md;
        c.expansion = c.linear_term + c.quadratic_term;
        c.direct = sd / Md;
        c.direct_std_error = se(sd, sdd);
        c.residual = sr / Md;
        c.residual_std_error = se(sr, srr);
    }
    return out;
}

CostExpansion expand_cost(const ControlModel& model, const VariationBundle& variations) {
    const RealizedSpike s = variations.spike();
    return expand_cost(model, variations.base(), std::span<const RealizedSpike>(&s, 1)).front();
}

void write_order_csv(std::ostream& os, const OrderReport& rep) {
    os << "kind,quantity,k,eps,weighted_sup,std_err,slope,ci_low,ci_high,rho\n";
    for (const auto& r : rep.rows)
        os << "point," << r.quantity << ',' << r.k << ',' << num(r.eps) << ',' << num(r.weighted_sup) << ','
           << num(r.std_err) << ",,,," << num(rep.rho) << '\n';
    for (const auto& s : rep.slopes)
        os << "summary," << s.quantity << ',' << rep.k << ",,,," << num(s.slope) << ',' << num(s.ci_low) << ','
           << num(s.ci_high) << ',' << num(rep.rho) << '\n';
}

}  // namespace smpmc
