#include "smpmc/models.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "smpmc/errors.hpp"
#include "smpmc/parallel.hpp"
#include "smpmc/random.hpp"

namespace smpmc {

ControlSet ControlSet::finite(std::vector<double> pts) {
    if (pts.empty()) throw EmptyControlGrid("control set has no points");
    ControlSet s;
    s.points_ = std::move(pts);
    s.interval_ = false;
    s.lo_ = *std::min_element(s.points_.begin(), s.points_.end());
    s.hi_ = *std::max_element(s.points_.begin(), s.points_.end());
    return s;
}

ControlSet ControlSet::interval(double lo, double hi, std::size_t points) {
    if (points == 0) throw EmptyControlGrid("interval grid with zero points");
    if (!(hi >= lo)) throw InvalidArgument("control interval with hi < lo");
    ControlSet s;
    s.points_.resize(points);
    if (points == 1) {
        s.points_[0] = lo;
    } else {
        for (std::size_t i = 0; i < points; ++i)
            s.points_[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
        s.points_.back() = hi;
    }
    s.interval_ = true;
    s.lo_ = lo;
    s.hi_ = hi;
    return s;
}

bool ControlSet::contains(double v, double tol) const {
    if (interval_) return v >= lo_ - tol && v <= hi_ + tol;
    return std::any_of(points_.begin(), points_.end(), [&](double p) { return std::abs(p - v) <= tol; });
}

namespace {

using In = ControlModel::In;
using Out = ControlModel::Out;

// jac[o + m*k] = d g_o / d x_k
void fd_jacobian(const std::function<void(In, Out)>& g, std::size_t m, In x, double scale, Out jac) {
    const std::size_t n = x.size();
    std::vector<double> xp(x.begin(), x.end()), gp(m), gm(m);
    for (std::size_t k = 0; k < n; ++k) {
        const double h = scale * (1.0 + std::abs(x[k]));
        xp[k] = x[k] + h;
        g(xp, gp);
        xp[k] = x[k] - h;
        g(xp, gm);
        xp[k] = x[k];
        for (std::size_t o = 0; o < m; ++o) jac[o + m * k] = (gp[o] - gm[o]) / (2.0 * h);
    }
}

constexpr double kFirstStep = 1e-5;
constexpr double kSecondStep = 1e-4;

}  // namespace

void ControlModel::Db(In x, double u, Out out) const {
    if (drift_jac) return drift_jac(x, u, out);
    fd_jacobian([&](In y, Out o) { drift(y, u, o); }, n(), x, kFirstStep, out);
}

void ControlModel::Dsigma(In x, double u, Out out) const {
    if (diffusion_jac) return diffusion_jac(x, u, out);
    const std::size_t nn = n(), dd = d(), m = nn * dd;
    std::vector<double> jac(m * nn);
    fd_jacobian([&](In y, Out o) { diffusion(y, u, o); }, m, x, kFirstStep, jac);
    for (std::size_t j = 0; j < dd; ++j)
        for (std::size_t i = 0; i < nn; ++i)
            for (std::size_t k = 0; k < nn; ++k) out[j * nn * nn + i + nn * k] = jac[(i + nn * j) + m * k];
}

void ControlModel::Df(In x, double u, Out out) const {
    if (cost_grad) return cost_grad(x, u, out);
    fd_jacobian([&](In y, Out o) { o[0] = cost(y, u); }, 1, x, kFirstStep, out);
}

void ControlModel::D2b(In x, double u, Out out) const {
    if (drift_hess) return drift_hess(x, u, out);
    const std::size_t nn = n(), m = nn * nn;
    std::vector<double> jac(m * nn);
    fd_jacobian([&](In y, Out o) { Db(y, u, o); }, m, x, kSecondStep, jac);
    // jac[(i + n k) + m l] -> out[i n^2 + k + n l]
    for (std::size_t i = 0; i < nn; ++i)
        for (std::size_t k = 0; k < nn; ++k)
            for (std::size_t l = 0; l < nn; ++l) out[i * m + k + nn * l] = jac[(i + nn * k) + m * l];
}

void ControlModel::D2sigma(In x, double u, Out out) const {
    if (diffusion_hess) return diffusion_hess(x, u, out);
    const std::size_t nn = n(), dd = d(), m = dd * nn * nn;
    std::vector<double> jac(m * nn);
    fd_jacobian([&](In y, Out o) { Dsigma(y, u, o); }, m, x, kSecondStep, jac);
    // Dsigma block j entry (i + n k); hess block (i + n j) entry (k + n l)
    for (std::size_t j = 0; j < dd; ++j)
        for (std::size_t i = 0; i < nn; ++i)
            for (std::size_t k = 0; k < nn; ++k)
                for (std::size_t l = 0; l < nn; ++l)
                    out[(i + nn * j) * nn * nn + k + nn * l] = jac[(j * nn * nn + i + nn * k) + m * l];
}

void ControlModel::D2f(In x, double u, Out out) const {
    if (cost_hess) return cost_hess(x, u, out);
    const std::size_t nn = n();
    fd_jacobian([&](In y, Out o) { Df(y, u, o); }, nn, x, kSecondStep, out);
}

bool ControlModel::has_analytic_derivatives() const {
    return drift_jac && diffusion_jac && cost_grad && drift_hess && diffusion_hess && cost_hess;
}

void ControlModel::validate() const {
    if (state_dim < 1 || noise_dim < 1) throw InvalidParams(name + ": dimensions must be positive");
    if (growth_m < 0 || growth_l < 0) throw InvalidParams(name + ": growth exponents must be >= 0");
    if (!drift || !diffusion || !cost) throw InvalidParams(name + ": drift, diffusion and cost are required");
    if (control_set.size() == 0) throw EmptyControlGrid(name + ": empty control set");
}

double derivative_form(const ControlModel& model, std::span<const double> x, double u, double p) {
    const std::size_t n = model.n(), d = model.d();
    std::vector<double> J(n * n), B(d * n * n);
    model.Db(x, u, J);
    model.Dsigma(x, u, B);
    if (n == 1) {
        double s = J[0];
        for (std::size_t j = 0; j < d; ++j) s += p * B[j] * B[j];
        return s;
    }
    Eigen::Map<const Eigen::MatrixXd> Jm(J.data(), n, n);
    Eigen::MatrixXd S = 0.5 * (Jm + Jm.transpose());
    for (std::size_t j = 0; j < d; ++j) {
        Eigen::Map<const Eigen::MatrixXd> Bj(B.data() + j * n * n, n, n);
        S += p * Bj.transpose() * Bj;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

namespace {

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

struct ProbeBest {
    double value = -std::numeric_limits<double>::infinity();
    std::vector<double> x, y;
    double u = 0.0;
    bool diagonal = false;
};

void sample_point(const NoiseSource& rng, const SamplingBox& box, std::size_t n, std::uint64_t s,
                  std::uint64_t which, std::vector<double>& x) {
    for (std::size_t i = 0; i < n; ++i) {
        const double lo = box.lo_at(i), hi = box.hi_at(i);
        x[i] = lo + (hi - lo) * rng.uniform(s, which, i);
    }
}

}  // namespace

MonotonicityReport probe_joint_monotonicity(const ControlModel& model, double p, const SamplingBox& box,
                                            std::uint64_t seed, std::size_t workers) {
    if (!(p > 0.0)) throw InvalidArgument("probe requires p > 0");
    const std::size_t n = model.n(), d = model.d();
    if (box.samples == 0 || box.lo.empty() || box.hi.empty()) throw InvalidArgument("empty sampling box");
    for (std::size_t i = 0; i < n; ++i)
        if (!(box.hi_at(i) >= box.lo_at(i))) throw InvalidArgument("sampling box with hi < lo");

    const auto& U = model.control_set.points();
    const NoiseSource rng(seed, 0x70726f6265ULL);
    Executor ex(workers, 2048);

    // random pairs
    const std::size_t S = box.samples;
    std::vector<ProbeBest> pair_best(ex.chunks(S));
    ex.for_chunks(S, [&](std::size_t c, std::size_t b, std::size_t e) {
        std::vector<double> x(n), y(n), bx(n), by(n), sx(n * d), sy(n * d);
        ProbeBest best;
        for (std::size_t s = b; s < e; ++s) {
            sample_point(rng, box, n, s, 0, x);
            sample_point(rng, box, n, s, 1, y);
            const std::size_t ui = std::min<std::size_t>(
                U.size() - 1, static_cast<std::size_t>(rng.uniform(s, 2, 0) * static_cast<double>(U.size())));
            const double u = U[ui];
            model.b(x, u, bx);
            model.b(y, u, by);
            model.sigma(x, u, sx);
            model.sigma(y, u, sy);
            if (!all_finite(bx) || !all_finite(by) || !all_finite(sx) || !all_finite(sy))
                throw NonFiniteCoefficient(model.name + ": non-finite coefficient inside the probe box");
            double dist2 = 0.0, inner = 0.0, sig = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double dx = x[i] - y[i];
                dist2 += dx * dx;
                inner += (bx[i] - by[i]) * dx;
            }
            for (std::size_t k = 0; k < n * d; ++k) sig += (sx[k] - sy[k]) * (sx[k] - sy[k]);
            if (dist2 < 1e-24) continue;
            const double q = (inner + p * sig) / dist2;
            if (q > best.value) {
                best.value = q;
                best.x = x;
                best.y = y;
                best.u = u;
            }
        }
        pair_best[c] = std::move(best);
    });

    // diagonal (y -> x limit): deterministic grid in 1-d, random points otherwise
    std::size_t diag_count = 0;
    std::vector<std::vector<double>> diag_points;
    if (n == 1) {
        diag_count = S;
        diag_points.reserve(S);
        for (std::size_t s = 0; s < S; ++s) {
            const double lo = box.lo_at(0), hi = box.hi_at(0);
            diag_points.push_back({S == 1 ? lo : lo + (hi - lo) * static_cast<double>(s) / static_cast<double>(S - 1)});
        }
    } else {
        diag_count = S;
        diag_points.assign(S, std::vector<double>(n));
        for (std::size_t s = 0; s < S; ++s) sample_point(rng, box, n, s, 3, diag_points[s]);
    }
    std::vector<ProbeBest> diag_best(ex.chunks(diag_count));
    ex.for_chunks(diag_count, [&](std::size_t c, std::size_t b, std::size_t e) {
        ProbeBest best;
        for (std::size_t s = b; s < e; ++s) {
            for (double u : U) {
                const double v = derivative_form(model, diag_points[s], u, p);
                if (!std::isfinite(v))
                    throw NonFiniteCoefficient(model.name + ": non-finite derivative inside the probe box");
                if (v > best.value) {
                    best.value = v;
                    best.x = diag_points[s];
                    best.y = diag_points[s];
                    best.u = u;
                    best.diagonal = true;
                }
            }
        }
        diag_best[c] = std::move(best);
    });

    auto merge = [](const std::vector<ProbeBest>& parts) {
        ProbeBest out;
        for (const auto& b : parts)
            if (b.value > out.value) out = b;
        return out;
    };
    const ProbeBest pb = merge(pair_best), db = merge(diag_best);

    MonotonicityReport rep;
    rep.model = model.name;
    rep.p = p;
    rep.sample_count = S + diag_count;
    rep.pair_max = pb.value;
    rep.derivative_max = db.value;
    rep.box = box;
    const ProbeBest& w = (db.value >= pb.value) ? db : pb;
    rep.c_p_estimate = w.value;
    rep.worst_x = w.x;
    rep.worst_y = w.y;
    rep.worst_u = w.u;
    rep.diagonal_binding = w.diagonal;
    if (!std::isfinite(rep.c_p_estimate))
        throw NonFiniteCoefficient(model.name + ": monotonicity quotient is not finite");
    return rep;
}

std::vector<double> discount_indices(int m, int l) {
    const double M = m, L = l, q = 2.0 * m + 1.0;
    std::vector<double> raw{0.5, 3, 5, 7, L - 1, 3 * L - 1, 2 * M - 1, 3 * M - 1, 4 * M - 1,
                            2 * q - 1, 3 * q - 1, 4 * q - 1};
    std::vector<double> out;
    for (double p : raw) {
        if (p <= 0.0) continue;  // dominated by c_{1/2}: c_p is nondecreasing in p
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    return out;
}

DiscountRecommendation recommend_discount(const ControlModel& model, std::vector<MonotonicityReport> reports,
                                          const SamplingBox& box, std::uint64_t seed) {
    DiscountRecommendation rec;
    rec.indices = discount_indices(model.growth_m, model.growth_l);
    double mx = 0.0;
    bool any_positive = false;
    for (double p : rec.indices) {
        auto it = std::find_if(reports.begin(), reports.end(),
                               [&](const MonotonicityReport& r) { return std::abs(r.p - p) < 1e-12; });
        MonotonicityReport rep = (it != reports.end()) ? *it : probe_joint_monotonicity(model, p, box, seed);
        if (rep.c_p_estimate > 0.0) any_positive = true;
        if (rep.c_p_estimate > mx) {
            mx = rep.c_p_estimate;
            rec.binding_p = p;
        }
        rec.reports.push_back(std::move(rep));
    }
    rec.max_c = mx;
    rec.all_nonpositive = !any_positive;
    const double raw = kDiscountMargin * 64.0 * (2.0 * model.growth_m + 1.0) * mx;
    if (raw < kDiscountFloor) {
        rec.r = kDiscountFloor;
        rec.floor_applied = true;
    } else {
        rec.r = raw;
    }
    return rec;
}

double origin_bound(const ControlModel& model) {
    const std::size_t n = model.n(), d = model.d();
    std::vector<double> zero(n, 0.0), b(n), s(n * d);
    double best = 0.0;
    for (double u : model.control_set.points()) {
        model.b(zero, u, b);
        model.sigma(zero, u, s);
        double nb = 0.0, ns = 0.0;
        for (double v : b) nb += v * v;
        for (double v : s) ns += v * v;
        best = std::max(best, std::sqrt(nb) + std::sqrt(ns));
    }
    return best;
}

double DerivativeCheck::max() const {
    return std::max({drift_jac, diffusion_jac, cost_grad, drift_hess, diffusion_hess, cost_hess});
}

DerivativeCheck check_derivatives(const ControlModel& model, const SamplingBox& box, std::size_t points,
                                  std::uint64_t seed) {
    const std::size_t n = model.n(), d = model.d();
    const NoiseSource rng(seed, 0x64657269ULL);
    const auto& U = model.control_set.points();
    DerivativeCheck out;
    auto cmp = [](std::span<const double> a, std::span<const double> f) {
        double e = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - f[i]) / (1.0 + std::abs(a[i])));
        return e;
    };
    // a copy stripped of analytic maps gives the finite-difference route
    ControlModel fd = model;
    fd.drift_jac = fd.diffusion_jac = fd.cost_grad = nullptr;
    fd.drift_hess = fd.diffusion_hess = fd.cost_hess = nullptr;
    ControlModel fd2 = model;  // second derivatives by differencing the analytic first derivatives
    fd2.drift_hess = fd2.diffusion_hess = fd2.cost_hess = nullptr;

    std::vector<double> x(n);
    std::vector<double> a1(n * n), f1(n * n), a2(d * n * n), f2(d * n * n), a3(n), f3(n);
    std::vector<double> h1(n * n * n), g1(n * n * n), h2(n * d * n * n), g2(n * d * n * n), h3(n * n), g3(n * n);
    for (std::size_t s = 0; s < points; ++s) {
        sample_point(rng, box, n, s, 0, x);
        const double u = U[std::min<std::size_t>(U.size() - 1,
                                                 static_cast<std::size_t>(rng.uniform(s, 1, 0) * U.size()))];
        if (model.drift_jac) {
            model.Db(x, u, a1);
            fd.Db(x, u, f1);
            out.drift_jac = std::max(out.drift_jac, cmp(a1, f1));
        }
        if (model.diffusion_jac) {
            model.Dsigma(x, u, a2);
            fd.Dsigma(x, u, f2);
            out.diffusion_jac = std::max(out.diffusion_jac, cmp(a2, f2));
        }
        if (model.cost_grad) {
            model.Df(x, u, a3);
            fd.Df(x, u, f3);
            out.cost_grad = std::max(out.cost_grad, cmp(a3, f3));
        }
        if (model.drift_hess) {
            model.D2b(x, u, h1);
            fd2.D2b(x, u, g1);
            out.drift_hess = std::max(out.drift_hess, cmp(h1, g1));
        }
        if (model.diffusion_hess) {
            model.D2sigma(x, u, h2);
            fd2.D2sigma(x, u, g2);
            out.diffusion_hess = std::max(out.diffusion_hess, cmp(h2, g2));
        }
        if (model.cost_hess) {
            model.D2f(x, u, h3);
            fd2.D2f(x, u, g3);
            out.cost_hess = std::max(out.cost_hess, cmp(h3, g3));
        }
    }
    return out;
}

GrowthReport probe_growth(const ControlModel& model, const SamplingBox& box, std::uint64_t seed) {
    const std::size_t n = model.n(), d = model.d();
    const NoiseSource rng(seed, 0x67726f77ULL);
    const auto& U = model.control_set.points();
    std::vector<double> x(n), b(n), s(n * d);
    GrowthReport g;
    const double eb = 2.0 * model.growth_m + 1.0, es = model.growth_m;
    for (std::size_t k = 0; k < box.samples; ++k) {
        sample_point(rng, box, n, k, 0, x);
        double nx = 0.0;
        for (double v : x) nx += v * v;
        nx = std::sqrt(nx);
        for (double u : U) {
            model.b(x, u, b);
            model.sigma(x, u, s);
            double nb = 0.0, ns = 0.0;
            for (double v : b) nb += v * v;
            for (double v : s) ns += v * v;
            g.drift_constant = std::max(g.drift_constant, std::sqrt(nb) / (1.0 + std::pow(nx, eb)));
            g.diffusion_constant = std::max(g.diffusion_constant, std::sqrt(ns) / (1.0 + std::pow(nx, es)));
        }
    }
    return g;
}

ControlModel with_cost(const ControlModel& model, double factor, double bump, double center) {
    ControlModel m = model;
    const std::size_t n = model.n();
    const ControlModel base = model;
    m.cost = [base, factor, bump, center](In x, double u) {
        double s = 0.0;
        for (double v : x) s += (v - center) * (v - center);
        return factor * base.f(x, u) + bump * s;
    };
    m.cost_grad = [base, factor, bump, center, n](In x, double u, Out out) {
        base.Df(x, u, out);
        for (std::size_t i = 0; i < n; ++i) out[i] = factor * out[i] + 2.0 * bump * (x[i] - center);
    };
    m.cost_hess = [base, factor, bump, n](In x, double u, Out out) {
        base.D2f(x, u, out);
        for (std::size_t i = 0; i < n * n; ++i) out[i] *= factor;
        for (std::size_t i = 0; i < n; ++i) out[i + n * i] += 2.0 * bump;
    };
    return m;
}

}  // namespace smpmc
