#include "smpmc/sde.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>
#include <sstream>

#include "smpmc/csv.hpp"
#include "smpmc/errors.hpp"

namespace smpmc {

namespace {

constexpr std::size_t kMaxDim = 8;
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;
using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;

std::string where(double x, double u, double h) {
    std::ostringstream os;
    os.precision(17);
    os << "x=" << x << " u=" << u << " h=" << h;
    return os.str();
}

double solve_scalar(const ControlModel& model, double x, double u, double h, const NewtonSettings& ns, int& iters) {
    const double tol = ns.tolerance * (1.0 + std::abs(x));
    auto g = [&](double y) {
        double b;
        model.b({&y, 1}, u, {&b, 1});
        return y - h * b - x;
    };
    double y = x, gy = g(y);
    iters = 0;
    for (; iters < ns.max_iterations; ++iters) {
        if (std::abs(gy) <= tol) return y;
        double J;
        model.Db({&y, 1}, u, {&J, 1});
        const double dg = 1.0 - h * J;
        if (!std::isfinite(dg) || dg == 0.0) break;
        const double step = gy / dg;
        double lam = 1.0;
        bool improved = false;
        for (int s = 0; s < 40; ++s, lam *= 0.5) {
            const double yn = y - lam * step;
            const double gn = g(yn);
            if (std::isfinite(gn) && std::abs(gn) < std::abs(gy)) {
                y = yn;
                gy = gn;
                improved = true;
                break;
            }
        }
        if (!improved) break;
    }
    if (std::abs(gy) <= tol) return y;

    // bisection on the monotone map
    double w = 1.0 + std::abs(x), lo = x - w, hi = x + w;
    bool bracketed = false;
    for (int i = 0; i < 200; ++i) {
        const double glo = g(lo), ghi = g(hi);
        if (std::isfinite(glo) && std::isfinite(ghi) && glo <= 0.0 && ghi >= 0.0) {
            bracketed = true;
            break;
        }
        w *= 2.0;
        lo = x - w;
        hi = x + w;
    }
    if (!bracketed) throw NewtonDivergence("implicit drift solve failed to bracket a root (" + where(x, u, h) + ")");
    for (int i = 0; i < 400; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double gm = g(mid);
        if (std::abs(gm) <= tol) return mid;
        if (gm < 0.0) lo = mid;
        else hi = mid;
        if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(mid))) return mid;
    }
    throw NewtonDivergence("implicit drift solve did not converge (" + where(x, u, h) + ")");
}

void solve_vector(const ControlModel& model, std::span<const double> x, double u, double h,
                  const NewtonSettings& ns, std::span<double> y_out, int& iters) {
    const std::size_t n = model.n();
    if (n > kMaxDim) throw InvalidArgument("state dimension above the supported maximum");
    double xn = 0.0;
    for (double v : x) xn += v * v;
    const double tol = ns.tolerance * (1.0 + std::sqrt(xn));
    SmallVec y(n), b(n), gy(n), yn(n), gn(n), step(n);
    SmallMat J(n, n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i];
    auto g = [&](const SmallVec& yy, SmallVec& out) {
        model.b({yy.data(), n}, u, {b.data(), n});
        for (std::size_t i = 0; i < n; ++i) out[i] = yy[i] - h * b[i] - x[i];
    };
    g(y, gy);
    iters = 0;
    for (; iters < ns.max_iterations; ++iters) {
        if (gy.norm() <= tol) break;
        model.Db({y.data(), n}, u, {J.data(), n * n});
        SmallMat G = SmallMat::Identity(n, n) - h * J;
        step = G.partialPivLu().solve(gy);
        if (!step.allFinite()) break;
        double lam = 1.0;
        bool improved = false;
        for (int s = 0; s < 40; ++s, lam *= 0.5) {
            yn = y - lam * step;
            g(yn, gn);
            if (gn.allFinite() && gn.norm() < gy.norm()) {
                y = yn;
                gy = gn;
                improved = true;
                break;
            }
        }
        if (!improved) break;
    }
    if (!(gy.norm() <= tol))
        throw NewtonDivergence("implicit drift solve did not converge in " + std::to_string(iters) +
                               " iterations (" + where(x[0], u, h) + ")");
    for (std::size_t i = 0; i < n; ++i) y_out[i] = y[i];
}

}  // namespace

int split_step(const ControlModel& model, std::span<const double> x, double u, double h,
               std::span<const double> dw, std::span<double> out, const NewtonSettings& ns) {
    const std::size_t n = model.n(), d = model.d();
    std::array<double, kMaxDim> y{};
    std::array<double, kMaxDim * kMaxDim> s{};
    int iters = 0;
    if (n == 1) {
        y[0] = solve_scalar(model, x[0], u, h, ns, iters);
    } else {
        solve_vector(model, x, u, h, ns, {y.data(), n}, iters);
    }
    if (n * d > s.size()) throw InvalidArgument("state/noise dimension above the supported maximum");
    model.sigma({y.data(), n}, u, {s.data(), n * d});
    for (std::size_t i = 0; i < n; ++i) {
        double v = y[i];
        for (std::size_t j = 0; j < d; ++j) v += s[i + n * j] * dw[j];
        if (!std::isfinite(v)) throw NonFiniteState("state became non-finite (" + where(x[0], u, h) + ")");
        out[i] = v;
    }
    return iters;
}

PathBundle::PathBundle(std::shared_ptr<const ControlModel> model, std::shared_ptr<const ControlLaw> control,
                       const TimeGrid& grid, std::size_t paths, std::uint64_t seed, std::vector<double> x0,
                       const BundleOptions& options)
    : model_(std::move(model)),
      control_(std::move(control)),
      grid_(grid),
      paths_(paths),
      n_(model_->n()),
      d_(model_->d()),
      seed_(seed),
      x0_(std::move(x0)),
      options_(options),
      noise_(seed) {
    if (paths_ < 1) throw InvalidArgument("need at least one path");
    if (x0_.size() != n_) throw InvalidArgument("initial state has the wrong dimension");
    if (grid_.steps < 1) throw InvalidArgument("grid has no steps");
    const std::size_t nodes = grid_.nodes();
    const double total = static_cast<double>(nodes) * static_cast<double>(paths_ * n_) * sizeof(double);
    if (options_.stride > 0) {
        stride_ = options_.stride;
    } else if (total <= static_cast<double>(options_.memory_budget)) {
        stride_ = 1;
    } else {
        const auto by_budget = static_cast<std::size_t>(std::ceil(total / static_cast<double>(options_.memory_budget)));
        const auto by_sqrt = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(nodes))));
        stride_ = std::max(by_budget, by_sqrt);
    }
    simulate();
}

void PathBundle::increments(std::size_t k, std::span<double> dw) const {
    const std::size_t s = grid_.noise_substeps;
    const double scale = std::sqrt(grid_.step / static_cast<double>(s));
    executor().for_each(paths_, [&](std::size_t b, std::size_t e) {
        for (std::size_t m = b; m < e; ++m)
            for (std::size_t j = 0; j < d_; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < s; ++i) acc += noise_.normal(m, k * s + i, j);
                dw[m * d_ + j] = scale * acc;
            }
    });
}

void PathBundle::controls(std::size_t k, std::span<const double> x, std::span<double> u) const {
    const double t = grid_.time(k);
    executor().for_each(paths_, [&](std::size_t b, std::size_t e) {
        for (std::size_t m = b; m < e; ++m) u[m] = (*control_)(k, t, x.subspan(m * n_, n_));
    });
}

void PathBundle::advance(std::size_t k, std::span<const double> x, std::span<const double> u,
                         std::span<const double> dw, std::span<double> x_next) const {
    const double h = grid_.step;
    executor().for_each(paths_, [&](std::size_t b, std::size_t e) {
        for (std::size_t m = b; m < e; ++m) {
            try {
                split_step(*model_, x.subspan(m * n_, n_), u[m], h, dw.subspan(m * d_, d_),
                           x_next.subspan(m * n_, n_));
            } catch (const Error& err) {
                const std::string msg = std::string(err.what()) + " at path " + std::to_string(m) + ", step " +
                                        std::to_string(k);
                if (err.kind() == "NewtonDivergence") throw NewtonDivergence(msg);
                if (err.kind() == "NonFiniteState") throw NonFiniteState(msg);
                throw;
            }
        }
    });
}

void PathBundle::simulate() {
    const std::size_t N = grid_.steps, Mn = paths_ * n_;
    const std::size_t C = N / stride_ + 1;
    checkpoints_.assign(C * Mn, 0.0);
    std::vector<double> cur(Mn), next(Mn), u(paths_), dw(paths_ * d_);
    for (std::size_t m = 0; m < paths_; ++m)
        for (std::size_t i = 0; i < n_; ++i) cur[m * n_ + i] = x0_[i];
    std::copy(cur.begin(), cur.end(), checkpoints_.begin());
    for (std::size_t k = 0; k < N; ++k) {
        controls(k, cur, u);
        increments(k, dw);
        advance(k, cur, u, dw, next);
        cur.swap(next);
        if ((k + 1) % stride_ == 0) std::copy(cur.begin(), cur.end(), checkpoints_.begin() + ((k + 1) / stride_) * Mn);
    }
}

void PathBundle::forward(std::size_t k0, std::size_t k1, const std::function<void(const NodeView&)>& visit) const {
    const std::size_t N = grid_.steps, Mn = paths_ * n_;
    if (k0 > k1 || k1 > N) throw InvalidArgument("forward sweep outside the grid");
    std::vector<double> u(paths_), dw(paths_ * d_);
    NodeView v;
    if (stride_ == 1) {
        for (std::size_t k = k0; k <= k1; ++k) {
            auto x = checkpoint(k);
            controls(k, x, u);
            if (k < N) increments(k, dw);
            v.k = k;
            v.t = grid_.time(k);
            v.x = x;
            v.u = u;
            v.dw = k < N ? std::span<const double>(dw) : std::span<const double>();
            visit(v);
        }
        return;
    }
    const std::size_t c = k0 / stride_;
    std::vector<double> cur(checkpoint(c).begin(), checkpoint(c).end()), next(Mn);
    for (std::size_t k = c * stride_;; ++k) {
        controls(k, cur, u);
        if (k < N) increments(k, dw);
        if (k >= k0) {
            v.k = k;
            v.t = grid_.time(k);
            v.x = cur;
            v.u = u;
            v.dw = k < N ? std::span<const double>(dw) : std::span<const double>();
            visit(v);
        }
        if (k == k1) break;
        advance(k, cur, u, dw, next);
        cur.swap(next);
    }
}

void PathBundle::backward(std::size_t k0, std::size_t k1, const std::function<void(const NodeView&)>& visit) const {
    const std::size_t N = grid_.steps, Mn = paths_ * n_, Md = paths_ * d_;
    if (k0 > k1 || k1 > N) throw InvalidArgument("backward sweep outside the grid");
    NodeView v;
    if (stride_ == 1) {
        std::vector<double> u(paths_), dw(Md);
        for (std::size_t k = k1 + 1; k-- > k0;) {
            auto x = checkpoint(k);
            controls(k, x, u);
            if (k < N) increments(k, dw);
            v.k = k;
            v.t = grid_.time(k);
            v.x = x;
            v.u = u;
            v.dw = k < N ? std::span<const double>(dw) : std::span<const double>();
            visit(v);
        }
        return;
    }
    std::vector<double> xs(stride_ * Mn), us(stride_ * paths_), dws(stride_ * Md);
    for (std::size_t s = (k1 / stride_) * stride_;; s -= stride_) {
        const std::size_t hi = std::min(s + stride_ - 1, k1);
        const std::size_t lo = std::max(s, k0);
        auto cp = checkpoint(s / stride_);
        std::copy(cp.begin(), cp.end(), xs.begin());
        for (std::size_t k = s; k <= hi; ++k) {
            const std::size_t o = k - s;
            std::span<const double> x(xs.data() + o * Mn, Mn);
            std::span<double> u(us.data() + o * paths_, paths_), dw(dws.data() + o * Md, Md);
            controls(k, x, u);
            if (k < N) increments(k, dw);
            if (k < hi) advance(k, x, u, dw, {xs.data() + (o + 1) * Mn, Mn});
        }
        for (std::size_t k = hi + 1; k-- > lo;) {
            const std::size_t o = k - s;
            v.k = k;
            v.t = grid_.time(k);
            v.x = {xs.data() + o * Mn, Mn};
            v.u = {us.data() + o * paths_, paths_};
            v.dw = k < N ? std::span<const double>(dws.data() + o * Md, Md) : std::span<const double>();
            visit(v);
        }
        if (s == 0 || s <= k0) break;
    }
}

std::vector<double> PathBundle::states_at(std::size_t k) const {
    std::vector<double> out;
    forward(k, k, [&](const NodeView& v) { out.assign(v.x.begin(), v.x.end()); });
    return out;
}

std::vector<double> PathBundle::controls_at(std::size_t k) const {
    std::vector<double> out;
    forward(k, k, [&](const NodeView& v) { out.assign(v.u.begin(), v.u.end()); });
    return out;
}

void PathBundle::write_csv(std::ostream& os) const {
    os << "path_id,step,t";
    for (std::size_t i = 0; i < n_; ++i) os << ",x_" << (i + 1);
    os << ",u\n";
    forward(0, grid_.steps, [&](const NodeView& v) {
        for (std::size_t m = 0; m < paths_; ++m) {
            os << m << ',' << v.k << ',' << num(v.t);
            for (std::size_t i = 0; i < n_; ++i) os << ',' << num(v.x[m * n_ + i]);
            os << ',' << num(v.u[m]) << '\n';
        }
    });
}

PathBundle simulate_state(const ControlModel& model, const ControlLaw& control, const TimeGrid& grid,
                          std::size_t M, std::uint64_t seed, std::vector<double> x0, const BundleOptions& options) {
    model.validate();
    return PathBundle(std::make_shared<const ControlModel>(model), std::make_shared<const ControlLaw>(control), grid,
                      M, seed, std::move(x0), options);
}

NoiseDiagnostics check_increments(const PathBundle& bundle) {
    NoiseDiagnostics out;
    const double h = bundle.grid().step;
    const double M = static_cast<double>(bundle.paths());
    const std::size_t d = bundle.d();
    bundle.forward(0, bundle.grid().steps - 1, [&](const NodeView& v) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0, s2 = 0.0;
            for (std::size_t m = 0; m < bundle.paths(); ++m) {
                const double w = v.dw[m * d + j];
                s += w;
                s2 += w * w;
            }
            const double mean = s / M;
            const double var = M > 1 ? (s2 - M * mean * mean) / (M - 1) : h;
            out.max_mean_ratio = std::max(out.max_mean_ratio, std::abs(mean) / (5.0 * std::sqrt(h / M)));
            out.max_var_deviation = std::max(out.max_var_deviation, std::abs(var / h - 1.0));
        }
    });
    out.ok = out.max_mean_ratio <= 1.0 && out.max_var_deviation <= 0.1;
    return out;
}

namespace {

struct Stats {
    double mean = 0.0, se = 0.0;
};

Stats mean_se(std::span<const double> v) {
    const double M = static_cast<double>(v.size());
    double s = 0.0;
    for (double a : v) s += a;
    const double mean = s / M;
    double ss = 0.0;
    for (double a : v) ss += (a - mean) * (a - mean);
    Stats st;
    st.mean = mean;
    st.se = v.size() > 1 ? std::sqrt(ss / (M - 1) / M) : 0.0;
    return st;
}

double norm2(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
}

}  // namespace

std::vector<double> pathwise_cost(const ControlModel& model, const PathBundle& bundle) {
    const auto& g = bundle.grid();
    const std::size_t n = bundle.n();
    std::vector<double> acc(bundle.paths(), 0.0);
    bundle.forward(0, g.steps - 1, [&](const NodeView& v) {
        const double w = g.step * std::exp(-g.discount * v.t);
        bundle.executor().for_each(bundle.paths(), [&](std::size_t b, std::size_t e) {
            for (std::size_t m = b; m < e; ++m) acc[m] += w * model.f(v.x.subspan(m * n, n), v.u[m]);
        });
    });
    return acc;
}

CostEstimate estimate_cost(const ControlModel& model, const PathBundle& bundle) {
    const auto& g = bundle.grid();
    const std::size_t n = bundle.n();
    const auto acc = pathwise_cost(model, bundle);
    const Stats st = mean_se(acc);
    CostEstimate ce;
    ce.value = st.mean;
    ce.std_error = st.se;
    ce.paths = bundle.paths();

    // tail: integrand held at its terminal growth envelope beyond T
    double cf = 0.0, ml = 0.0;
    const double l = model.growth_l;
    bundle.forward(g.steps, g.steps, [&](const NodeView& v) {
        for (std::size_t m = 0; m < bundle.paths(); ++m) {
            const double xn = std::sqrt(norm2(v.x.subspan(m * n, n)));
            const double grow = 1.0 + std::pow(xn, l);
            cf = std::max(cf, std::abs(model.f(v.x.subspan(m * n, n), v.u[m])) / grow);
            ml += grow;
        }
    });
    ml /= static_cast<double>(bundle.paths());
    ce.tail_bound = std::exp(-g.discount * g.horizon) / g.discount * cf * ml;
    return ce;
}

MomentEstimate estimate_weighted_moment(const PathBundle& bundle, double q, double r) {
    if (!(q >= 0.5)) throw InvalidArgument("weighted moment needs q >= 1/2");
    const auto& g = bundle.grid();
    const std::size_t n = bundle.n();
    std::vector<double> acc(bundle.paths(), 0.0);
    bundle.forward(0, g.steps - 1, [&](const NodeView& v) {
        const double w = g.step * std::exp(-r * q * v.t);
        for (std::size_t m = 0; m < bundle.paths(); ++m) acc[m] += w * std::pow(norm2(v.x.subspan(m * n, n)), q);
    });
    const Stats st = mean_se(acc);
    return {st.mean, st.se, q, r};
}

MomentPath discounted_second_moment(const PathBundle& bundle, double r) {
    MomentPath out;
    const std::size_t n = bundle.n();
    std::vector<double> v2(bundle.paths());
    bundle.forward(0, bundle.grid().steps, [&](const NodeView& v) {
        for (std::size_t m = 0; m < bundle.paths(); ++m) v2[m] = norm2(v.x.subspan(m * n, n));
        const Stats st = mean_se(v2);
        const double w = std::exp(-r * v.t);
        out.t.push_back(v.t);
        out.value.push_back(w * st.mean);
        out.std_error.push_back(w * st.se);
    });
    return out;
}

double moment_envelope(double x0_norm, double q, double c, double Ktilde, double r, double t) {
    return std::pow(x0_norm, 2.0 * q) * std::exp(2.0 * q * Ktilde * (c - 0.5 * r) * t);
}

double envelope_constant(double c, double origin) { return std::max({c + 0.5, 0.5 * origin * origin, 1.0}); }

void flow_step(std::size_t n, std::size_t d, std::size_t cols, double h, std::span<const double> Db,
               std::span<const double> Dsigma, std::span<const double> dw, std::span<double> Y,
               std::span<double> scratch) {
    if (n == 1) {
        double g = 1.0 + h * Db[0];
        for (std::size_t j = 0; j < d; ++j) g += Dsigma[j] * dw[j];
        for (std::size_t c = 0; c < cols; ++c) Y[c] *= g;
        return;
    }
    for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            double acc = Y[c * n + i];
            for (std::size_t k = 0; k < n; ++k) {
                double coef = h * Db[i + n * k];
                for (std::size_t j = 0; j < d; ++j) coef += dw[j] * Dsigma[j * n * n + i + n * k];
                acc += coef * Y[c * n + k];
            }
            scratch[c * n + i] = acc;
        }
    std::copy(scratch.begin(), scratch.begin() + n * cols, Y.begin());
}

PathField simulate_linear_sde(const LinearCoefficients& cf, std::span<const double> y0, const PathBundle& bundle,
                              std::size_t k0) {
    const std::size_t n = bundle.n(), d = bundle.d(), M = bundle.paths(), N = bundle.grid().steps;
    const double h = bundle.grid().step;
    if (y0.size() != n) throw InvalidArgument("initial value has the wrong dimension");
    PathField out;
    out.paths = M;
    out.k0 = k0;
    out.nodes = N - k0 + 1;
    out.dim = n;
    out.data.assign(M * out.nodes * n, 0.0);
    std::vector<double> y(M * n);
    for (std::size_t m = 0; m < M; ++m) std::copy(y0.begin(), y0.end(), y.begin() + m * n);
    bundle.forward(k0, N, [&](const NodeView& v) {
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t i = 0; i < n; ++i) out.at(m, v.k, i) = y[m * n + i];
        if (v.k == N) return;
        bundle.executor().for_each(M, [&](std::size_t b, std::size_t e) {
            std::vector<double> A(n * n, 0.0), B(d * n * n, 0.0), al(n, 0.0), be(n * d, 0.0), yn(n);
            for (std::size_t m = b; m < e; ++m) {
                auto x = v.x.subspan(m * n, n);
                if (cf.A) cf.A(v.k, m, x, v.u[m], A);
                if (cf.B) cf.B(v.k, m, x, v.u[m], B);
                if (cf.alpha) cf.alpha(v.k, m, x, v.u[m], al);
                if (cf.beta) cf.beta(v.k, m, x, v.u[m], be);
                const double* ym = y.data() + m * n;
                const double* w = v.dw.data() + m * d;
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = ym[i] + h * al[i];
                    for (std::size_t k = 0; k < n; ++k) acc += h * A[i + n * k] * ym[k];
                    for (std::size_t j = 0; j < d; ++j) {
                        double s = be[i + n * j];
                        for (std::size_t k = 0; k < n; ++k) s += B[j * n * n + i + n * k] * ym[k];
                        acc += s * w[j];
                    }
                    if (!std::isfinite(acc))
                        throw NonFiniteState("linear SDE blew up at path " + std::to_string(m) + ", step " +
                                             std::to_string(v.k));
                    yn[i] = acc;
                }
                std::copy(yn.begin(), yn.end(), y.begin() + m * n);
            }
        });
    });
    return out;
}

PathField simulate_linearized_flow(const ControlModel& model, const PathBundle& bundle, std::size_t t_index,
                                   std::span<const double> eta) {
    if (t_index > bundle.grid().steps) throw InvalidArgument("t_index outside the grid");
    LinearCoefficients cf;
    cf.A = [&model](std::size_t, std::size_t, std::span<const double> x, double u, std::span<double> out) {
        model.Db(x, u, out);
    };
    cf.B = [&model](std::size_t, std::size_t, std::span<const double> x, double u, std::span<double> out) {
        model.Dsigma(x, u, out);
    };
    return simulate_linear_sde(cf, eta, bundle, t_index);
}

}  // namespace smpmc
