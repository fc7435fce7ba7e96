#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace smpmc {

using Params = std::map<std::string, double>;

// Finite list of control points or a gridded interval; the grid is what
// every sup over U actually sees.
class ControlSet {
public:
    ControlSet() : points_{0.0} {}
    static ControlSet finite(std::vector<double> pts);
    static ControlSet interval(double lo, double hi, std::size_t points);

    const std::vector<double>& points() const { return points_; }
    std::size_t size() const { return points_.size(); }
    bool is_interval() const { return interval_; }
    double lo() const { return lo_; }
    double hi() const { return hi_; }
    bool contains(double v, double tol = 1e-9) const;

private:
    std::vector<double> points_;
    bool interval_ = false;
    double lo_ = 0.0, hi_ = 0.0;
};

// Layouts (all column-major):
//   drift n, diffusion n x d (column j is sigma^j),
//   drift_jac n x n, diffusion_jac d blocks of n x n (D_x sigma^j),
//   drift_hess n blocks of n x n (D^2 b^i),
//   diffusion_hess n*d blocks of n x n, block (i + n*j) is D^2 sigma_{ij},
//   cost_grad n, cost_hess n x n.
struct ControlModel {
    using In = std::span<const double>;
    using Out = std::span<double>;
    using Map = std::function<void(In x, double u, Out out)>;
    using Scalar = std::function<double(In x, double u)>;

    std::string name;
    int state_dim = 1;
    int noise_dim = 1;
    int growth_m = 0;
    int growth_l = 2;
    ControlSet control_set;
    Params params;

    Map drift, diffusion;
    Scalar cost;
    Map drift_jac, diffusion_jac, cost_grad;
    Map drift_hess, diffusion_hess, cost_hess;

    std::size_t n() const { return static_cast<std::size_t>(state_dim); }
    std::size_t d() const { return static_cast<std::size_t>(noise_dim); }

    void b(In x, double u, Out out) const { drift(x, u, out); }
    void sigma(In x, double u, Out out) const { diffusion(x, u, out); }
    double f(In x, double u) const { return cost(x, u); }

    // Derivatives; each falls back to central differences when the
    // analytic map is empty.
    void Db(In x, double u, Out out) const;
    void Dsigma(In x, double u, Out out) const;
    void Df(In x, double u, Out out) const;
    void D2b(In x, double u, Out out) const;
    void D2sigma(In x, double u, Out out) const;
    void D2f(In x, double u, Out out) const;

    bool has_analytic_derivatives() const;
    void validate() const;
};

ControlModel builtin_model(const std::string& name, const Params& params = {});
std::vector<std::string> builtin_model_names();

// Returns a copy of `model` whose cost (and derivatives) are scaled by `factor`
// and shifted by `bump` * |x - center|^2.
ControlModel with_cost(const ControlModel& model, double factor, double bump = 0.0,
                       double center = 0.0);

struct SamplingBox {
    std::vector<double> lo{-1.0};
    std::vector<double> hi{1.0};
    std::size_t samples = 20000;

    double lo_at(std::size_t i) const { return lo.size() == 1 ? lo[0] : lo.at(i); }
    double hi_at(std::size_t i) const { return hi.size() == 1 ? hi[0] : hi.at(i); }
};

struct MonotonicityReport {
    std::string model;
    double p = 0.0;
    double c_p_estimate = 0.0;
    std::size_t sample_count = 0;
    std::vector<double> worst_x, worst_y;
    double worst_u = 0.0;
    double pair_max = 0.0;
    double derivative_max = 0.0;
    bool diagonal_binding = false;
    SamplingBox box;
};

MonotonicityReport probe_joint_monotonicity(const ControlModel& model, double p,
                                            const SamplingBox& box, std::uint64_t seed,
                                            std::size_t workers = 1);

// Largest eigenvalue of sym(D_x b) + p * sum_j D_x sigma^j^T D_x sigma^j at (x,u).
double derivative_form(const ControlModel& model, std::span<const double> x, double u, double p);

struct DiscountRecommendation {
    double r = 0.0;
    double max_c = 0.0;
    double binding_p = 0.0;
    bool floor_applied = false;
    bool all_nonpositive = false;
    std::vector<double> indices;
    std::vector<MonotonicityReport> reports;
};

inline constexpr double kDiscountFloor = 0.05;
inline constexpr double kDiscountMargin = 1.1;

std::vector<double> discount_indices(int growth_m, int growth_l);

DiscountRecommendation recommend_discount(const ControlModel& model,
                                          std::vector<MonotonicityReport> reports,
                                          const SamplingBox& box, std::uint64_t seed);

// sup_u |b(0,u)| + ||sigma(0,u)|| over the control grid.
double origin_bound(const ControlModel& model);

struct DerivativeCheck {
    double drift_jac = 0.0, diffusion_jac = 0.0, cost_grad = 0.0;
    double drift_hess = 0.0, diffusion_hess = 0.0, cost_hess = 0.0;
    double max() const;
};

// Max of |analytic - central difference| / (1 + |analytic|) over random points.
DerivativeCheck check_derivatives(const ControlModel& model, const SamplingBox& box,
                                  std::size_t points, std::uint64_t seed);

// Growth constants C with |b| <= C(1+|x|^{2m+1}), ||sigma|| <= C(1+|x|^m) on the box.
struct GrowthReport {
    double drift_constant = 0.0;
    double diffusion_constant = 0.0;
};
GrowthReport probe_growth(const ControlModel& model, const SamplingBox& box, std::uint64_t seed);

}  // namespace smpmc
