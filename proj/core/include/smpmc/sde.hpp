#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "smpmc/control.hpp"
#include "smpmc/grid.hpp"
#include "smpmc/models.hpp"
#include "smpmc/parallel.hpp"
#include "smpmc/random.hpp"

namespace smpmc {

// All paths at one grid node. Layout is path-major: x[m*n + i], dw[m*d + j].
struct NodeView {
    std::size_t k = 0;
    double t = 0.0;
    std::span<const double> x;
    std::span<const double> u;
    std::span<const double> dw;  // increment over [t_k, t_{k+1}); empty at the last node
};

struct BundleOptions {
    std::size_t workers = 1;
    std::size_t memory_budget = std::size_t{512} << 20;  // bytes for stored states
    std::size_t stride = 0;                              // 0: choose from the budget
};

struct NewtonSettings {
    int max_iterations = 50;
    double tolerance = 1e-12;  // times (1 + |x|)
};

// One split-step: solve y - h b(y,u) = x, then x' = y + sigma(y,u) dw.
// Returns the number of Newton iterations; throws NewtonDivergence/NonFiniteState.
int split_step(const ControlModel& model, std::span<const double> x, double u, double h,
               std::span<const double> dw, std::span<double> out, const NewtonSettings& ns = {});

// Paths are never stored in full unless they fit the memory budget: states
// are kept at checkpoints every `stride` nodes and increments are
// regenerated from the counter-based noise source, so sweeps replay exactly.
class PathBundle {
public:
    PathBundle(std::shared_ptr<const ControlModel> model, std::shared_ptr<const ControlLaw> control,
               const TimeGrid& grid, std::size_t paths, std::uint64_t seed, std::vector<double> x0,
               const BundleOptions& options = {});

    const TimeGrid& grid() const { return grid_; }
    std::size_t paths() const { return paths_; }
    std::size_t n() const { return n_; }
    std::size_t d() const { return d_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<double>& x0() const { return x0_; }
    const ControlModel& model() const { return *model_; }
    const ControlLaw& control() const { return *control_; }
    std::shared_ptr<const ControlModel> model_ptr() const { return model_; }
    std::shared_ptr<const ControlLaw> control_ptr() const { return control_; }
    const NoiseSource& noise() const { return noise_; }
    Executor executor() const { return Executor(options_.workers); }
    const BundleOptions& options() const { return options_; }
    std::size_t stride() const { return stride_; }
    bool fully_stored() const { return stride_ == 1; }

    // dW over step k for every path
    void increments(std::size_t k, std::span<double> dw) const;
    void controls(std::size_t k, std::span<const double> x, std::span<double> u) const;
    void advance(std::size_t k, std::span<const double> x, std::span<const double> u,
                 std::span<const double> dw, std::span<double> x_next) const;

    std::vector<double> states_at(std::size_t k) const;
    std::vector<double> controls_at(std::size_t k) const;

    // visit nodes k0..k1 in increasing / decreasing order
    void forward(std::size_t k0, std::size_t k1, const std::function<void(const NodeView&)>& visit) const;
    void backward(std::size_t k0, std::size_t k1, const std::function<void(const NodeView&)>& visit) const;

    void write_csv(std::ostream& os) const;

private:
    void simulate();
    std::span<const double> checkpoint(std::size_t c) const {
        return {checkpoints_.data() + c * paths_ * n_, paths_ * n_};
    }

    std::shared_ptr<const ControlModel> model_;
    std::shared_ptr<const ControlLaw> control_;
    TimeGrid grid_;
    std::size_t paths_, n_, d_;
    std::uint64_t seed_;
    std::vector<double> x0_;
    BundleOptions options_;
    NoiseSource noise_;
    std::size_t stride_ = 1;
    std::vector<double> checkpoints_;  // node c*stride at offset c*M*n
};

PathBundle simulate_state(const ControlModel& model, const ControlLaw& control, const TimeGrid& grid,
                          std::size_t M, std::uint64_t seed, std::vector<double> x0,
                          const BundleOptions& options = {});

struct NoiseDiagnostics {
    double max_mean_ratio = 0.0;  // max_k |mean| / (5 sqrt(h/M))
    double max_var_deviation = 0.0;  // max_k |var/h - 1|
    bool ok = true;
};
NoiseDiagnostics check_increments(const PathBundle& bundle);

struct CostEstimate {
    double value = 0.0;
    double std_error = 0.0;
    std::size_t paths = 0;
    double tail_bound = 0.0;
};

CostEstimate estimate_cost(const ControlModel& model, const PathBundle& bundle);
// per-path left-endpoint discounted cost
std::vector<double> pathwise_cost(const ControlModel& model, const PathBundle& bundle);

struct MomentEstimate {
    double value = 0.0;
    double std_error = 0.0;
    double q = 1.0;
    double r = 0.0;
};
MomentEstimate estimate_weighted_moment(const PathBundle& bundle, double q, double r);

// e^{-r t_k} E|X_k|^2 at every node with its standard error.
struct MomentPath {
    std::vector<double> t, value, std_error;
};
MomentPath discounted_second_moment(const PathBundle& bundle, double r);

// |x0|^{2q} exp(2q Ktilde (c - r/2) t)
double moment_envelope(double x0_norm, double q, double c, double Ktilde, double r, double t);
// max{c + 1/2, C^2/2, 1} with C from origin_bound
double envelope_constant(double c, double origin_bound);

// Per-path values on a window of nodes [k0, k1]: data[(m * nodes + (k - k0)) * dim + i].
struct PathField {
    std::size_t paths = 0, k0 = 0, nodes = 0, dim = 0;
    std::vector<double> data;
    double& at(std::size_t m, std::size_t k, std::size_t i) { return data[(m * nodes + (k - k0)) * dim + i]; }
    double at(std::size_t m, std::size_t k, std::size_t i) const {
        return data[(m * nodes + (k - k0)) * dim + i];
    }
};

// Coefficients of dY = (A Y + alpha) dt + sum_j (B^j Y + beta^j) dW^j evaluated
// on a path at a node; empty maps mean zero. B is d blocks of n x n, beta is n x d.
struct LinearCoefficients {
    using Fn = std::function<void(std::size_t k, std::size_t path, std::span<const double> x, double u,
                                  std::span<double> out)>;
    Fn A, B, alpha, beta;
};

PathField simulate_linear_sde(const LinearCoefficients& coeffs, std::span<const double> y0,
                              const PathBundle& bundle, std::size_t k0 = 0);

PathField simulate_linearized_flow(const ControlModel& model, const PathBundle& bundle, std::size_t t_index,
                                   std::span<const double> eta);

// One explicit Euler step of the homogeneous linearized flow for an n x c block of
// column vectors Y (column-major), given D_x b and D_x sigma^j at the node.
void flow_step(std::size_t n, std::size_t d, std::size_t cols, double h, std::span<const double> Db,
               std::span<const double> Dsigma, std::span<const double> dw, std::span<double> Y,
               std::span<double> scratch);

}  // namespace smpmc
