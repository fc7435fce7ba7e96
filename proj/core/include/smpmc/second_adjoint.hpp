#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smpmc/adjoint.hpp"
#include "smpmc/regression.hpp"

namespace smpmc {

// Scratch for the model's second derivatives at one point.
struct HessianWork {
    std::vector<double> D2b, D2s, D2f;
    HessianWork(std::size_t n, std::size_t d) : D2b(n * n * n), D2s(n * d * n * n), D2f(n * n) {}
};

// D^2_x H = sum_i p_i D^2 b^i + sum_ij q_ij D^2 sigma^{ij} - D^2 f, n x n column-major.
void hessian_of_H(const ControlModel& model, std::span<const double> x, double u, std::span<const double> p,
                  std::span<const double> q, std::span<double> out, HessianWork& work);
void hessian_of_H(const ControlModel& model, std::span<const double> x, double u, std::span<const double> p,
                  std::span<const double> q, std::span<double> out);

// Node-wise x-Hessian of H along the bundle with (p, q) from the first adjoint.
// Nothing is stored; sweeps recompute it from the adjoint fits.
class HessianOfH {
public:
    explicit HessianOfH(const AdjointSolution& adjoint) : adjoint_(&adjoint) {}

    const AdjointSolution& adjoint() const { return *adjoint_; }
    const ControlModel& model() const { return adjoint_->model(); }
    const PathBundle& bundle() const { return adjoint_->bundle(); }

    // all paths at one node, out is M * n * n
    void node(const NodeView& nv, const AdjointNode& a, std::span<double> out) const;
    // single point at node k with (p, q) from the adjoint at x
    void at(std::size_t k, std::span<const double> x, double u, std::span<double> out) const;

    void sweep(std::size_t k0, std::size_t k1,
               const std::function<void(const NodeView&, const AdjointNode&, std::span<const double> H)>& visit)
        const;

private:
    const AdjointSolution* adjoint_;
};

HessianOfH hessian_H(const AdjointSolution& adjoint);

enum class Conditioning { regression, nested };
Conditioning parse_conditioning(const std::string& s);
std::string to_string(Conditioning c);

struct SecondAdjointOptions {
    Conditioning mode = Conditioning::regression;
    RegressionBasis basis;             // regression mode: projection of the pathwise integrals
    std::size_t inner_paths = 200;     // nested mode: continuations per outer path
    std::size_t outer_paths = 32;      // nested mode: the first outer_paths paths of the bundle
};

struct SecondAdjointEstimate {
    double t = 0.0;
    std::size_t k = 0;
    Conditioning conditioning = Conditioning::regression;
    std::size_t flows_per_basis = 0;
    std::size_t paths = 0;  // outer paths behind the mean

    std::vector<double> matrix;            // n x n, symmetric part of the mean
    std::vector<double> std_error_matrix;  // n x n
    std::vector<double> asymmetry;         // mean of (I - I')/2 before symmetrization
    std::vector<double> asymmetry_std_error;

    // e^{-r(T - t)} E sum_i |y^{t,e_i}_T|^2, the part of the infinite-horizon integral the grid cuts off
    double tail = 0.0;
    bool tail_ok = true;

    // conditional matrix per outer path (n x n each, symmetric); regression: fitted values
    std::vector<double> pathwise;
    RegressionFit field;  // regression mode: P_t as a function of X_t (n*n outputs)

    std::size_t n() const;
    // P_t(x); the mean matrix when there is no field
    void at(std::span<const double> x, std::span<double> P) const;
    double form(std::span<const double> eta, std::span<const double> gamma) const;
};

// One forward sweep for all requested nodes. Flows start from the basis vectors at t_k and are
// advanced by the explicit linearized scheme; the integral is a trapezoid sum up to the horizon.
std::vector<SecondAdjointEstimate> estimate_P(const HessianOfH& hess, const std::vector<std::size_t>& t_indices,
                                              const SecondAdjointOptions& options = {});
SecondAdjointEstimate estimate_P(const HessianOfH& hess, std::size_t t_index,
                                 const SecondAdjointOptions& options = {});

// <P_t eta, gamma> from the matrix against the duality integral of the flows from eta and gamma.
struct FormCheck {
    double from_matrix = 0.0;
    double direct = 0.0;
    double std_err = 0.0;  // of the direct estimate
    double diff() const { return direct - from_matrix; }
};
std::vector<FormCheck> check_bilinear_form(const HessianOfH& hess, const SecondAdjointEstimate& estimate,
                                           const std::vector<std::pair<std::vector<double>, std::vector<double>>>& pairs);

struct PPropertiesReport {
    std::vector<double> t, norm2, norm2_std_error;  // E ||P_t||^2 (Frobenius), pathwise
    double max_norm2 = 0.0;
    double max_asymmetry_ratio = 0.0;  // max |asymmetry| / std error (0/0 counts as 0)
    bool asymmetry_ok = true;          // ratio <= 3
    // E |<(P_{t0+eps} - P_{t0}) gamma, eta>| against the earliest estimate, eps decreasing
    std::vector<double> eps, modulus, modulus_std_error;
    bool modulus_decreasing = true;
};

// Estimates must share one bundle; pathwise values are compared path by path.
PPropertiesReport check_P_properties(const std::vector<SecondAdjointEstimate>& estimates,
                                     std::span<const double> gamma, std::span<const double> eta);

struct SpikeDualityRow {
    IdentityReport identity;  // lhs E sum e^{-rs}<D^2H y, y>, rhs sum_j E sum_spike e^{-rs}<P delta sigma^j, .>
    double ratio = 0.0;       // |diff| / eps
    double ratio_std_error = 0.0;
};
struct SpikeDualityReport {
    std::vector<SpikeDualityRow> rows;  // in the order of the spikes
    bool decreasing = true;             // |diff|/eps non-increasing as eps shrinks, within 3 std errors
};

// P at a spike node is interpolated linearly in time between the estimates bracketing it.
SpikeDualityReport check_spike_duality(const HessianOfH& hess, const std::vector<SecondAdjointEstimate>& estimates,
                                       std::span<const RealizedSpike> spikes);

struct YDynamicsReport {
    double epsilon = 0.0;
    // max_k e^{-r t_k} E ||E_k[Y_{k+1}] - Y_k - h drift_k|| / h, drift from the Y equation
    double drift_residual = 0.0;
    std::size_t drift_residual_node = 0;
    // E sum_k e^{-r t_k} (Y_{k+1} - Y_k - h drift_k - sum_j diffusion^j_k dW^j_k), sample version
    double sample_residual = 0.0;
    double sample_residual_std_error = 0.0;
    // weighted-norm bound: (r - 2c - delta) lhs <= gamma / delta + lambda
    double lhs = 0.0, lhs_std_error = 0.0;
    double gamma_term = 0.0, lambda_term = 0.0;
    double c_three_half = 0.0, delta = 0.0, bound = 0.0;
    bool applicable = false;  // r > 2 c_{3/2}
    bool holds = false;
};

YDynamicsReport check_Y_dynamics(const ControlModel& model, const PathBundle& base, const RealizedSpike& spike,
                                 double c_three_half);

// t,i,j,P_ij,stderr_ij,mode,flows_per_basis
void write_second_adjoint_csv(std::ostream& os, const std::vector<SecondAdjointEstimate>& estimates);

}  // namespace smpmc
