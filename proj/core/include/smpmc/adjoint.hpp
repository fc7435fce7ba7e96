#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "smpmc/regression.hpp"
#include "smpmc/sde.hpp"
#include "smpmc/variation.hpp"

namespace smpmc {

struct AdjointOptions {
    RegressionBasis basis;
    // forcing D_x f is cut after this time and p vanishes there; infinity means the grid horizon
    double truncation = std::numeric_limits<double>::infinity();
    // extra fixed-point sweeps on the implicit p in the driver (0 keeps the scheme exactly dual
    // to the explicit first and second variation schemes)
    int picard_sweeps = 0;
};

struct AdjointNodeDiagnostics {
    std::size_t basis_size = 0;
    double condition = 1.0;
    double r2_p = 1.0;  // worst output of the continuation fit
    double r2_q = 1.0;
    bool low_r2 = false;
};

// All paths at one node: p, the continuation phat = E_k[p_{k+1}] and q (column j is q^j).
struct AdjointNode {
    std::size_t k = 0;
    std::span<const double> p, phat, q;  // M*n, M*n, M*n*d
};

// Backward least-squares solution of the first adjoint equation with zero terminal value at
// the truncation node. Per-path values are reconstructed on demand from the node fits:
//   phat_k = fit of p_{k+1} on basis(X_k)
//   q^j_k  = fit of (p_{k+1} - phat_k) dW^j_k / h on basis(X_k)
//   p_k    = e^{-rh} [phat_k + h (D_xb' phat_k + sum_j D_x sigma^j' q^j_k - D_x f)]
class AdjointSolution {
public:
    AdjointSolution(std::shared_ptr<const ControlModel> model, const PathBundle& bundle, AdjointOptions options,
                    std::size_t truncation_node);

    const ControlModel& model() const { return *model_; }
    const PathBundle& bundle() const { return *bundle_; }
    const AdjointOptions& options() const { return options_; }
    std::size_t truncation_node() const { return K_; }
    double truncation_time() const { return bundle_->grid().time(K_); }
    const std::vector<AdjointNodeDiagnostics>& diagnostics() const { return diag_; }

    // single point evaluation at node k; u is the control used at (k, x)
    void continuation(std::size_t k, std::span<const double> x, std::span<double> phat) const;
    void q(std::size_t k, std::span<const double> x, std::span<double> q) const;
    void p(std::size_t k, std::span<const double> x, double u, std::span<double> p) const;
    void evaluate(std::size_t k, std::span<const double> x, double u, std::span<double> p, std::span<double> phat,
                  std::span<double> q) const;

    // all paths at a node
    void evaluate_node(std::size_t k, std::span<const double> x, std::span<const double> u, std::span<double> p,
                       std::span<double> phat, std::span<double> q) const;

    // forward replay of (p, phat, q) along the bundle
    void sweep(std::size_t k0, std::size_t k1,
               const std::function<void(const NodeView&, const AdjointNode&)>& visit) const;

    // path_id, step, t, p_1..p_n, q_11..q_nd (q_ij = row i of column j); max_paths = 0 writes all
    void write_csv(std::ostream& os, std::size_t max_paths = 0) const;

private:
    friend AdjointSolution solve_first_adjoint(const ControlModel&, const PathBundle&, const AdjointOptions&);
    void driver(std::size_t k, std::span<const double> x, double u, std::span<const double> phat,
                std::span<const double> q, std::span<double> p, std::span<double> scratch) const;

    std::shared_ptr<const ControlModel> model_;
    const PathBundle* bundle_;
    AdjointOptions options_;
    std::size_t K_;
    std::vector<RegressionFit> phat_fit_, q_fit_;  // per node 0..K-1
    std::vector<AdjointNodeDiagnostics> diag_;
};

AdjointSolution solve_first_adjoint(const ControlModel& model, const PathBundle& bundle,
                                    const AdjointOptions& options = {});

struct IdentityReport {
    std::string name;
    double lhs = 0.0, rhs = 0.0, diff = 0.0;
    double std_err = 0.0;    // std error of the pathwise difference
    double tolerance = 0.0;  // 3 std_err plus the discretization allowance
    double epsilon = 0.0;
    bool pass = true;
    std::string verdict() const { return pass ? "pass" : "fail"; }
};

// Both dualities for every spike in one sweep. Allowance: rel_h * h * |lhs|.
struct DualityPair {
    IdentityReport yp, zp;
};
std::vector<DualityPair> check_dualities(const ControlModel& model, const AdjointSolution& adjoint,
                                         std::span<const RealizedSpike> spikes, double rel_h = 0.5);

IdentityReport check_duality_yp(const ControlModel& model, const AdjointSolution& adjoint,
                                const VariationBundle& variations, double rel_h = 0.5);
IdentityReport check_duality_zp(const ControlModel& model, const AdjointSolution& adjoint,
                                const VariationBundle& variations, double rel_h = 0.5);

struct ContractionReport {
    double c_half = 0.0, delta = 0.0, r = 0.0;
    double p_gap = 0.0;     // E int e^{-rt} |p1 - p2|^2
    double q_gap = 0.0;     // E int e^{-rt} ||q1 - q2||^2
    double forcing = 0.0;   // E int e^{-rt} |D_x f1 - D_x f2|^2
    double lhs = 0.0, rhs = 0.0;
    double lhs_std_err = 0.0, rhs_std_err = 0.0;
    bool holds = true;
    // delta values in (0, r - 2 c_half) for which the inequality holds: [lo, hi], empty if lo > hi
    double delta_lo = 0.0, delta_hi = 0.0;
};

// Weighted-norm contraction between adjoints of two cost variants on one bundle.
ContractionReport apriori_contraction_check(const ControlModel& f1, const ControlModel& f2, const PathBundle& bundle,
                                            const AdjointOptions& options, double c_half, double delta);
ContractionReport apriori_contraction_check(const AdjointSolution& a1, const AdjointSolution& a2, double c_half,
                                            double delta);

struct CauchyStep {
    double k1 = 0.0, k2 = 0.0;
    double distance = 0.0;  // E int e^{-rt} |p^{k1} - p^{k2}|^2 over the grid
    double std_err = 0.0;
};
// Distances between adjoints of consecutive truncation times.
std::vector<CauchyStep> truncation_cauchy(const ControlModel& model, const PathBundle& bundle,
                                          const AdjointOptions& options, const std::vector<double>& truncations);

// E[p_k | X_k] = slope * X_k + intercept, least squares over paths (scalar states)
struct LinearFit {
    double slope = 0.0, intercept = 0.0, r2 = 0.0;
};
LinearFit regress_p_on_state(const AdjointSolution& adjoint, std::size_t k);

void write_identity_csv(std::ostream& os, const std::vector<IdentityReport>& reports);

}  // namespace smpmc
