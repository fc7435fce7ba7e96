#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "smpmc/second_adjoint.hpp"

namespace smpmc {

// <p, b(x,u)> + Tr[q' sigma(x,u)] - f(x,u)
double hamiltonian(const ControlModel& model, std::span<const double> x, double u, std::span<const double> p,
                   std::span<const double> q);

// Reference point of the H-function: the simulated pair and the adjoints there.
struct HAnchor {
    std::vector<double> x;  // X_t
    double u = 0.0;         // u_t
    std::vector<double> p, q, P;
};

// H(x,u,p,q) - 1/2 Tr[sigma(X,u_t)' P sigma(X,u_t)] + 1/2 Tr[(sigma(x,u) - sigma(X,u_t))' P (.)]
double h_function(const ControlModel& model, std::span<const double> x, double u, const HAnchor& anchor);

// index of the grid point maximizing v -> h_function(X_t, v); ties go to the smallest index
std::size_t argmax_h(const ControlModel& model, const HAnchor& anchor, std::span<const double> grid);

enum class Verdict { satisfied, violated, inconclusive };
std::string to_string(Verdict v);

struct SMPRow {
    double t = 0.0;
    std::size_t k = 0;
    double v = 0.0;
    double lhs = 0.0;      // path average of dH + 1/2 sum_j <P dsigma^j, dsigma^j>
    double std_err = 0.0;
    Verdict verdict = Verdict::satisfied;
    double fraction_above_tolerance = 0.0;  // share of paths whose own lhs exceeds the tolerance
};

// Maximality view of the H-function at one time.
struct SMPTimeSummary {
    double t = 0.0;
    std::size_t k = 0;
    double mean_control = 0.0;           // E u_t
    double argmax_of_mean = 0.0;         // v maximizing the path-averaged lhs
    double mean_abs_gap = 0.0;           // E |argmax_v H-function(X_t, v) - u_t|, per path
    double within_one_step = 0.0;        // share of paths whose argmax is within one grid step of u_t
};

struct SMPReport {
    double tolerance = 0.0;
    double h_scale = 0.0;  // E |H(X_t, u_t, p_t, q_t)| over the checked times
    std::vector<SMPRow> rows;
    std::vector<SMPTimeSummary> times;
    std::size_t violated = 0, inconclusive = 0, satisfied = 0;
    double worst_lhs = 0.0, worst_t = 0.0, worst_v = 0.0;  // largest lhs - 3 std_err
    bool any_violated() const { return violated > 0; }
};

struct SMPOptions {
    std::vector<double> times{0.5, 1.0, 2.0};
    std::vector<double> v_grid;  // empty: the model's control grid
    double tolerance = -1.0;     // negative: 1e-3 (1 + h_scale)
    AdjointOptions adjoint;
    SecondAdjointOptions second_adjoint;
};

// On an existing pipeline. One P estimate per checked time is looked up by node index.
SMPReport check_smp(const HessianOfH& hess, const std::vector<SecondAdjointEstimate>& estimates,
                    const SMPOptions& options);

// Full pipeline: simulate under the candidate, first adjoint, P at the checked times, then the check.
SMPReport check_smp(const ControlModel& model, const ControlLaw& candidate, const TimeGrid& grid, std::size_t M,
                    std::uint64_t seed, std::vector<double> x0, const SMPOptions& options = {},
                    const BundleOptions& bundle_options = {});

// t,v,lhs,std_err,verdict
void write_smp_csv(std::ostream& os, const SMPReport& report);
// flat key=value lines: counts, tolerance, worst violation and the per-time argmax view
void write_smp_summary(std::ostream& os, const SMPReport& report);

}  // namespace smpmc
