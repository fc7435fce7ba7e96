#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smpmc/sde.hpp"

namespace smpmc {

struct SpikeSpec {
    double t0 = 0.0;
    double epsilon = 0.0;
    double v = 0.0;
};

// The spike as the grid sees it: steps [begin, end), realized epsilon = (end - begin) h.
struct RealizedSpike {
    SpikeSpec requested;
    std::size_t begin = 0, end = 0;
    double t0 = 0.0, epsilon = 0.0, v = 0.0;

    bool empty() const { return end <= begin; }
    bool active(std::size_t k) const { return k >= begin && k < end; }
};

RealizedSpike realize_spike(const TimeGrid& grid, const SpikeSpec& spike);

// `control` off the spike steps, constantly v on them. Throws SpikeOutsideHorizon.
ControlLaw make_spike(const ControlLaw& control, const SpikeSpec& spike, const TimeGrid& grid);

// State of one spike's variations at one node, all paths (path-major like NodeView).
struct VariationState {
    const RealizedSpike* spike = nullptr;
    std::span<const double> xe;  // X^eps
    std::span<const double> ue;  // u^eps
    std::span<const double> y, z;
};

using VariationVisitor = std::function<void(const NodeView& base, std::span<const VariationState> vars)>;

// Advances X^eps (split step, same dW), y and z (explicit Euler with coefficients at the
// base pair) for every spike in one forward sweep. u^eps is v on the spike and the base
// path's control elsewhere, so feedback laws are frozen along the base path.
void sweep_variations(const ControlModel& model, const PathBundle& base, std::span<const RealizedSpike> spikes,
                      const VariationVisitor& visit);

// xi = X^eps - X, eta = xi - y, zeta = eta - z, per path
struct VariationFields {
    PathField xe, y, z;
};

class VariationBundle {
public:
    VariationBundle(std::shared_ptr<const ControlModel> model, const PathBundle& base, RealizedSpike spike,
                    bool materialize);

    const PathBundle& base() const { return *base_; }
    const ControlModel& model() const { return *model_; }
    const RealizedSpike& spike() const { return spike_; }
    bool materialized() const { return fields_.has_value(); }
    const VariationFields& fields() const;

    // replays stored fields when materialized, otherwise re-simulates
    void sweep(const VariationVisitor& visit) const;

private:
    std::shared_ptr<const ControlModel> model_;
    const PathBundle* base_;
    RealizedSpike spike_;
    std::optional<VariationFields> fields_;
};

// Materializes when 3 fields fit the base bundle's memory budget.
VariationBundle simulate_variations(const ControlModel& model, const PathBundle& base, const SpikeSpec& spike);

struct OrderRow {
    std::string quantity;
    int k = 1;
    double eps = 0.0;
    double weighted_sup = 0.0;
    double std_err = 0.0;
    std::size_t argmax_node = 0;
};

struct SlopeSummary {
    std::string quantity;
    double slope = 0.0;
    double std_error = 0.0;
    double ci_low = 0.0, ci_high = 0.0;
    double expected = 0.0;   // k for xi, y; 2k for z, eta; > 2k for zeta
    bool strict = false;     // expectation is "greater than"
    bool degenerate = false; // all values zero
};

struct OrderReport {
    double rho = 0.0;
    int k = 1;
    std::vector<double> eps_requested, eps_realized;
    std::vector<OrderRow> rows;
    std::vector<SlopeSummary> slopes;
    const SlopeSummary& slope(const std::string& quantity) const;
};

inline const std::vector<std::string>& variation_quantities() {
    static const std::vector<std::string> q{"xi", "y", "z", "eta", "zeta"};
    return q;
}

// sup over nodes of e^{-rho k t} E|.|^{2k} per quantity and epsilon, and the log-log slopes.
// rho defaults to the grid discount. Throws InsufficientPaths when noise swamps a signal.
OrderReport estimate_expansion_orders(const ControlModel& model, const PathBundle& base, SpikeSpec templ,
                                      const std::vector<double>& eps_list, int k,
                                      std::optional<double> rho = std::nullopt);

OrderReport estimate_expansion_orders(const ControlModel& model, const ControlLaw& control, const TimeGrid& grid,
                                      SpikeSpec templ, const std::vector<double>& eps_list, int k, std::size_t M,
                                      std::uint64_t seed, std::vector<double> x0, const BundleOptions& options = {});

// OLS slope of log(values) on log(eps) with a t-based 95% interval.
SlopeSummary loglog_slope(const std::vector<double>& eps, const std::vector<double>& values);

struct CostExpansion {
    double epsilon = 0.0;
    double linear_term = 0.0;     // E int e^{-rt} <D_x f, y + z>
    double quadratic_term = 0.0;  // E int e^{-rt} [1/2 <D^2_x f y, y> + delta f chi]
    double expansion = 0.0;
    double direct = 0.0;          // J(u^eps) - J(u), same dW
    double direct_std_error = 0.0;
    double residual = 0.0;        // direct - expansion
    double residual_std_error = 0.0;
};

std::vector<CostExpansion> expand_cost(const ControlModel& model, const PathBundle& base,
                                       std::span<const RealizedSpike> spikes);
CostExpansion expand_cost(const ControlModel& model, const VariationBundle& variations);

void write_order_csv(std::ostream& os, const OrderReport& report);

}  // namespace smpmc
