#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smpmc/adjoint.hpp"
#include "smpmc/models.hpp"
#include "smpmc/second_adjoint.hpp"
#include "smpmc/variation.hpp"

namespace smpmc {

struct GridConfig {
    std::optional<double> T;  // default: the horizon where e^{-rT} hits tail_tolerance
    double h = 1e-2;
    std::optional<double> r;  // empty means "auto"
    double tail_tolerance = 1e-6;
    std::size_t noise_substeps = 1;
};

// constant: u = value; linear_feedback: u = gain x_1 + offset;
// riccati: lq_scalar only, u = -P x with P the discounted algebraic Riccati root
struct ControlConfig {
    std::string kind = "constant";
    double value = 0.0, gain = 0.0, offset = 0.0;
};

struct ProbeConfig {
    std::vector<double> p;  // empty: the indices the discount recommendation needs
    SamplingBox box;
    std::uint64_t seed = 7;
};

struct SecondAdjointConfig {
    Conditioning mode = Conditioning::regression;
    std::size_t inner_paths = 200;
    std::size_t outer_paths = 32;
    std::vector<double> times{0.5, 1.0, 2.0};
    RegressionBasis basis;
};

struct SMPConfig {
    std::vector<double> times{0.5, 1.0, 2.0};
    std::vector<double> v_grid;  // empty: the model's control grid
    double tolerance = -1.0;     // negative: automatic
};

// oracle-lq: the control-in-diffusion variant used for the duality checks
struct OracleConfig {
    double variant_sigma1 = 0.3;
    double variant_h = 1e-2;
};

struct ExperimentConfig {
    std::string model = "lq_scalar";
    Params params;
    GridConfig grid;
    std::size_t paths = 10000;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::size_t memory_mb = 512;
    std::vector<double> x0{1.0};
    ControlConfig control;
    double spike_t0 = 0.5, spike_v = 1.0;
    std::vector<double> eps{0.4, 0.2, 0.1, 0.05};
    int order_k = 1;
    std::optional<double> order_rho;
    AdjointOptions adjoint;
    SecondAdjointConfig second_adjoint;
    SMPConfig smp;
    ProbeConfig probe;
    OracleConfig oracle;
    std::string output_dir = "out";
    std::size_t csv_max_paths = 20;  // paths written to per-path CSVs
};

// Throws ConfigParseError naming the line and the field.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);

// YAML text of a config; after resolve() it is the exact configuration that ran.
std::string emit_config(const ExperimentConfig& cfg);

struct ResolvedSetup {
    TimeGrid grid;
    std::optional<DiscountRecommendation> discount;  // set when r was "auto"
};

// Fixes r ("auto" via the discount recommendation) and T before anything is simulated.
// Probe reports already at hand are reused by the recommendation.
ResolvedSetup resolve(ExperimentConfig& cfg, const ControlModel& model,
                      std::vector<MonotonicityReport> reports = {});

ControlModel make_model(const ExperimentConfig& cfg);
ControlLaw make_control(const ExperimentConfig& cfg, const ControlModel& model, double r);
BundleOptions bundle_options(const ExperimentConfig& cfg);

// P solving P^2 - (2a - r) P - 1 = 0, the optimal feedback gain of the scalar LQ problem is -P
double lq_riccati(double a, double r);

}  // namespace smpmc
