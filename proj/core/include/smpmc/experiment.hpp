#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "smpmc/config.hpp"

namespace smpmc {

const std::vector<std::string>& subcommands();

// Exit codes of run_experiment.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;        // a stage threw
inline constexpr int kExitConfig = 2;        // config did not parse or resolve
inline constexpr int kExitCriteria = 3;      // oracle-lq ran but a criterion failed

struct CriterionResult {
    int id = 0;
    std::string name;
    double measured = 0.0, threshold = 0.0;
    bool pass = false;
    std::string detail;
};

// Scalar LQ end to end: b = a x + u, sigma = sigma0 (+ sigma1 u on the variant), f = x^2 + u^2.
struct LQOracleSettings {
    double a = -1.0, sigma0 = 0.5, r = 0.5, x0 = 1.0;
    double T = 12.0, h = 2e-3;
    std::size_t paths = 100000;
    std::uint64_t seed = 1;
    std::vector<double> times{0.5, 1.0, 2.0};
    // control-in-diffusion variant for the duality checks
    double variant_sigma1 = 0.3, variant_h = 1e-2;
    std::vector<double> eps{0.4, 0.2, 0.1, 0.05};
    double spike_t0 = 0.5, spike_v = 1.0;
    BundleOptions bundle;
    std::vector<int> criteria{1, 2, 3, 5, 6, 9};  // subset to run
};

// Criteria: SMP verdicts for the optimal and the zero control, adjoint slope, both first-order
// dualities, P closed form, spike duality trend, cost convergence in h.
std::vector<CriterionResult> run_lq_oracle(const LQOracleSettings& settings, std::ostream* log = nullptr);

LQOracleSettings lq_oracle_settings(const ExperimentConfig& cfg);

// Runs one subcommand, writes CSVs, resolved_config.yaml and manifest.json into out_dir.
// Every failure is caught, named by stage in the manifest and mapped to a nonzero exit code.
int run_experiment(const std::string& subcommand, ExperimentConfig cfg, const std::filesystem::path& out_dir,
                   std::ostream& log);

// Same, starting from a config file; parse failures also produce a failed manifest.
int run_experiment_file(const std::string& subcommand, const std::string& config_path,
                        const std::filesystem::path& out_dir, std::ostream& log,
                        std::size_t workers_override = 0, std::optional<std::uint64_t> seed_override = std::nullopt);

}  // namespace smpmc
