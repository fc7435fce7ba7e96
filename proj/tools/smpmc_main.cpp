#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "smpmc/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Monte Carlo checks of the stochastic maximum principle on discounted infinite-horizon problems"};
    app.require_subcommand(1, 1);
    std::string config, out;
    std::size_t workers = 0;
    std::int64_t seed = -1;
    for (const auto& s : smpmc::subcommands()) {
        auto* sc = app.add_subcommand(s);
        sc->add_option("--config", config, "experiment config (YAML)")->required()->check(CLI::ExistingFile);
        sc->add_option("--out", out, "output directory (default: output.dir of the config)");
        sc->add_option("--workers", workers, "worker threads, overrides the config")->check(CLI::PositiveNumber);
        sc->add_option("--seed-override", seed, "master seed, overrides the config")->check(CLI::NonNegativeNumber);
    }
    CLI11_PARSE(app, argc, argv);

    const std::string sub = app.get_subcommands().front()->get_name();
    if (out.empty()) {
        try {
            out = smpmc::load_config(config).output_dir;
        } catch (const std::exception&) {
            out = "out";  // the run below reports the parse error
        }
    }
    std::optional<std::uint64_t> so;
    if (seed >= 0) so = static_cast<std::uint64_t>(seed);
    return smpmc::run_experiment_file(sub, config, out, std::cerr, workers, so);
}
