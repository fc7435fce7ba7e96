#include "smpmc/experiment.hpp"

#include <Eigen/Core>
#include <boost/version.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "smpmc/csv.hpp"
#include "smpmc/errors.hpp"
#include "smpmc/smp.hpp"

#ifndef SMPMC_VERSION
#define SMPMC_VERSION "unknown"
#endif

namespace smpmc {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> s{"probe",          "simulate",  "orders",   "adjoint",
                                            "second-adjoint", "smp-check", "oracle-lq"};
    return s;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string join(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + num(v[i]);
    return s;
}

struct Progress {
    std::ostream* os;
    void operator()(const std::string& s) const {
        if (os) *os << s << std::endl;
    }
};

// -------------------------------------------------------------------------------------------
// LQ oracle

CriterionResult criterion(int id, std::string name, double measured, double threshold, bool pass,
                          std::string detail) {
    return {id, std::move(name), measured, threshold, pass, std::move(detail)};
}

}  // namespace

std::vector<CriterionResult> run_lq_oracle(const LQOracleSettings& s, std::ostream* log) {
    Progress say{log};
    std::vector<CriterionResult> out;
    const double Pstar = lq_riccati(s.a, s.r);
    const auto model = builtin_model("lq_scalar", {{"a", s.a}, {"sigma0", s.sigma0}});
    const auto grid = TimeGrid::make(s.T, s.h, s.r);
    std::vector<std::size_t> idx;
    for (double t : s.times) idx.push_back(grid.index_of(t));
    auto want = [&](std::initializer_list<int> ids) {
        for (int id : ids)
            if (std::find(s.criteria.begin(), s.criteria.end(), id) != s.criteria.end()) return true;
        return false;
    };

    // 1, 2, 5 share the optimal run
    if (want({1, 2, 5})) {
        const auto t0 = Clock::now();
        say("oracle: optimal feedback, M = " + std::to_string(s.paths) + ", h = " + num(s.h));
        const auto bundle =
            simulate_state(model, ControlLaw::linear_feedback(-Pstar), grid, s.paths, s.seed, {s.x0}, s.bundle);
        const auto adj = solve_first_adjoint(model, bundle);
        const HessianOfH hess(adj);
        const auto est = estimate_P(hess, idx);
        SMPOptions so;
        so.times = s.times;
        const auto opt = check_smp(hess, est, so);
        const double t_opt = seconds_since(t0);

        if (want({1})) {
            say("oracle: zero control");
            const auto t1 = Clock::now();
            const auto zero =
                check_smp(model, ControlLaw::constant(0.0), grid, s.paths, s.seed, {s.x0}, so, s.bundle);
            const double t_zero = seconds_since(t1);
            std::ostringstream d;
            d << "optimal: violated=" << opt.violated << " inconclusive=" << opt.inconclusive
              << " worst_lhs_minus_3se=" << num(opt.worst_lhs) << "; zero control: violated=" << zero.violated
              << " worst_lhs_minus_3se=" << num(zero.worst_lhs) << "; seconds=" << num(t_opt + t_zero);
            out.push_back(criterion(1, "LQ SMP verdicts", static_cast<double>(opt.violated), 0.0,
                                    opt.violated == 0 && zero.violated >= 1, d.str()));
        }

        const auto fit = regress_p_on_state(adj, grid.index_of(1.0));
        const double target = -2.0 * Pstar;
        const double rel = std::abs(fit.slope - target) / std::abs(target);
        out.push_back(criterion(2, "adjoint slope at t = 1", fit.slope, target, rel <= 0.05,
                                "relative error " + num(rel) + ", r2 " + num(fit.r2)));

        double worst = 0.0;
        std::ostringstream d5;
        const double lam = s.r - 2.0 * s.a;
        for (const auto& e : est) {
            const double exact = -2.0 * (1.0 - std::exp(-lam * (s.T - e.t))) / lam;
            const double tol = 3.0 * e.std_error_matrix[0] + 2.0 * s.h;
            const double ratio = std::abs(e.matrix[0] - exact) / tol;
            worst = std::max(worst, ratio);
            d5 << "t=" << num(e.t) << " P=" << num(e.matrix[0]) << " exact=" << num(exact) << " tol=" << num(tol)
               << "; ";
        }
        out.push_back(criterion(5, "second adjoint closed form", worst, 1.0, worst <= 1.0, d5.str()));
    }

    // 3, 6 on the control-in-diffusion variant
    if (want({3, 6})) {
        say("oracle: control-in-diffusion variant, sigma1 = " + num(s.variant_sigma1));
        const auto vm =
            builtin_model("lq_scalar", {{"a", s.a}, {"sigma0", s.sigma0}, {"sigma1", s.variant_sigma1}});
        const auto vg = TimeGrid::make(s.T, s.variant_h, s.r);
        const auto bundle =
            simulate_state(vm, ControlLaw::linear_feedback(-Pstar), vg, s.paths, s.seed + 1, {s.x0}, s.bundle);
        const auto adj = solve_first_adjoint(vm, bundle);
        std::vector<RealizedSpike> spikes;
        for (double e : s.eps) spikes.push_back(realize_spike(vg, {s.spike_t0, e, s.spike_v}));
        const auto pairs = check_dualities(vm, adj, spikes);
        bool ok = true;
        double worst = 0.0;
        std::ostringstream d3;
        for (const auto& p : pairs)
            for (const auto* r : {&p.yp, &p.zp}) {
                ok = ok && r->pass;
                if (r->tolerance > 0.0) worst = std::max(worst, std::abs(r->diff) / r->tolerance);
                d3 << r->name << "@" << num(r->epsilon) << ' ' << r->verdict() << "; ";
            }
        out.push_back(criterion(3, "first-order dualities", worst, 1.0, ok, d3.str()));

        const HessianOfH hess(adj);
        std::vector<std::size_t> pidx{vg.index_of(s.spike_t0)};
        for (double e : s.eps) pidx.push_back(vg.index_of(s.spike_t0 + e));
        const auto est = estimate_P(hess, pidx);
        const auto sd = check_spike_duality(hess, est, spikes);
        std::ostringstream d6;
        for (const auto& row : sd.rows)
            d6 << "eps=" << num(row.identity.epsilon) << " ratio=" << num(row.ratio) << "+-"
               << num(row.ratio_std_error) << "; ";
        out.push_back(criterion(6, "spike duality residual / eps", sd.rows.empty() ? 0.0 : sd.rows.back().ratio, 0.0,
                                sd.decreasing, d6.str()));
    }

    // 9: deterministic closed loop against the closed-form cost
    if (want({9})) {
        say("oracle: cost convergence in h");
        const auto dm = builtin_model("lq_scalar", {{"a", s.a}, {"sigma0", 0.0}});
        const double exact = (1.0 + Pstar * Pstar) * s.x0 * s.x0 / (s.r - 2.0 * (s.a - Pstar));
        std::vector<double> err;
        std::ostringstream d9;
        for (double h : {0.04, 0.02, 0.01, 0.005}) {
            const auto g = TimeGrid::make(40.0, h, s.r);
            const auto b = simulate_state(dm, ControlLaw::linear_feedback(-Pstar), g, 2, s.seed, {s.x0});
            err.push_back(std::abs(estimate_cost(dm, b).value - exact));
            d9 << "h=" << num(h) << " err=" << num(err.back()) << "; ";
        }
        double worst = std::numeric_limits<double>::infinity();
        for (std::size_t i = 1; i < err.size(); ++i) worst = std::min(worst, err[i - 1] / err[i]);
        out.push_back(criterion(9, "cost error decay per halving", worst, 1.7, worst >= 1.7, d9.str()));
    }
    std::erase_if(out, [&](const CriterionResult& c) { return !want({c.id}); });
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
}

LQOracleSettings lq_oracle_settings(const ExperimentConfig& cfg) {
    LQOracleSettings s;
    auto get = [&](const char* k, double def) {
        const auto it = cfg.params.find(k);
        return it == cfg.params.end() ? def : it->second;
    };
    s.a = get("a", s.a);
    s.sigma0 = get("sigma0", s.sigma0);
    if (cfg.grid.r) s.r = *cfg.grid.r;
    if (cfg.grid.T) s.T = *cfg.grid.T;
    s.h = cfg.grid.h;
    s.paths = cfg.paths;
    s.seed = cfg.seed;
    if (!cfg.x0.empty()) s.x0 = cfg.x0[0];
    s.times = cfg.smp.times;
    s.variant_sigma1 = cfg.oracle.variant_sigma1;
    s.variant_h = cfg.oracle.variant_h;
    s.eps = cfg.eps;
    s.spike_t0 = cfg.spike_t0;
    s.spike_v = cfg.spike_v;
    s.bundle = bundle_options(cfg);
    return s;
}

// -------------------------------------------------------------------------------------------
// subcommands

namespace {

// stage name travels with the exception to the manifest
struct Run {
    fs::path dir;
    std::string stage = "config";
    std::vector<std::string> outputs;
    json results = json::object();
    Progress say;

    void write(const std::string& name, const std::string& content) {
        const std::string prev = stage;
        stage = "write";
        std::ofstream f(dir / name, std::ios::binary);
        f << content;
        if (!f) throw InvalidArgument("cannot write " + (dir / name).string());
        outputs.push_back(name);
        stage = prev;
    }
    template <class F>
    void write_with(const std::string& name, F&& fill) {
        std::ostringstream os;
        fill(os);
        write(name, os.str());
    }
};

void write_monotonicity(std::ostream& os, const std::vector<MonotonicityReport>& reps) {
    os << "name,p,c_p,samples,worst_x,worst_y,worst_u\n";
    for (const auto& r : reps)
        os << r.model << ',' << num(r.p) << ',' << num(r.c_p_estimate) << ',' << r.sample_count << ','
           << join(r.worst_x) << ',' << join(r.worst_y) << ',' << num(r.worst_u) << '\n';
}

std::vector<MonotonicityReport> run_probe(Run& run, ExperimentConfig& cfg, const ControlModel& model) {
    run.stage = "probe";
    std::vector<double> ps = cfg.probe.p.empty() ? discount_indices(model.growth_m, model.growth_l) : cfg.probe.p;
    if (std::find(ps.begin(), ps.end(), 0.5) == ps.end()) ps.insert(ps.begin(), 0.5);
    std::vector<MonotonicityReport> reps;
    for (double p : ps) {
        run.say("probe: p = " + num(p));
        reps.push_back(probe_joint_monotonicity(model, p, cfg.probe.box, cfg.probe.seed, cfg.workers));
    }
    run.write_with("monotonicity.csv", [&](std::ostream& os) { write_monotonicity(os, reps); });
    const auto rec = recommend_discount(model, reps, cfg.probe.box, cfg.probe.seed);
    run.write_with("discount.csv", [&](std::ostream& os) {
        os << "r,max_c,binding_p,floor_applied,all_nonpositive,indices\n"
           << num(rec.r) << ',' << num(rec.max_c) << ',' << num(rec.binding_p) << ',' << rec.floor_applied << ','
           << rec.all_nonpositive << ',' << join(rec.indices) << '\n';
    });
    run.results["c_half"] = reps.front().c_p_estimate;
    run.results["recommended_r"] = rec.r;
    return rec.reports;
}

void run_simulate(Run& run, const ExperimentConfig& cfg, const ControlModel& model, const TimeGrid& grid,
                  const ControlLaw& control) {
    run.stage = "simulate";
    const auto bundle = simulate_state(model, control, grid, cfg.paths, cfg.seed, cfg.x0, bundle_options(cfg));
    const auto cost = estimate_cost(model, bundle);
    const auto noise = check_increments(bundle);
    run.write_with("cost.csv", [&](std::ostream& os) {
        os << "value,std_error,paths,tail_bound,noise_ok\n"
           << num(cost.value) << ',' << num(cost.std_error) << ',' << cost.paths << ',' << num(cost.tail_bound) << ','
           << noise.ok << '\n';
    });
    const auto mom = discounted_second_moment(bundle, grid.discount);
    run.write_with("moments.csv", [&](std::ostream& os) {
        os << "t,moment,std_error\n";
        for (std::size_t k = 0; k < mom.t.size(); ++k)
            os << num(mom.t[k]) << ',' << num(mom.value[k]) << ',' << num(mom.std_error[k]) << '\n';
    });
    // paths are indexed noise streams, so the first paths of a small bundle are the first paths of the big one
    const std::size_t keep = std::min(cfg.csv_max_paths, cfg.paths);
    if (keep > 0) {
        const auto small = simulate_state(model, control, grid, keep, cfg.seed, cfg.x0, bundle_options(cfg));
        run.write_with("paths.csv", [&](std::ostream& os) { small.write_csv(os); });
    }
    run.results["cost"] = cost.value;
    run.results["cost_std_error"] = cost.std_error;
}

void write_slopes(std::ostream& os, const OrderReport& rep) {
    os << "quantity,slope,std_error,ci_low,ci_high,expected,strict,degenerate\n";
    for (const auto& s : rep.slopes)
        os << s.quantity << ',' << num(s.slope) << ',' << num(s.std_error) << ',' << num(s.ci_low) << ','
           << num(s.ci_high) << ',' << num(s.expected) << ',' << s.strict << ',' << s.degenerate << '\n';
}

void write_cost_expansion(std::ostream& os, const std::vector<CostExpansion>& ce) {
    os << "eps,linear_term,quadratic_term,expansion,direct,direct_std_error,residual,residual_std_error\n";
    for (const auto& c : ce)
        os << num(c.epsilon) << ',' << num(c.linear_term) << ',' << num(c.quadratic_term) << ',' << num(c.expansion)
           << ',' << num(c.direct) << ',' << num(c.direct_std_error) << ',' << num(c.residual) << ','
           << num(c.residual_std_error) << '\n';
}

std::vector<RealizedSpike> spikes_of(const ExperimentConfig& cfg, const TimeGrid& grid) {
    std::vector<RealizedSpike> s;
    for (double e : cfg.eps) s.push_back(realize_spike(grid, {cfg.spike_t0, e, cfg.spike_v}));
    return s;
}

void run_orders(Run& run, const ExperimentConfig& cfg, const ControlModel& model, const TimeGrid& grid,
                const ControlLaw& control) {
    run.stage = "simulate";
    const auto bundle = simulate_state(model, control, grid, cfg.paths, cfg.seed, cfg.x0, bundle_options(cfg));
    run.stage = "orders";
    const auto rep =
        estimate_expansion_orders(model, bundle, {cfg.spike_t0, 0.0, cfg.spike_v}, cfg.eps, cfg.order_k, cfg.order_rho);
    run.write_with("orders.csv", [&](std::ostream& os) { write_order_csv(os, rep); });
    run.write_with("slopes.csv", [&](std::ostream& os) { write_slopes(os, rep); });
    const auto spikes = spikes_of(cfg, grid);
    const auto ce = expand_cost(model, bundle, spikes);
    run.write_with("cost_expansion.csv", [&](std::ostream& os) { write_cost_expansion(os, ce); });
    for (const auto& s : rep.slopes) run.results["slope_" + s.quantity] = s.slope;
}

void write_adjoint_diagnostics(std::ostream& os, const AdjointSolution& adj) {
    os << "k,t,basis_size,condition,r2_p,r2_q,low_r2\n";
    const auto& g = adj.bundle().grid();
    const auto& dg = adj.diagnostics();
    for (std::size_t k = 0; k < dg.size(); ++k)
        os << k << ',' << num(g.time(k)) << ',' << dg[k].basis_size << ',' << num(dg[k].condition) << ','
           << num(dg[k].r2_p) << ',' << num(dg[k].r2_q) << ',' << dg[k].low_r2 << '\n';
}

void run_adjoint(Run& run, const ExperimentConfig& cfg, const ControlModel& model, const TimeGrid& grid,
                 const ControlLaw& control) {
    run.stage = "simulate";
    const auto bundle = simulate_state(model, control, grid, cfg.paths, cfg.seed, cfg.x0, bundle_options(cfg));
    run.stage = "adjoint";
    const auto adj = solve_first_adjoint(model, bundle, cfg.adjoint);
    run.write_with("adjoint.csv", [&](std::ostream& os) { adj.write_csv(os, cfg.csv_max_paths); });
    run.write_with("adjoint_diagnostics.csv", [&](std::ostream& os) { write_adjoint_diagnostics(os, adj); });
    const auto spikes = spikes_of(cfg, grid);
    const auto pairs = check_dualities(model, adj, spikes);
    std::vector<IdentityReport> ids;
    bool pass = true;
    for (const auto& p : pairs) {
        ids.push_back(p.yp);
        ids.push_back(p.zp);
        pass = pass && p.yp.pass && p.zp.pass;
    }
    run.write_with("identities.csv", [&](std::ostream& os) { write_identity_csv(os, ids); });
    run.results["identities_pass"] = pass;
}

void run_second_adjoint(Run& run, const ExperimentConfig& cfg, const ControlModel& model, const TimeGrid& grid,
                        const ControlLaw& control) {
    run.stage = "simulate";
    const auto bundle = simulate_state(model, control, grid, cfg.paths, cfg.seed, cfg.x0, bundle_options(cfg));
    run.stage = "adjoint";
    const auto adj = solve_first_adjoint(model, bundle, cfg.adjoint);
    run.stage = "second_adjoint";
    const HessianOfH hess(adj);
    SecondAdjointOptions so;
    so.mode = cfg.second_adjoint.mode;
    so.basis = cfg.second_adjoint.basis;
    so.inner_paths = cfg.second_adjoint.inner_paths;
    so.outer_paths = cfg.second_adjoint.outer_paths;
    std::vector<std::size_t> idx;
    for (double t : cfg.second_adjoint.times) idx.push_back(grid.index_of(t));
    const auto est = estimate_P(hess, idx, so);
    run.write_with("second_adjoint.csv", [&](std::ostream& os) { write_second_adjoint_csv(os, est); });
    if (est.size() >= 3) {
        std::vector<double> e1(model.n(), 0.0);
        e1[0] = 1.0;
        const auto pr = check_P_properties(est, e1, e1);
        run.write_with("p_properties.csv", [&](std::ostream& os) {
            os << "t,norm2,norm2_std_error\n";
            for (std::size_t i = 0; i < pr.t.size(); ++i)
                os << num(pr.t[i]) << ',' << num(pr.norm2[i]) << ',' << num(pr.norm2_std_error[i]) << '\n';
        });
        run.results["max_asymmetry_ratio"] = pr.max_asymmetry_ratio;
        run.results["modulus_decreasing"] = pr.modulus_decreasing;
    }
    // spike duality with P at the spike ends
    const auto spikes = spikes_of(cfg, grid);
    std::vector<std::size_t> sidx{grid.index_of(cfg.spike_t0)};
    for (double e : cfg.eps) sidx.push_back(grid.index_of(cfg.spike_t0 + e));
    const auto sest = estimate_P(hess, sidx, so);
    const auto sd = check_spike_duality(hess, sest, spikes);
    run.write_with("spike_duality.csv", [&](std::ostream& os) {
        os << "eps,lhs,rhs,diff,std_err,ratio,ratio_std_error,decreasing\n";
        for (const auto& r : sd.rows)
            os << num(r.identity.epsilon) << ',' << num(r.identity.lhs) << ',' << num(r.identity.rhs) << ','
               << num(r.identity.diff) << ',' << num(r.identity.std_err) << ',' << num(r.ratio) << ','
               << num(r.ratio_std_error) << ',' << sd.decreasing << '\n';
    });
    run.results["spike_duality_decreasing"] = sd.decreasing;
}

void run_smp(Run& run, const ExperimentConfig& cfg, const ControlModel& model, const TimeGrid& grid,
             const ControlLaw& control) {
    run.stage = "smp";
    SMPOptions so;
    so.times = cfg.smp.times;
    so.v_grid = cfg.smp.v_grid;
    so.tolerance = cfg.smp.tolerance;
    so.adjoint = cfg.adjoint;
    so.second_adjoint.mode = cfg.second_adjoint.mode;
    so.second_adjoint.basis = cfg.second_adjoint.basis;
    so.second_adjoint.inner_paths = cfg.second_adjoint.inner_paths;
    so.second_adjoint.outer_paths = cfg.second_adjoint.outer_paths;
    const auto rep = check_smp(model, control, grid, cfg.paths, cfg.seed, cfg.x0, so, bundle_options(cfg));
    run.write_with("smp.csv", [&](std::ostream& os) { write_smp_csv(os, rep); });
    run.write_with("smp_summary.csv", [&](std::ostream& os) {
        os << "key,value\n"
           << "tolerance," << num(rep.tolerance) << "\nh_scale," << num(rep.h_scale) << "\nsatisfied,"
           << rep.satisfied << "\nviolated," << rep.violated << "\ninconclusive," << rep.inconclusive
           << "\nworst_lhs_minus_3se," << num(rep.worst_lhs) << "\nworst_t," << num(rep.worst_t) << "\nworst_v,"
           << num(rep.worst_v) << '\n';
    });
    run.write_with("smp_argmax.csv", [&](std::ostream& os) {
        os << "t,mean_u,argmax_of_mean,mean_abs_gap,within_one_step\n";
        for (const auto& t : rep.times)
            os << num(t.t) << ',' << num(t.mean_control) << ',' << num(t.argmax_of_mean) << ','
               << num(t.mean_abs_gap) << ',' << num(t.within_one_step) << '\n';
    });
    run.results["violated"] = rep.violated;
    run.results["inconclusive"] = rep.inconclusive;
    run.results["satisfied"] = rep.satisfied;
}

bool run_oracle(Run& run, const ExperimentConfig& cfg) {
    run.stage = "oracle";
    const auto rows = run_lq_oracle(lq_oracle_settings(cfg), run.say.os);
    bool all = true;
    run.write_with("oracle_lq.csv", [&](std::ostream& os) {
        os << "criterion,name,measured,threshold,verdict,detail\n";
        for (const auto& r : rows) {
            all = all && r.pass;
            os << r.id << ',' << r.name << ',' << num(r.measured) << ',' << num(r.threshold) << ','
               << (r.pass ? "PASS" : "FAIL") << ",\"" << r.detail << "\"\n";
        }
    });
    for (const auto& r : rows) {
        run.say((r.pass ? "PASS " : "FAIL ") + std::to_string(r.id) + " " + r.name + ": " + r.detail);
        run.results["criterion_" + std::to_string(r.id)] = r.pass;
    }
    return all;
}

json versions() {
    return {{"smpmc", SMPMC_VERSION},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"boost", BOOST_LIB_VERSION},
            {"compiler", __VERSION__}};
}

void write_manifest(const Run& run, const std::string& subcommand, const std::string& status, const std::string& error,
                    const ExperimentConfig* cfg, bool wrote_config, double wall) {
    json m;
    m["status"] = status;
    m["subcommand"] = subcommand;
    if (status != "ok") {
        m["failing_stage"] = run.stage;
        m["error"] = error;
    }
    if (cfg) {
        m["seed"] = cfg->seed;
        if (wrote_config) m["resolved_config"] = "resolved_config.yaml";
    }
    m["versions"] = versions();
    m["outputs"] = run.outputs;
    m["results"] = run.results;
    m["wall_time_seconds"] = wall;
    std::ofstream f(run.dir / "manifest.json", std::ios::binary);
    f << m.dump(2) << '\n';
}

}  // namespace

int run_experiment(const std::string& subcommand, ExperimentConfig cfg, const fs::path& out_dir, std::ostream& log) {
    const auto t0 = Clock::now();
    Run run{out_dir, "config", {}, json::object(), Progress{&log}};
    bool wrote_config = false;
    auto fail = [&](const std::string& what, int code) {
        log << "error in stage '" << run.stage << "': " << what << std::endl;
        try {
            fs::create_directories(out_dir);
            write_manifest(run, subcommand, "failed", what, &cfg, wrote_config, seconds_since(t0));
        } catch (...) {
        }
        return code;
    };
    try {
        if (std::find(subcommands().begin(), subcommands().end(), subcommand) == subcommands().end())
            throw ConfigParseError("unknown subcommand '" + subcommand + "'");
        fs::create_directories(out_dir);
        // earlier outputs of another run would read as this run's
        for (const auto& e : fs::directory_iterator(out_dir))
            if (e.is_regular_file() && (e.path().extension() == ".csv" || e.path().filename() == "manifest.json"))
                fs::remove(e.path());

        run.stage = "resolve";
        bool passed = true;
        if (subcommand == "oracle-lq") {
            if (!cfg.grid.r) cfg.grid.r = 0.5;
            if (!cfg.grid.T) cfg.grid.T = 12.0;
            run.write("resolved_config.yaml", emit_config(cfg));
            wrote_config = true;
            passed = run_oracle(run, cfg);
        } else {
            const ControlModel model = make_model(cfg);
            std::vector<MonotonicityReport> probed;
            // the probe's own reports feed an automatic discount
            if (subcommand == "probe") probed = run_probe(run, cfg, model);
            run.stage = "resolve";
            const ResolvedSetup setup = resolve(cfg, model, probed);
            if (setup.discount) run.say("resolved r = " + num(setup.discount->r) + " (auto)");
            run.write("resolved_config.yaml", emit_config(cfg));
            wrote_config = true;
            const ControlLaw control = make_control(cfg, model, *cfg.grid.r);
            if (subcommand == "simulate")
                run_simulate(run, cfg, model, setup.grid, control);
            else if (subcommand == "orders")
                run_orders(run, cfg, model, setup.grid, control);
            else if (subcommand == "adjoint")
                run_adjoint(run, cfg, model, setup.grid, control);
            else if (subcommand == "second-adjoint")
                run_second_adjoint(run, cfg, model, setup.grid, control);
            else if (subcommand == "smp-check")
                run_smp(run, cfg, model, setup.grid, control);
        }
        run.stage = "manifest";
        write_manifest(run, subcommand, passed ? "ok" : "criteria_failed", "", &cfg, true, seconds_since(t0));
        return passed ? kExitOk : kExitCriteria;
    } catch (const ConfigParseError& e) {
        return fail(e.what(), kExitConfig);
    } catch (const std::exception& e) {
        return fail(e.what(), kExitFailed);
    }
}

int run_experiment_file(const std::string& subcommand, const std::string& config_path, const fs::path& out_dir,
                        std::ostream& log, std::size_t workers_override, std::optional<std::uint64_t> seed_override) {
    ExperimentConfig cfg;
    try {
        cfg = load_config(config_path);
    } catch (const std::exception& e) {
        log << "error in stage 'config': " << e.what() << std::endl;
        Run run{out_dir, "config", {}, json::object(), Progress{&log}};
        try {
            fs::create_directories(out_dir);
            write_manifest(run, subcommand, "failed", e.what(), nullptr, false, 0.0);
        } catch (...) {
        }
        return kExitConfig;
    }
    if (workers_override > 0) cfg.workers = workers_override;
    if (seed_override) cfg.seed = *seed_override;
    return run_experiment(subcommand, std::move(cfg), out_dir, log);
}

}  // namespace smpmc
