#include "smpmc/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "smpmc/errors.hpp"

namespace smpmc {

namespace {

class Section {
public:
    Section(YAML::Node node, std::string path, std::string source)
        : node_(std::move(node)), path_(std::move(path)), source_(std::move(source)) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) fail(node_, "expected a mapping");
    }

    [[noreturn]] void fail(const YAML::Node& at, const std::string& what, const std::string& key = "") const {
        std::ostringstream os;
        os << source_;
        const auto mk = at.Mark();
        if (mk.line >= 0) os << ":" << (mk.line + 1) << ":" << (mk.column + 1);
        os << ": field '" << field(key) << "': " << what;
        throw ConfigParseError(os.str());
    }

    std::string field(const std::string& key) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    bool has(const std::string& key) {
        if (!node_ || node_.IsNull()) return false;
        known_.insert(key);
        return static_cast<bool>(node_[key]);
    }

    YAML::Node raw(const std::string& key) {
        known_.insert(key);
        return node_[key];
    }

    double number(const std::string& key, double def) {
        if (!has(key)) return def;
        return as_number(raw(key), key);
    }

    double as_number(const YAML::Node& n, const std::string& key) const {
        if (!n.IsScalar()) fail(n, "expected a number", key);
        const std::string s = n.Scalar();
        if (s == "inf" || s == ".inf" || s == "infinity") return std::numeric_limits<double>::infinity();
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            fail(n, "expected a number, got '" + s + "'", key);
        }
    }

    std::size_t count(const std::string& key, std::size_t def, std::size_t min = 0) {
        if (!has(key)) return def;
        const YAML::Node n = raw(key);
        const double v = as_number(n, key);
        if (!(v >= static_cast<double>(min)) || v != std::floor(v) || v > 9.0e15)
            fail(n, "expected an integer >= " + std::to_string(min), key);
        return static_cast<std::size_t>(v);
    }

    std::string text(const std::string& key, const std::string& def) {
        if (!has(key)) return def;
        const YAML::Node n = raw(key);
        if (!n.IsScalar()) fail(n, "expected a string", key);
        return n.Scalar();
    }

    std::vector<double> list(const std::string& key, const std::vector<double>& def) {
        if (!has(key)) return def;
        const YAML::Node n = raw(key);
        if (n.IsScalar()) return {as_number(n, key)};
        if (!n.IsSequence()) fail(n, "expected a number or a list of numbers", key);
        std::vector<double> out;
        for (const auto& e : n) out.push_back(as_number(e, key));
        return out;
    }

    Section sub(const std::string& key) { return Section(has(key) ? raw(key) : YAML::Node(), field(key), source_); }

    const YAML::Node& node() const { return node_; }

    // every key of the mapping must have been read
    void finish() const {
        if (!node_ || node_.IsNull()) return;
        for (const auto& kv : node_) {
            const std::string k = kv.first.Scalar();
            if (!known_.count(k)) fail(kv.first, "unknown key", k);
        }
    }

private:
    YAML::Node node_;
    std::string path_, source_;
    std::set<std::string> known_;
};

void check(bool ok, Section& s, const std::string& key, const std::string& what) {
    if (ok) return;
    s.fail(s.has(key) ? s.raw(key) : s.node(), what, key);
}

}  // namespace

double lq_riccati(double a, double r) {
    const double c = 2.0 * a - r;
    return (c + std::sqrt(c * c + 4.0)) / 2.0;
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigParseError(source + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                               ": " + e.msg);
    }
    ExperimentConfig c;
    Section top(root, "", source);

    {
        Section m = top.sub("model");
        c.model = m.text("name", c.model);
        if (m.has("params")) {
            Section p = m.sub("params");
            if (p.node() && p.node().IsMap())
                for (const auto& kv : p.node()) {
                    const std::string k = kv.first.Scalar();
                    c.params[k] = p.number(k, 0.0);
                }
            p.finish();
        }
        m.finish();
    }
    {
        Section g = top.sub("grid");
        if (g.has("T")) c.grid.T = g.number("T", 0.0);
        c.grid.h = g.number("h", c.grid.h);
        if (g.has("r")) {
            const YAML::Node n = g.raw("r");
            if (n.IsScalar() && n.Scalar() == "auto")
                c.grid.r.reset();
            else
                c.grid.r = g.as_number(n, "r");
        }
        c.grid.tail_tolerance = g.number("tail_tolerance", c.grid.tail_tolerance);
        c.grid.noise_substeps = g.count("noise_substeps", c.grid.noise_substeps, 1);
        check(c.grid.h > 0.0, g, "h", "must be > 0");
        check(!c.grid.T || *c.grid.T > 0.0, g, "T", "must be > 0");
        check(!c.grid.r || *c.grid.r > 0.0, g, "r", "must be > 0 or \"auto\"");
        check(c.grid.tail_tolerance > 0.0 && c.grid.tail_tolerance < 1.0, g, "tail_tolerance", "must be in (0, 1)");
        g.finish();
    }
    c.paths = top.count("paths", c.paths, 1);
    c.seed = static_cast<std::uint64_t>(top.count("seed", c.seed));
    c.workers = top.count("workers", c.workers, 1);
    c.memory_mb = top.count("memory_mb", c.memory_mb, 1);
    c.x0 = top.list("x0", c.x0);
    {
        Section u = top.sub("control");
        c.control.kind = u.text("kind", c.control.kind);
        c.control.value = u.number("value", c.control.value);
        c.control.gain = u.number("gain", c.control.gain);
        c.control.offset = u.number("offset", c.control.offset);
        check(c.control.kind == "constant" || c.control.kind == "linear_feedback" || c.control.kind == "riccati", u,
              "kind", "expected constant, linear_feedback or riccati");
        u.finish();
    }
    {
        Section s = top.sub("spike");
        c.spike_t0 = s.number("t0", c.spike_t0);
        c.spike_v = s.number("v", c.spike_v);
        check(c.spike_t0 >= 0.0, s, "t0", "must be >= 0");
        s.finish();
    }
    c.eps = top.list("eps", c.eps);
    for (double e : c.eps) check(e > 0.0, top, "eps", "entries must be > 0");
    {
        Section o = top.sub("orders");
        const double k = o.number("k", c.order_k);
        check(k >= 1.0 && k == std::floor(k) && k <= 8.0, o, "k", "expected an integer in [1, 8]");
        c.order_k = static_cast<int>(k);
        if (o.has("rho")) c.order_rho = o.number("rho", 0.0);
        o.finish();
    }
    {
        Section a = top.sub("adjoint");
        try {
            c.adjoint.basis.family = parse_basis_family(a.text("basis", to_string(c.adjoint.basis.family)));
        } catch (const Error& e) {
            a.fail(a.raw("basis"), e.what(), "basis");
        }
        c.adjoint.basis.degree = static_cast<int>(a.count("degree", static_cast<std::size_t>(c.adjoint.basis.degree)));
        c.adjoint.truncation = a.number("truncation", c.adjoint.truncation);
        c.adjoint.picard_sweeps = static_cast<int>(a.count("picard_sweeps", 0));
        check(c.adjoint.truncation > 0.0, a, "truncation", "must be > 0");
        a.finish();
    }
    {
        Section s = top.sub("second_adjoint");
        try {
            c.second_adjoint.mode = parse_conditioning(s.text("mode", to_string(c.second_adjoint.mode)));
        } catch (const Error& e) {
            s.fail(s.raw("mode"), e.what(), "mode");
        }
        c.second_adjoint.inner_paths = s.count("inner_paths", c.second_adjoint.inner_paths);
        c.second_adjoint.outer_paths = s.count("outer_paths", c.second_adjoint.outer_paths, 1);
        c.second_adjoint.times = s.list("times", c.second_adjoint.times);
        try {
            c.second_adjoint.basis.family =
                parse_basis_family(s.text("basis", to_string(c.second_adjoint.basis.family)));
        } catch (const Error& e) {
            s.fail(s.raw("basis"), e.what(), "basis");
        }
        c.second_adjoint.basis.degree =
            static_cast<int>(s.count("degree", static_cast<std::size_t>(c.second_adjoint.basis.degree)));
        s.finish();
    }
    {
        Section s = top.sub("smp");
        c.smp.times = s.list("times", c.smp.times);
        if (s.has("v_grid")) {
            const YAML::Node n = s.raw("v_grid");
            if (n.IsMap()) {
                Section v = s.sub("v_grid");
                const double lo = v.number("lo", -1.0), hi = v.number("hi", 1.0);
                const std::size_t pts = v.count("points", 21, 1);
                check(hi >= lo, v, "hi", "must be >= lo");
                v.finish();
                c.smp.v_grid = ControlSet::interval(lo, hi, pts).points();
            } else {
                c.smp.v_grid = s.list("v_grid", {});
                check(!c.smp.v_grid.empty(), s, "v_grid", "must not be empty");
            }
        }
        if (s.has("tolerance")) {
            const YAML::Node n = s.raw("tolerance");
            c.smp.tolerance = (n.IsScalar() && n.Scalar() == "auto") ? -1.0 : s.as_number(n, "tolerance");
        }
        s.finish();
    }
    {
        Section p = top.sub("probe");
        c.probe.p = p.list("p", c.probe.p);
        c.probe.box.lo = p.list("lo", c.probe.box.lo);
        c.probe.box.hi = p.list("hi", c.probe.box.hi);
        c.probe.box.samples = p.count("samples", c.probe.box.samples, 1);
        c.probe.seed = static_cast<std::uint64_t>(p.count("seed", c.probe.seed));
        p.finish();
    }
    {
        Section o = top.sub("oracle");
        c.oracle.variant_sigma1 = o.number("variant_sigma1", c.oracle.variant_sigma1);
        c.oracle.variant_h = o.number("variant_h", c.oracle.variant_h);
        check(c.oracle.variant_h > 0.0, o, "variant_h", "must be > 0");
        o.finish();
    }
    {
        Section o = top.sub("output");
        c.output_dir = o.text("dir", c.output_dir);
        c.csv_max_paths = o.count("max_paths", c.csv_max_paths);
        o.finish();
    }
    top.finish();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigParseError(path + ": cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

namespace {

void emit_list(YAML::Emitter& e, const std::vector<double>& v) {
    e << YAML::Flow << YAML::BeginSeq;
    for (double x : v) e << x;
    e << YAML::EndSeq;
}

}  // namespace

std::string emit_config(const ExperimentConfig& c) {
    YAML::Emitter e;
    e.SetDoublePrecision(17);
    e << YAML::BeginMap;
    e << YAML::Key << "model" << YAML::Value << YAML::BeginMap << YAML::Key << "name" << YAML::Value << c.model;
    e << YAML::Key << "params" << YAML::Value << YAML::BeginMap;
    for (const auto& [k, v] : c.params) e << YAML::Key << k << YAML::Value << v;
    e << YAML::EndMap << YAML::EndMap;

    e << YAML::Key << "grid" << YAML::Value << YAML::BeginMap;
    if (c.grid.T) e << YAML::Key << "T" << YAML::Value << *c.grid.T;
    e << YAML::Key << "h" << YAML::Value << c.grid.h;
    e << YAML::Key << "r" << YAML::Value;
    if (c.grid.r)
        e << *c.grid.r;
    else
        e << "auto";
    e << YAML::Key << "tail_tolerance" << YAML::Value << c.grid.tail_tolerance;
    e << YAML::Key << "noise_substeps" << YAML::Value << c.grid.noise_substeps;
    e << YAML::EndMap;

    e << YAML::Key << "paths" << YAML::Value << c.paths;
    e << YAML::Key << "seed" << YAML::Value << c.seed;
    e << YAML::Key << "workers" << YAML::Value << c.workers;
    e << YAML::Key << "memory_mb" << YAML::Value << c.memory_mb;
    e << YAML::Key << "x0" << YAML::Value;
    emit_list(e, c.x0);

    e << YAML::Key << "control" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << c.control.kind;
    e << YAML::Key << "value" << YAML::Value << c.control.value;
    e << YAML::Key << "gain" << YAML::Value << c.control.gain;
    e << YAML::Key << "offset" << YAML::Value << c.control.offset;
    e << YAML::EndMap;

    e << YAML::Key << "spike" << YAML::Value << YAML::BeginMap << YAML::Key << "t0" << YAML::Value << c.spike_t0
      << YAML::Key << "v" << YAML::Value << c.spike_v << YAML::EndMap;
    e << YAML::Key << "eps" << YAML::Value;
    emit_list(e, c.eps);

    e << YAML::Key << "orders" << YAML::Value << YAML::BeginMap << YAML::Key << "k" << YAML::Value << c.order_k;
    if (c.order_rho) e << YAML::Key << "rho" << YAML::Value << *c.order_rho;
    e << YAML::EndMap;

    e << YAML::Key << "adjoint" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "basis" << YAML::Value << to_string(c.adjoint.basis.family);
    e << YAML::Key << "degree" << YAML::Value << c.adjoint.basis.degree;
    e << YAML::Key << "truncation" << YAML::Value;
    if (std::isinf(c.adjoint.truncation))
        e << "inf";
    else
        e << c.adjoint.truncation;
    e << YAML::Key << "picard_sweeps" << YAML::Value << c.adjoint.picard_sweeps;
    e << YAML::EndMap;

    e << YAML::Key << "second_adjoint" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "mode" << YAML::Value << to_string(c.second_adjoint.mode);
    e << YAML::Key << "inner_paths" << YAML::Value << c.second_adjoint.inner_paths;
    e << YAML::Key << "outer_paths" << YAML::Value << c.second_adjoint.outer_paths;
    e << YAML::Key << "times" << YAML::Value;
    emit_list(e, c.second_adjoint.times);
    e << YAML::Key << "basis" << YAML::Value << to_string(c.second_adjoint.basis.family);
    e << YAML::Key << "degree" << YAML::Value << c.second_adjoint.basis.degree;
    e << YAML::EndMap;

    e << YAML::Key << "smp" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "times" << YAML::Value;
    emit_list(e, c.smp.times);
    if (!c.smp.v_grid.empty()) {
        e << YAML::Key << "v_grid" << YAML::Value;
        emit_list(e, c.smp.v_grid);
    }
    e << YAML::Key << "tolerance" << YAML::Value;
    if (c.smp.tolerance < 0.0)
        e << "auto";
    else
        e << c.smp.tolerance;
    e << YAML::EndMap;

    e << YAML::Key << "probe" << YAML::Value << YAML::BeginMap;
    if (!c.probe.p.empty()) {
        e << YAML::Key << "p" << YAML::Value;
        emit_list(e, c.probe.p);
    }
    e << YAML::Key << "lo" << YAML::Value;
    emit_list(e, c.probe.box.lo);
    e << YAML::Key << "hi" << YAML::Value;
    emit_list(e, c.probe.box.hi);
    e << YAML::Key << "samples" << YAML::Value << c.probe.box.samples;
    e << YAML::Key << "seed" << YAML::Value << c.probe.seed;
    e << YAML::EndMap;

    e << YAML::Key << "oracle" << YAML::Value << YAML::BeginMap << YAML::Key << "variant_sigma1" << YAML::Value
      << c.oracle.variant_sigma1 << YAML::Key << "variant_h" << YAML::Value << c.oracle.variant_h << YAML::EndMap;
    e << YAML::Key << "output" << YAML::Value << YAML::BeginMap << YAML::Key << "dir" << YAML::Value << c.output_dir
      << YAML::Key << "max_paths" << YAML::Value << c.csv_max_paths << YAML::EndMap;
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

ControlModel make_model(const ExperimentConfig& cfg) { return builtin_model(cfg.model, cfg.params); }

ResolvedSetup resolve(ExperimentConfig& cfg, const ControlModel& model, std::vector<MonotonicityReport> reports) {
    ResolvedSetup out;
    if (!cfg.grid.r) {
        out.discount = recommend_discount(model, std::move(reports), cfg.probe.box, cfg.probe.seed);
        cfg.grid.r = out.discount->r;
    }
    if (!cfg.grid.T) cfg.grid.T = default_horizon(*cfg.grid.r, cfg.grid.tail_tolerance);
    if (cfg.x0.size() != model.n())
        throw ConfigParseError("field 'x0': expected " + std::to_string(model.n()) + " entries for model " + model.name);
    out.grid = TimeGrid::make(*cfg.grid.T, cfg.grid.h, *cfg.grid.r, cfg.grid.tail_tolerance, cfg.grid.noise_substeps);
    return out;
}

ControlLaw make_control(const ExperimentConfig& cfg, const ControlModel& model, double r) {
    if (cfg.control.kind == "constant") return ControlLaw::constant(cfg.control.value);
    if (cfg.control.kind == "linear_feedback") return ControlLaw::linear_feedback(cfg.control.gain, cfg.control.offset);
    if (cfg.control.kind == "riccati") {
        if (model.name != "lq_scalar") throw ConfigParseError("field 'control.kind': riccati needs model lq_scalar");
        const auto it = model.params.find("a");
        const double a = it == model.params.end() ? -1.0 : it->second;
        return ControlLaw::linear_feedback(-lq_riccati(a, r));
    }
    throw ConfigParseError("field 'control.kind': unknown control kind '" + cfg.control.kind + "'");
}

BundleOptions bundle_options(const ExperimentConfig& cfg) {
    BundleOptions o;
    o.workers = cfg.workers;
    o.memory_budget = cfg.memory_mb << 20;
    return o;
}

}  // namespace smpmc
