#include "smpmc/smp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "smpmc/csv.hpp"
#include "smpmc/errors.hpp"
#include "stats.hpp"

namespace smpmc {

using detail::Stat;

double hamiltonian(const ControlModel& model, std::span<const double> x, double u, std::span<const double> p,
                   std::span<const double> q) {
    const std::size_t n = model.n(), d = model.d();
    std::vector<double> b(n), s(n * d);
    model.b(x, u, b);
    model.sigma(x, u, s);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += p[i] * b[i];
    // Tr[q' sigma] = sum_ij q_ij sigma_ij
    for (std::size_t i = 0; i < n * d; ++i) v += q[i] * s[i];
    return v - model.f(x, u);
}

namespace {

// sum_j <P a^j, a^j> for an n x d matrix a
double trace_form(std::span<const double> P, const double* a, std::size_t n, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t l = 0; l < n; ++l) s += a[i + n * j] * P[i + n * l] * a[l + n * j];
    return s;
}

}  // namespace

double h_function(const ControlModel& model, std::span<const double> x, double u, const HAnchor& anchor) {
    const std::size_t n = model.n(), d = model.d();
    std::vector<double> sb(n * d), s(n * d);
    model.sigma(anchor.x, anchor.u, sb);
    model.sigma(x, u, s);
    for (std::size_t i = 0; i < n * d; ++i) s[i] -= sb[i];
    return hamiltonian(model, x, u, anchor.p, anchor.q) - 0.5 * trace_form(anchor.P, sb.data(), n, d) +
           0.5 * trace_form(anchor.P, s.data(), n, d);
}

std::size_t argmax_h(const ControlModel& model, const HAnchor& anchor, std::span<const double> grid) {
    if (grid.empty()) throw EmptyControlGrid("argmax over an empty control grid");
    std::size_t best = 0;
    double bv = h_function(model, anchor.x, grid[0], anchor);
    for (std::size_t i = 1; i < grid.size(); ++i) {
        const double v = h_function(model, anchor.x, grid[i], anchor);
        if (v > bv) {
            bv = v;
            best = i;
        }
    }
    return best;
}

std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::violated: return "violated";
        case Verdict::inconclusive: return "inconclusive";
        default: return "satisfied";
    }
}

SMPReport check_smp(const HessianOfH& hess, const std::vector<SecondAdjointEstimate>& estimates,
                    const SMPOptions& options) {
    const PathBundle& bundle = hess.bundle();
    const AdjointSolution& adj = hess.adjoint();
    const ControlModel& model = hess.model();
    const auto& g = bundle.grid();
    const std::size_t M = bundle.paths(), n = bundle.n(), d = bundle.d(), nn = n * n;
    const std::vector<double> grid = options.v_grid.empty() ? model.control_set.points() : options.v_grid;
    if (grid.empty()) throw EmptyControlGrid("the control grid of the SMP check is empty");
    const std::size_t V = grid.size();
    double step = std::numeric_limits<double>::infinity();
    {
        auto s = grid;
        std::sort(s.begin(), s.end());
        for (std::size_t i = 1; i < s.size(); ++i)
            if (s[i] > s[i - 1]) step = std::min(step, s[i] - s[i - 1]);
        if (!std::isfinite(step)) step = 0.0;
    }
    const Executor ex = bundle.executor();

    struct TimeData {
        std::size_t k;
        std::vector<double> lhs;  // M * V
        std::vector<double> u;
        double h_abs = 0.0;
    };
    std::vector<TimeData> data;
    for (double t : options.times) {
        const std::size_t k = g.index_of(t);
        const SecondAdjointEstimate* est = nullptr;
        for (const auto& e : estimates)
            if (e.k == k) est = &e;
        if (!est) throw InvalidArgument("no second adjoint estimate at t = " + num(g.time(k)));
        TimeData td;
        td.k = k;
        const std::vector<double> X = bundle.states_at(k);
        td.u = bundle.controls_at(k);
        std::vector<double> p(M * n), ph(M * n), q(M * n * d);
        adj.evaluate_node(k, X, td.u, p, ph, q);
        td.lhs.assign(M * V, 0.0);
        std::vector<double> habs(M, 0.0);
        ex.for_each(M, [&](std::size_t b, std::size_t e) {
            std::vector<double> P(nn), su(n * d), sv(n * d), bu(n), bv(n);
            for (std::size_t m = b; m < e; ++m) {
                const auto x = std::span<const double>(X).subspan(m * n, n);
                const auto pm = std::span<const double>(p).subspan(m * n, n);
                const auto qm = std::span<const double>(q).subspan(m * n * d, n * d);
                const double u = td.u[m];
                est->at(x, P);
                const double Hu = hamiltonian(model, x, u, pm, qm);
                habs[m] = std::abs(Hu);
                model.sigma(x, u, su);
                for (std::size_t vi = 0; vi < V; ++vi) {
                    const double v = grid[vi];
                    if (v == u) continue;  // both differences vanish identically
                    model.sigma(x, v, sv);
                    for (std::size_t i = 0; i < n * d; ++i) sv[i] -= su[i];
                    td.lhs[m * V + vi] = hamiltonian(model, x, v, pm, qm) - Hu + 0.5 * trace_form(P, sv.data(), n, d);
                }
            }
        });
        for (double v : habs) td.h_abs += v;
        td.h_abs /= static_cast<double>(M);
        data.push_back(std::move(td));
    }

    SMPReport rep;
    for (const auto& td : data) rep.h_scale += td.h_abs;
    if (!data.empty()) rep.h_scale /= static_cast<double>(data.size());
    rep.tolerance = options.tolerance >= 0.0 ? options.tolerance : 1e-3 * (1.0 + rep.h_scale);
    rep.worst_lhs = -std::numeric_limits<double>::infinity();

    for (const auto& td : data) {
        const double t = g.time(td.k);
        std::vector<Stat> st(V);
        std::vector<std::size_t> above(V, 0);
        Stat gap, ubar;
        std::size_t near = 0;
        for (std::size_t m = 0; m < M; ++m) {
            std::size_t best = 0;
            double bv = 0.0;
            for (std::size_t vi = 0; vi < V; ++vi) {
                const double l = td.lhs[m * V + vi];
                st[vi].add(l);
                if (l > rep.tolerance) ++above[vi];
                if (vi == 0 || l > bv) {
                    bv = l;
                    best = vi;
                }
            }
            const double gp = std::abs(grid[best] - td.u[m]);
            gap.add(gp);
            ubar.add(td.u[m]);
            if (gp <= step * (1.0 + 1e-9)) ++near;
        }
        SMPTimeSummary ts;
        ts.t = t;
        ts.k = td.k;
        ts.mean_control = ubar.mean();
        ts.mean_abs_gap = gap.mean();
        ts.within_one_step = static_cast<double>(near) / static_cast<double>(M);
        std::size_t best = 0;
        for (std::size_t vi = 0; vi < V; ++vi) {
            SMPRow row;
            row.t = t;
            row.k = td.k;
            row.v = grid[vi];
            row.lhs = st[vi].mean();
            row.std_err = st[vi].se();
            row.fraction_above_tolerance = static_cast<double>(above[vi]) / static_cast<double>(M);
            if (row.lhs > 3.0 * row.std_err + rep.tolerance)
                row.verdict = Verdict::violated;
            else if (row.std_err > 0.0 && std::abs(row.lhs) <= 3.0 * row.std_err)
                row.verdict = Verdict::inconclusive;
            else
                row.verdict = Verdict::satisfied;
            switch (row.verdict) {
                case Verdict::violated: ++rep.violated; break;
                case Verdict::inconclusive: ++rep.inconclusive; break;
                default: ++rep.satisfied;
            }
            const double score = row.lhs - 3.0 * row.std_err;
            if (score > rep.worst_lhs) {
                rep.worst_lhs = score;
                rep.worst_t = t;
                rep.worst_v = row.v;
            }
            if (row.lhs > st[best].mean()) best = vi;
            rep.rows.push_back(row);
        }
        ts.argmax_of_mean = grid[best];
        rep.times.push_back(ts);
    }
    if (rep.rows.empty()) rep.worst_lhs = 0.0;
    return rep;
}

SMPReport check_smp(const ControlModel& model, const ControlLaw& candidate, const TimeGrid& grid, std::size_t M,
                    std::uint64_t seed, std::vector<double> x0, const SMPOptions& options,
                    const BundleOptions& bundle_options) {
    if ((options.v_grid.empty() ? model.control_set.points() : options.v_grid).empty())
        throw EmptyControlGrid("the control grid of the SMP check is empty");
    PathBundle bundle = simulate_state(model, candidate, grid, M, seed, std::move(x0), bundle_options);
    AdjointSolution adj = solve_first_adjoint(model, bundle, options.adjoint);
    HessianOfH hess(adj);
    std::vector<std::size_t> idx;
    for (double t : options.times) idx.push_back(grid.index_of(t));
    auto est = estimate_P(hess, idx, options.second_adjoint);
    return check_smp(hess, est, options);
}

void write_smp_csv(std::ostream& os, const SMPReport& report) {
    os << "t,v,lhs,std_err,verdict\n";
    for (const auto& r : report.rows)
        os << num(r.t) << ',' << num(r.v) << ',' << num(r.lhs) << ',' << num(r.std_err) << ',' << to_string(r.verdict)
           << '\n';
}

void write_smp_summary(std::ostream& os, const SMPReport& report) {
    os << "tolerance=" << num(report.tolerance) << '\n'
       << "h_scale=" << num(report.h_scale) << '\n'
       << "satisfied=" << report.satisfied << '\n'
       << "violated=" << report.violated << '\n'
       << "inconclusive=" << report.inconclusive << '\n'
       << "worst_lhs_minus_3se=" << num(report.worst_lhs) << '\n'
       << "worst_t=" << num(report.worst_t) << '\n'
       << "worst_v=" << num(report.worst_v) << '\n';
    for (const auto& t : report.times)
        os << "argmax t=" << num(t.t) << " mean_u=" << num(t.mean_control) << " argmax_of_mean=" << num(t.argmax_of_mean)
           << " mean_abs_gap=" << num(t.mean_abs_gap) << " within_one_step=" << num(t.within_one_step) << '\n';
}

}  // namespace smpmc
