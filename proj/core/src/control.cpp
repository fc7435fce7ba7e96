#include "smpmc/control.hpp"

#include <cmath>
#include <sstream>

#include "smpmc/errors.hpp"
#include "smpmc/grid.hpp"

namespace smpmc {

TimeGrid TimeGrid::make(double T, double h, double r, double tail_tolerance, std::size_t noise_substeps) {
    if (!(T > 0.0)) throw InvalidArgument("horizon T must be > 0");
    if (!(h > 0.0) || h > T) throw InvalidArgument("step h must satisfy 0 < h <= T");
    if (!(r > 0.0)) throw InvalidArgument("discount r must be > 0");
    if (noise_substeps == 0) throw InvalidArgument("noise_substeps must be >= 1");
    TimeGrid g;
    g.horizon = T;
    g.step = h;
    g.discount = r;
    g.tail_tolerance = tail_tolerance;
    g.noise_substeps = noise_substeps;
    const double ratio = T / h;
    const double nearest = std::round(ratio);
    g.steps = static_cast<std::size_t>(std::abs(ratio - nearest) <= 1e-9 * ratio ? nearest : std::ceil(ratio));
    return g;
}

std::size_t TimeGrid::index_of(double t) const {
    const double k = std::round(t / step);
    if (k < 0.0 || k > static_cast<double>(steps))
        throw InvalidArgument("time " + std::to_string(t) + " outside the grid");
    return static_cast<std::size_t>(k);
}

ControlLaw::ControlLaw()
    : law_([](double, std::span<const double>) { return 0.0; }), description_("constant(0)") {}

ControlLaw ControlLaw::constant(double v) {
    ControlLaw c;
    c.law_ = [v](double, std::span<const double>) { return v; };
    std::ostringstream os;
    os.precision(17);
    os << "constant(" << v << ")";
    c.description_ = os.str();
    return c;
}

ControlLaw ControlLaw::open_loop(std::function<double(double)> u, std::string description) {
    ControlLaw c = constant(0.0);
    c.law_ = [u = std::move(u)](double t, std::span<const double>) { return u(t); };
    c.description_ = std::move(description);
    return c;
}

ControlLaw ControlLaw::feedback(Feedback f, std::string description) {
    ControlLaw c = constant(0.0);
    c.law_ = std::move(f);
    c.description_ = std::move(description);
    return c;
}

ControlLaw ControlLaw::linear_feedback(double gain, double offset) {
    std::ostringstream os;
    os.precision(17);
    os << "linear_feedback(gain=" << gain << ",offset=" << offset << ")";
    return feedback([gain, offset](double, std::span<const double> x) { return gain * x[0] + offset; }, os.str());
}

ControlLaw ControlLaw::with_spike(std::size_t begin, std::size_t end, double v) const {
    ControlLaw c = *this;
    if (end <= begin) {
        c.spike_begin_ = c.spike_end_ = std::numeric_limits<std::size_t>::max();
        return c;
    }
    c.spike_begin_ = begin;
    c.spike_end_ = end;
    c.spike_value_ = v;
    return c;
}

}  // namespace smpmc
