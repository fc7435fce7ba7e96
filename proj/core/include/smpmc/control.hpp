#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>

namespace smpmc {

class ControlLaw {
public:
    using Feedback = std::function<double(double t, std::span<const double> x)>;

    ControlLaw();

    static ControlLaw constant(double v);
    static ControlLaw open_loop(std::function<double(double)> u, std::string description = "open_loop");
    static ControlLaw feedback(Feedback f, std::string description = "feedback");
    // u = gain * x_1 + offset
    static ControlLaw linear_feedback(double gain, double offset = 0.0);

    double operator()(std::size_t step, double t, std::span<const double> x) const {
        if (step >= spike_begin_ && step < spike_end_) return spike_value_;
        return law_(t, x);
    }

    // Same law, overridden by v on grid steps [begin, end).
    ControlLaw with_spike(std::size_t begin, std::size_t end, double v) const;

    bool has_spike() const { return spike_end_ > spike_begin_; }
    std::size_t spike_begin() const { return spike_begin_; }
    std::size_t spike_end() const { return spike_end_; }
    double spike_value() const { return spike_value_; }
    const std::string& description() const { return description_; }

private:
    Feedback law_;
    std::string description_;
    std::size_t spike_begin_ = std::numeric_limits<std::size_t>::max();
    std::size_t spike_end_ = std::numeric_limits<std::size_t>::max();
    double spike_value_ = 0.0;
};

}  // namespace smpmc
