#pragma once

#include <cmath>
#include <cstddef>

namespace smpmc {

struct TimeGrid {
    double horizon = 1.0;   // T
    double step = 1e-3;     // h
    double discount = 1.0;  // r
    std::size_t steps = 0;  // N = ceil(T/h)
    double tail_tolerance = 1e-6;
    // Each increment is the sum of this many finer normals, so grids with
    // equal h / noise_substeps share one Brownian path.
    std::size_t noise_substeps = 1;

    static TimeGrid make(double T, double h, double r, double tail_tolerance = 1e-6,
                         std::size_t noise_substeps = 1);

    double time(std::size_t k) const { return static_cast<double>(k) * step; }
    std::size_t nodes() const { return steps + 1; }
    double tail_weight() const { return std::exp(-discount * horizon); }
    // slack for the horizon chosen to hit the tolerance exactly
    bool tail_within_tolerance() const { return tail_weight() <= tail_tolerance * (1.0 + 1e-9); }
    // nearest node to t, throws InvalidArgument outside [0, N]
    std::size_t index_of(double t) const;
};

// Horizon with e^{-rT} = tol.
inline double default_horizon(double r, double tol = 1e-6) { return -std::log(tol) / r; }

}  // namespace smpmc
