#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace smpmc::detail {

struct Stat {
    double sum = 0.0, sum2 = 0.0;
    std::size_t count = 0;
    void add(double v) {
        sum += v;
        sum2 += v * v;
        ++count;
    }
    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
    // standard error of the mean
    double se() const {
        if (count < 2) return 0.0;
        const double c = static_cast<double>(count), mu = sum / c;
        return std::sqrt(std::max(0.0, (sum2 / c - mu * mu) * c / (c - 1.0)) / c);
    }
};

}  // namespace smpmc::detail
