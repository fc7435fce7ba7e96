#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace smpmc {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator: every draw is a pure function of
// (seed, stream, path, index, component), so any path or step can be
// replayed without carrying generator state.
class NoiseSource {
public:
    NoiseSource() = default;
    explicit NoiseSource(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix64(mix64(seed) ^ (stream * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL))) {}

    std::uint64_t bits(std::uint64_t path, std::uint64_t index, std::uint64_t component,
                       std::uint64_t salt = 0) const {
        std::uint64_t h = mix64(key_ ^ (path * 0x9e3779b97f4a7c15ULL));
        h = mix64(h ^ (index * 0xc2b2ae3d27d4eb4fULL) ^ (component << 56));
        return mix64(h ^ salt);
    }

    // open interval (0,1), 53 bits
    double uniform(std::uint64_t path, std::uint64_t index, std::uint64_t component,
                   std::uint64_t salt = 0) const {
        return (static_cast<double>(bits(path, index, component, salt) >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal(std::uint64_t path, std::uint64_t index, std::uint64_t component) const {
        const double u1 = uniform(path, index, component, 1);
        const double u2 = uniform(path, index, component, 2);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    NoiseSource substream(std::uint64_t tag) const {
        NoiseSource s;
        s.key_ = mix64(key_ ^ mix64(tag + 0x2545f4914f6cdd1dULL));
        return s;
    }

private:
    std::uint64_t key_ = 0;
};

}  // namespace smpmc
