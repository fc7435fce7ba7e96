#pragma once

#include <cstddef>
#include <functional>

namespace smpmc {

// Splits [0, n) into fixed chunks whose boundaries do not depend on the
// worker count, so per-chunk partial results can be merged in index order.
class Executor {
public:
    explicit Executor(std::size_t workers = 1, std::size_t chunk = 4096)
        : workers_(workers == 0 ? 1 : workers), chunk_(chunk == 0 ? 1 : chunk) {}

    std::size_t workers() const { return workers_; }
    std::size_t chunk() const { return chunk_; }
    std::size_t chunks(std::size_t n) const { return (n + chunk_ - 1) / chunk_; }

    // fn(chunk_index, begin, end)
    void for_chunks(std::size_t n,
                    const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) const;

    void for_each(std::size_t n, const std::function<void(std::size_t, std::size_t)>& range) const {
        for_chunks(n, [&](std::size_t, std::size_t b, std::size_t e) { range(b, e); });
    }

private:
    std::size_t workers_;
    std::size_t chunk_;
};

}  // namespace smpmc
