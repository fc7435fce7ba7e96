#include "smpmc/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace smpmc {

void Executor::for_chunks(std::size_t n,
                          const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) const {
    const std::size_t nc = chunks(n);
    if (nc == 0) return;
    const std::size_t nw = std::min(workers_, nc);
    if (nw <= 1) {
        for (std::size_t c = 0; c < nc; ++c) fn(c, c * chunk_, std::min(n, (c + 1) * chunk_));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto work = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= nc) return;
            try {
                fn(c, c * chunk_, std::min(n, (c + 1) * chunk_));
            } catch (...) {
                std::lock_guard lk(err_mu);
                if (!first_error) first_error = std::current_exception();
                next.store(nc);
                return;
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(nw - 1);
    for (std::size_t w = 1; w < nw; ++w) pool.emplace_back(work);
    work();
    pool.clear();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace smpmc
