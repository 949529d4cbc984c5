#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace equidiag {

inline int hardware_threads() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

/// Run fn(i) for i in [0, n). Each index is processed exactly once; callers
/// write results into per-index slots and reduce sequentially afterwards, so
/// the outcome is independent of the thread count.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const auto workers = static_cast<std::size_t>(threads) < n ? static_cast<std::size_t>(threads) : n;
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (std::thread& t : pool) t.join();
}

}  // namespace equidiag
