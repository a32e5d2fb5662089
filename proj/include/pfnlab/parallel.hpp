#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace pfnlab {

inline int64_t default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int64_t(hw);
}

// Runs fn(0..n-1) across n_threads workers. Results must be written to
// per-index slots by the caller; completion order is irrelevant to output
// determinism. The first worker exception is rethrown after join.
inline void parallel_for(int64_t n, int64_t n_threads, const std::function<void(int64_t)>& fn) {
    if (n_threads <= 0) n_threads = default_threads();
    if (n_threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> workers;
    const int64_t workers_n = std::min(n_threads, n);
    workers.reserve(size_t(workers_n));
    for (int64_t w = 0; w < workers_n; ++w) {
        workers.emplace_back([&]() {
            for (;;) {
                const int64_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace pfnlab
