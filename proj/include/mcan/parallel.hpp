#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace mcan {

/// Worker count: hardware concurrency, capped by the MCF_THREADS environment variable.
inline int thread_count() {
    int n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MCF_THREADS")) {
        try {
            const int cap = std::stoi(env);
            if (cap >= 1) n = std::min(n, cap);
        } catch (const std::exception&) {
        }
    }
    return n;
}

/// Calls f(i) for i in [0, n) over contiguous chunks. Each index is handled by
/// exactly one worker, so results written per index do not depend on the
/// thread count. The first exception thrown by a worker is rethrown.
template <class F>
void parallel_for(std::size_t n, F&& f, int threads = thread_count()) {
    const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
            try {
                for (std::size_t i = lo; i < hi; ++i) f(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace mcan
