#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace clipgs {

namespace detail {
inline std::atomic<int>& thread_override() {
    static std::atomic<int> value{0};
    return value;
}

inline bool& in_worker() {
    thread_local bool value = false;
    return value;
}
} // namespace detail

/// Worker count: an explicit override if set, else CLIPGS_THREADS, else the hardware concurrency.
inline int worker_count() {
    if (int forced = detail::thread_override().load(); forced > 0) return forced;
    int n = int(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("CLIPGS_THREADS")) {
        try {
            const int cap = std::stoi(env);
            if (cap > 0) n = std::min(n, cap);
        } catch (...) {
        }
    }
    return n;
}

/// Forces a worker count for the rest of the process (0 restores the default).
inline void set_worker_count(int n) { detail::thread_override().store(std::max(0, n)); }

/// Runs fn(item, worker) for item in [0, count). Items are assigned round-robin to
/// workers, so the item → worker mapping depends only on `count` and the worker count.
template <typename F> void parallel_for(std::size_t count, F&& fn, int workers = 0) {
    if (workers <= 0) workers = worker_count();
    // nested loops run inline on the calling worker
    if (detail::in_worker()) workers = 1;
    workers = int(std::min<std::size_t>(std::size_t(workers), std::max<std::size_t>(count, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i, 0);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            detail::in_worker() = true;
            try {
                for (std::size_t i = std::size_t(w); i < count; i += std::size_t(workers)) fn(i, w);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace clipgs
