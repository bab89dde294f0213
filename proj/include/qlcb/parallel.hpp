#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace qlcb {

/// Runs fn(0..n_tasks-1) on up to `workers` threads. Tasks must write only to
/// their own output slots; the first exception (lowest task index) is
/// rethrown after all threads join, so failures are schedule independent.
template <typename Fn>
void parallel_for(int n_tasks, int workers, Fn&& fn) {
    if (n_tasks <= 0) return;
    if (workers <= 1 || n_tasks == 1) {
        for (int i = 0; i < n_tasks; ++i) fn(i);
        return;
    }
    const int n_threads = std::min(workers, n_tasks);
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_tasks));
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(n_threads));
    for (int w = 0; w < n_threads; ++w) {
        threads.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n_tasks) break;
                try {
                    fn(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& err : errors)
        if (err) std::rethrow_exception(err);
}

inline int default_workers() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

} // namespace qlcb
