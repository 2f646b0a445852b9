#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace maglens {

// Worker cap shared by every parallel map. 0 means hardware concurrency.
inline std::atomic<int>& thread_limit() {
    static std::atomic<int> limit{0};
    return limit;
}

inline int worker_count(long tasks) {
    int cap = thread_limit().load();
    if (cap <= 0) cap = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    return static_cast<int>(std::max<long>(1, std::min<long>(cap, tasks)));
}

// Calls fn(i) for i in [0, count). Work is handed out dynamically; results must
// be written to per-index slots so the outcome does not depend on scheduling.
// The first exception (lowest index) is rethrown after all workers finish.
template <class Fn>
void parallel_for(long count, Fn&& fn) {
    if (count <= 0) return;
    const int workers = worker_count(count);
    if (workers == 1) {
        for (long i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<long> next{0};
    std::mutex mu;
    long failed_at = count;
    std::exception_ptr failure;
    auto run = [&] {
        for (long i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (i < failed_at) {
                    failed_at = i;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace maglens
