#pragma once

// Deterministic parallel map: fn(i) runs on a pool of threads, results land in
// index order, and any reduction the caller does over the returned vector is
// sequential. Exceptions propagate from the first failing index.

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace sfc {

template <typename T, typename Fn>
std::vector<T> parallel_map(std::size_t n, Fn&& fn, unsigned max_threads = 0) {
    std::vector<T> out(n);
    if (n == 0) return out;
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    unsigned workers = std::min<std::size_t>(max_threads ? std::min(max_threads, hw) : hw, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    for (unsigned w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1))
                    out[i] = fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace sfc
