#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mmofl {

// Runs fn(i) for i in [0, n) on up to `workers` threads. Callers must write
// results into per-index slots; with that discipline the output is identical
// for any worker count.
template <class Fn>
void parallel_for(size_t n, int workers, Fn&& fn) {
    if (n == 0) return;
    const size_t nthreads = std::min<size_t>(workers < 1 ? 1 : workers, n);
    if (nthreads <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= n) break;
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace mmofl
