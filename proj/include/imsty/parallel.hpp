#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace imsty {

namespace detail {
inline int& thread_count_slot() {
    static int n = 1;
    return n;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_count_slot() = std::max(1, n); }
inline int num_threads() { return detail::thread_count_slot(); }

/// Runs fn(i) for i in [begin, end). Iterations must be independent and each
/// iteration must write to its own output region; results are then
/// bit-identical to the sequential order regardless of thread count.
template <typename F>
void parallel_for(std::size_t begin, std::size_t end, F&& fn, std::size_t grain = 1) {
    if (end <= begin) return;
    const std::size_t count = end - begin;
    const std::size_t nt_cap = static_cast<std::size_t>(num_threads());
    const std::size_t nt = std::min({nt_cap, count, count / std::max<std::size_t>(grain, 1) + 1});
    if (nt <= 1) {
        for (std::size_t i = begin; i < end; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(nt);
    const std::size_t chunk = (count + nt - 1) / nt;
    for (std::size_t t = 0; t < nt; ++t) {
        const std::size_t lo = begin + t * chunk;
        const std::size_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &fn]() {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace imsty
