#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace spdc {

inline int& thread_count() {
  static int n = 1;
  return n;
}

/// Runs fn(i) for i in [0, n) on thread_count() workers with static
/// contiguous chunks. Results must be written to per-index slots.
template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int nt = std::max(1, std::min(thread_count(), n));
  if (nt == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < nt; ++w) {
    const int lo = int((long long)n * w / nt), hi = int((long long)n * (w + 1) / nt);
    pool.emplace_back([&, lo, hi] {
      try {
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> g(mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace spdc
