#pragma once

// Index-space parallel loop over read-only shared state. Work items write to
// disjoint slots, so results are independent of the worker count.

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace sclr {

inline unsigned worker_count() {
  if (const char* env = std::getenv("SCLR_THREADS")) {
    const long n = std::atol(env);
    if (n >= 1) return unsigned(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

inline void parallel_for(long n, const std::function<void(long)>& fn) {
  const unsigned workers = std::min<unsigned>(worker_count(), unsigned(n > 0 ? n : 1));
  if (workers <= 1 || n <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<long> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const long i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace sclr
