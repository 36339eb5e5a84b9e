#pragma once
// Deterministic index-partitioned parallel-for. Worker count comes from
// POINTFORGE_THREADS (default 1); results must be written by index so the
// outcome is identical at any worker count.

#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace pointforge::par {

inline int worker_count() {
  if (const char* env = std::getenv("POINTFORGE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

// Runs fn(0..n-1); worker w handles indices congruent to w. The first
// exception (lowest worker id) is rethrown after all workers join.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n < 1 ? 1 : n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace pointforge::par
