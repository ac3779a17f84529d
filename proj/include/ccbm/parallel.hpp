#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace ccbm {

/// Worker count: CCBM_THREADS when set to a positive integer, else hardware concurrency.
inline unsigned thread_budget() {
  if (const char* env = std::getenv("CCBM_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<unsigned>(std::min(n, 256L));
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(i) for i in [0, n). Each index is handled exactly once; callers
/// write results into per-index slots and reduce afterwards in index order,
/// so output never depends on the thread count.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t min_per_thread = 8) {
  const std::size_t workers =
      std::min<std::size_t>(thread_budget(), std::max<std::size_t>(1, n / min_per_thread));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace ccbm
