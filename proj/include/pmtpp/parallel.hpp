#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace pmtpp {

inline int default_threads() { return std::max(1, int(std::thread::hardware_concurrency())); }

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write results
/// into per-index slots, so the outcome does not depend on scheduling. The
/// first exception thrown by any task is rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  const auto workers = std::size_t(std::max(1, std::min<int>(threads, int(n))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace pmtpp
