#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace retgrade {

// Worker count: RETGRADE_THREADS if set and positive, else hardware threads.
inline unsigned worker_count() {
  if (const char *env = std::getenv("RETGRADE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0)
      return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n). Work is claimed dynamically, so fn must write
// only to slot i for results to be independent of scheduling. The first
// exception thrown (lowest index) is rethrown after all workers join.
template <typename Fn> void parallel_for(std::size_t n, Fn &&fn) {
  const std::size_t workers = std::min<std::size_t>(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i)
      fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  std::size_t err_index = n;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n)
        return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (i < err_index) {
          err_index = i;
          err = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t)
    pool.emplace_back(body);
  body();
  for (auto &th : pool)
    th.join();
  if (err)
    std::rethrow_exception(err);
}

} // namespace retgrade
