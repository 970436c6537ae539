#pragma once

#include <exception>
#include <thread>
#include <vector>

namespace psv {

inline int default_threads() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs work(i) for i in [0, n) on up to `threads` workers in waves and feeds
// each result to reduce(i, result) strictly in index order. The reduction
// order is therefore independent of the thread count, which keeps
// floating-point accumulation bit-stable across --threads settings. The first
// worker exception is rethrown after the wave joins.
template <typename Result, typename Work, typename Reduce>
void parallel_ordered_reduce(std::int64_t n, int threads, Work&& work,
                             Reduce&& reduce) {
  if (threads < 1) threads = 1;
  if (threads == 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) reduce(i, work(i));
    return;
  }
  std::int64_t next = 0;
  while (next < n) {
    std::int64_t wave = std::min<std::int64_t>(threads, n - next);
    std::vector<Result> slots(static_cast<std::size_t>(wave));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(wave));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(wave));
    for (std::int64_t k = 0; k < wave; ++k) {
      pool.emplace_back([&, k] {
        try {
          slots[static_cast<std::size_t>(k)] = work(next + k);
        } catch (...) {
          errors[static_cast<std::size_t>(k)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (std::int64_t k = 0; k < wave; ++k)
      if (errors[static_cast<std::size_t>(k)])
        std::rethrow_exception(errors[static_cast<std::size_t>(k)]);
    for (std::int64_t k = 0; k < wave; ++k)
      reduce(next + k, std::move(slots[static_cast<std::size_t>(k)]));
    next += wave;
  }
}

}  // namespace psv
