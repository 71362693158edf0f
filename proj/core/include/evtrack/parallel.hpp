#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace evtrack {

// Library-wide worker count. Work is always split by disjoint output ranges
// and every output element is produced by a serial loop, so results are
// bit-identical for any thread count.
inline int& thread_count_ref() {
  static int n = static_cast<int>(
      std::max(1u, std::thread::hardware_concurrency()));
  return n;
}

inline void set_thread_count(int n) { thread_count_ref() = std::max(1, n); }
inline int thread_count() { return thread_count_ref(); }

// Calls fn(begin, end) over a partition of [0, total).
template <typename Fn>
void parallel_for(std::size_t total, Fn&& fn, std::size_t grain = 1024) {
  int n_threads = thread_count();
  if (n_threads <= 1 || total <= grain) {
    fn(std::size_t{0}, total);
    return;
  }
  n_threads = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(n_threads),
                            (total + grain - 1) / grain));
  const std::size_t chunk = (total + n_threads - 1) / n_threads;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(n_threads) - 1);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto guarded = [&fn, &first_error, &error_mutex](std::size_t begin,
                                                   std::size_t end) {
    try {
      fn(begin, end);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };
  for (int t = 1; t < n_threads; ++t) {
    const std::size_t begin = chunk * static_cast<std::size_t>(t);
    const std::size_t end = std::min(total, begin + chunk);
    if (begin >= end) break;
    workers.emplace_back([&guarded, begin, end] { guarded(begin, end); });
  }
  guarded(std::size_t{0}, std::min(total, chunk));
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace evtrack
