#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace uvtc {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{1};
  return n;
}
inline thread_local bool in_worker = false;
}  // namespace detail

/// Cap on worker threads used by parallel_for. Values < 1 are treated as 1.
inline void set_num_threads(int n) { detail::thread_setting().store(std::max(1, n)); }
inline int num_threads() { return detail::thread_setting().load(); }

/// Runs body(i) for i in [begin, end) on up to num_threads() workers using
/// static contiguous chunks. Bodies must write disjoint outputs; any reduction
/// the caller needs has to be done afterwards in a fixed order so results do
/// not depend on the worker count. Nested calls run inline on the caller.
template <typename Body>
void parallel_for(std::ptrdiff_t begin, std::ptrdiff_t end, Body&& body) {
  const std::ptrdiff_t count = end - begin;
  if (count <= 0) return;
  const std::ptrdiff_t workers = std::min<std::ptrdiff_t>(num_threads(), count);
  if (workers <= 1 || detail::in_worker) {
    for (std::ptrdiff_t i = begin; i < end; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (std::ptrdiff_t w = 0; w < workers; ++w) {
    const std::ptrdiff_t lo = begin + count * w / workers;
    const std::ptrdiff_t hi = begin + count * (w + 1) / workers;
    pool.emplace_back([&, lo, hi] {
      detail::in_worker = true;
      try {
        for (std::ptrdiff_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace uvtc
