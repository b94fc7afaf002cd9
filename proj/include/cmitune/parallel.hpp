#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace cmitune {

// Evaluates fn(0..n-1) with up to `jobs` worker threads and returns the
// results indexed by i. Each slot is written exactly once, so the caller can
// reduce in fixed index order and get the same bits regardless of `jobs`.
// fn must be a pure function of its index.
template <typename T>
std::vector<T> parallel_map(int64_t n, int jobs, const std::function<T(int64_t)>& fn) {
  std::vector<T> out(static_cast<size_t>(n));
  if (jobs <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fn(i);
    return out;
  }
  std::atomic<int64_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      out[static_cast<size_t>(i)] = fn(i);
    }
  };
  const int n_threads = static_cast<int>(std::min<int64_t>(jobs, n));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  return out;
}

}  // namespace cmitune
