#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace icd::detail {

// Work is always split into this many fixed chunks regardless of thread
// count, so chunked reductions have a thread-count-independent order.
inline constexpr std::size_t kReductionChunks = 8;

inline std::size_t thread_count() {
  static const std::size_t n = [] {
    if (const char* env = std::getenv("ICD_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<std::size_t>(std::clamp<unsigned>(hw, 1, kReductionChunks));
  }();
  return n;
}

inline std::pair<std::size_t, std::size_t> chunk_range(std::size_t n, std::size_t chunk) {
  const std::size_t per = (n + kReductionChunks - 1) / kReductionChunks;
  const std::size_t begin = std::min(n, chunk * per);
  const std::size_t end = std::min(n, begin + per);
  return {begin, end};
}

/// Runs fn(chunk_index, begin, end) for each of the kReductionChunks fixed
/// chunks of [0, n). Chunk boundaries do not depend on the thread count.
inline void parallel_chunks(std::size_t n,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t threads = std::min(thread_count(), kReductionChunks);
  if (threads <= 1 || n < 2) {
    for (std::size_t c = 0; c < kReductionChunks; ++c) {
      auto [b, e] = chunk_range(n, c);
      if (b < e) fn(c, b, e);
    }
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t c = t; c < kReductionChunks; c += threads) {
        auto [b, e] = chunk_range(n, c);
        if (b < e) fn(c, b, e);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace icd::detail
