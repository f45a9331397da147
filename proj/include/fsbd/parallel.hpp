#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace fsbd {

// Thread count: explicit request, else FSBD_THREADS, else 1.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (const char* env = std::getenv("FSBD_THREADS")) {
    try {
      int v = std::stoi(env);
      if (v > 0) return unsigned(v);
    } catch (const std::exception&) {
    }
  }
  return requested > 0 ? requested : 1;
}

// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index is run
// exactly once; results must be written to per-index slots so that the outcome
// does not depend on scheduling. The first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      if (failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned count = unsigned(std::min<std::size_t>(threads, n));
  for (unsigned t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace fsbd
