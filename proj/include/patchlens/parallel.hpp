#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "patchlens/errors.hpp"

// Deterministic fan-out: results land in input order no matter which worker
// finishes first, so reports built from them are byte-stable.

namespace patchlens {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Applies fn(0..n-1) across `threads` workers; out[i] = fn(i). The first
// exception thrown by any worker is rethrown after all workers stop.
template <typename R>
std::vector<R> parallel_map(int64_t n, int threads, const std::function<R(int64_t)>& fn) {
  if (n < 0) throw ConfigError("parallel_map over negative count");
  std::vector<R> out(static_cast<size_t>(n));
  if (n == 0) return out;
  threads = std::min<int64_t>(resolve_threads(threads), n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fn(i);
    return out;
  }

  std::atomic<int64_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        out[static_cast<size_t>(i)] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(n);  // drain remaining work
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace patchlens
