#pragma once

#include <atomic>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace saghog {

// Ordered parallel map: fn(i) runs once per index, results land by index, so
// output order (and therefore every artifact) is independent of the worker
// count. fn must only touch per-index state.
inline void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  const int count = std::min<size_t>(workers, n);
  std::vector<std::exception_ptr> errors(count);
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace saghog
