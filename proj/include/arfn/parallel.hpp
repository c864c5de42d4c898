#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace arfn {

// Worker count: ARFN_THREADS when set and positive, otherwise the hardware count.
inline std::size_t worker_count(std::size_t requested = 0) {
  std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  std::size_t n = requested ? requested : hw;
  if (const char* e = std::getenv("ARFN_THREADS")) {
    const long cap = std::strtol(e, nullptr, 10);
    if (cap > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  }
  return std::max<std::size_t>(1, n);
}

// Runs fn(i) for i in [0, n). Each index writes its own slot, so results do not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errs[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace arfn
