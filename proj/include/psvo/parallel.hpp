/// @file parallel.hpp Static-partition parallel loop over an index range.

#ifndef PSVO_PARALLEL_HPP
#define PSVO_PARALLEL_HPP

#include <Eigen/Core>

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace psvo {

/// Calls fn(i) for i in [0, n). With threads > 1, index i runs on worker i % threads.
/// The first exception thrown by any call is rethrown after all workers finish.
template <typename Fn>
void parallel_for(Eigen::Index n, int threads, Fn&& fn) {
  threads = std::max(1, std::min<int>(threads, static_cast<int>(std::max<Eigen::Index>(n, 1))));
  if (threads == 1) {
    for (Eigen::Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (Eigen::Index i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace psvo

#endif  // PSVO_PARALLEL_HPP
