#include "gcp/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace gcp {

std::size_t worker_threads() {
  static const std::size_t threads = [] {
    const char* env = std::getenv("GCP_NUM_THREADS");
    if (!env) return std::size_t{1};
    try {
      long value = std::stol(env);
      return static_cast<std::size_t>(std::clamp(value, 1L, 256L));
    } catch (const std::exception&) {
      return std::size_t{1};
    }
  }();
  return threads;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body, bool allow_threads) {
  std::size_t threads = allow_threads ? std::min(worker_threads(), count) : 1;
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        std::size_t end = std::min(count, (t + 1) * chunk);
        for (std::size_t i = t * chunk; i < end; ++i) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& worker : pool) worker.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

}  // namespace gcp
