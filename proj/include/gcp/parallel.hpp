#pragma once

#include <cstddef>
#include <functional>

namespace gcp {

// Worker count from GCP_NUM_THREADS (default 1). Read once per process.
std::size_t worker_threads();

// Runs body(i) for i in [0, count). Iterations are split into fixed contiguous
// chunks; callers keep results per index so the outcome never depends on the
// worker count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body, bool allow_threads = true);

}  // namespace gcp
