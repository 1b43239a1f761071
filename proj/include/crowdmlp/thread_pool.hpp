#pragma once

#include <cstdint>
#include <functional>

namespace crowdmlp {

// Worker count used by parallel_for. 0 = hardware concurrency. Takes effect
// for pools created after the call; the CLI sets it before any compute runs.
void set_worker_threads(int n);
int worker_threads();

// Runs body(begin, end) over a partition of [0, n). Chunk boundaries depend
// only on n and the grain, and every index is written by exactly one call,
// so results are bitwise independent of the thread count. Calls nested
// inside a worker run inline.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

} // namespace crowdmlp
