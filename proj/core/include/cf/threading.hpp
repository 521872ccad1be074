#pragma once

#include <functional>

namespace cf {

// Worker pool size: CF_NUM_THREADS if set, else hardware concurrency.
// The value must never influence numeric results, only wall time.
int thread_count_from_env();

// Runs fn(chunk) for every chunk in [0, n_chunks) on up to n_threads
// workers. Chunk execution order is unspecified; callers own any
// order-sensitive reduction over per-chunk outputs. The first exception
// thrown by a chunk is rethrown after all workers join.
void parallel_chunks(int n_threads, int n_chunks, const std::function<void(int)>& fn);

}  // namespace cf
