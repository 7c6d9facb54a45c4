#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace cpfn {

// Returns the worker count: the CPFN_THREADS environment variable if set,
// otherwise hardware concurrency. `requested` > 0 overrides both.
int resolve_threads(int requested = 0);

// Runs fn(chunk_index, begin, end) for a fixed partition of [0, n) into
// n_chunks contiguous chunks. The partition depends only on (n, n_chunks),
// never on the worker count, so any reduction done per chunk and combined
// in chunk order is bit-reproducible regardless of threading.
void parallel_chunks(std::size_t n, std::size_t n_chunks, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

// Convenience: one task per index, results written to disjoint slots.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace cpfn
