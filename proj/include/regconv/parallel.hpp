#pragma once

#include <cstddef>
#include <functional>

namespace regconv {

/// Worker count: REGCONV_THREADS if set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads. fn must only
/// write to per-index state; the first exception (lowest index) is rethrown
/// after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace regconv
