#pragma once

#include <cstddef>
#include <functional>

namespace nictkit {

/// Worker cap: NICTKIT_THREADS if set, otherwise hardware concurrency.
/// `set_deterministic(true)` pins it to 1.
std::size_t worker_count();
void set_deterministic(bool on);
bool deterministic();

/// Runs body(i) for i in [0, n). Each index is owned by exactly one worker,
/// so callers that write only to index-owned outputs get results that do
/// not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace nictkit
