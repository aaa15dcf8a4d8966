#pragma once

#include <cstdint>
#include <functional>

namespace hieraudio {

// Global worker count. 1 disables threading entirely. Resolution order:
// explicit set_thread_count() (CLI --threads), HIERAUDIO_THREADS env var,
// hardware concurrency.
int thread_count();
void set_thread_count(int n);

// Runs fn(i) for i in [0, n). Work is split into contiguous blocks, one per
// worker. Each index is processed exactly once; fn must not depend on
// execution order (outputs written to disjoint slots).
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace hieraudio
