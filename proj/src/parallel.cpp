#include "mads/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mads {

namespace {

bool initial_state() {
    const char* env = std::getenv("MADS_SERIAL");
    if (env != nullptr && std::strcmp(env, "0") != 0) return false;
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

std::atomic<bool>& flag() {
    static std::atomic<bool> on{initial_state()};
    return on;
}

}  // namespace

bool parallel_enabled() { return flag().load(std::memory_order_relaxed); }

void set_parallel_enabled(bool on) { flag().store(on, std::memory_order_relaxed); }

int worker_count() {
#ifdef _OPENMP
    return parallel_enabled() ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

namespace detail {

void parallel_for_impl(int64_t n, void* ctx, void (*body)(void*, int64_t)) {
#ifdef _OPENMP
    if (parallel_enabled() && n > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) body(ctx, i);
        return;
    }
#endif
    for (int64_t i = 0; i < n; ++i) body(ctx, i);
}

}  // namespace detail

}  // namespace mads
