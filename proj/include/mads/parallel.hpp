#pragma once

#include <cstdint>
#include <exception>
#include <mutex>

namespace mads {

// Global switch between the OpenMP kernels and the serial reference path.
// Results are identical either way: parallel loops only ever fill disjoint
// per-index slots and every reduction happens serially in index order.
// MADS_SERIAL=1 in the environment forces the serial path.
bool parallel_enabled();
void set_parallel_enabled(bool on);
int worker_count();

namespace detail {
void parallel_for_impl(int64_t n, void* ctx, void (*body)(void*, int64_t));
}

// Exceptions thrown by the body must not escape an OpenMP region; the first
// one is captured and rethrown after the loop completes.
template <typename F>
void parallel_for(int64_t n, F&& f) {
    if (n <= 0) return;
    std::exception_ptr error;
    std::mutex error_mutex;
    auto guarded = [&](int64_t i) {
        try {
            f(i);
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
        }
    };
    using G = decltype(guarded);
    detail::parallel_for_impl(n, static_cast<void*>(&guarded),
                              [](void* ctx, int64_t i) { (*static_cast<G*>(ctx))(i); });
    if (error) std::rethrow_exception(error);
}

}  // namespace mads
