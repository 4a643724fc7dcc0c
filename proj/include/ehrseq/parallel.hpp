#pragma once

#include <cstddef>
#include <cstdint>

#ifdef EHRSEQ_HAVE_OPENMP
#include <omp.h>
#endif

namespace ehrseq {

// Global worker cap. Defaults to the OpenMP runtime's thread count; the CLI
// lowers it via --threads. Thread count must never change results: parallel
// bodies write only to slots owned by their index, and reductions merge
// per-block partials in a fixed order.
int max_threads();
void set_max_threads(int n);

template <typename F>
void serial_for(size_t n, F&& body) {
    for (size_t i = 0; i < n; ++i) body(i);
}

template <typename F>
void parallel_for(size_t n, F&& body) {
#ifdef EHRSEQ_HAVE_OPENMP
    int nt = max_threads();
    if (nt > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(nt)
        for (int64_t i = 0; i < static_cast<int64_t>(n); ++i) body(static_cast<size_t>(i));
        return;
    }
#endif
    serial_for(n, body);
}

}  // namespace ehrseq
