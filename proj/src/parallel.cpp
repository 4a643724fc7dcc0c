#include "ehrseq/parallel.hpp"

#include <atomic>

namespace ehrseq {

namespace {
std::atomic<int> g_max_threads{0};  // 0 = use runtime default
}

int max_threads() {
    int cap = g_max_threads.load(std::memory_order_relaxed);
#ifdef EHRSEQ_HAVE_OPENMP
    int hw = omp_get_max_threads();
#else
    int hw = 1;
#endif
    if (cap <= 0) return hw;
    return cap < hw ? cap : hw;
}

void set_max_threads(int n) {
    g_max_threads.store(n, std::memory_order_relaxed);
}

}  // namespace ehrseq
