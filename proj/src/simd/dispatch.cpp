#include <atomic>
#include <cstdlib>
#include <string_view>

#include "nbnlab/simd/kernels.hpp"

namespace nbnlab::simd {
namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& select_kernels() {
  const char* env = std::getenv("NBNLAB_SIMD");
  if (env != nullptr && std::string_view(env) == "scalar") return scalar_kernels();
  if (const KernelTable* t = avx2_kernels()) return *t;
  return scalar_kernels();
}

std::atomic<const KernelTable*> g_active{nullptr};

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable* table =
      cpu_has_avx2_fma() ? detail::avx2_table_if_compiled() : nullptr;
  return table;
}

const KernelTable& active_kernels() {
  const KernelTable* t = g_active.load(std::memory_order_acquire);
  if (t == nullptr) {
    t = &select_kernels();
    g_active.store(t, std::memory_order_release);
  }
  return *t;
}

void set_active_kernels(const KernelTable& table) {
  g_active.store(&table, std::memory_order_release);
}

}  // namespace nbnlab::simd
