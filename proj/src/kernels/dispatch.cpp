#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "msdf/kernels.hpp"

namespace msdf::kernels {
namespace {

Isa detect_default() {
  if (const char* env = std::getenv("MSDF_KERNELS")) {
    const std::string v{env};
    if (v == "scalar") return Isa::kScalar;
    if (v == "avx2" && cpu_has_avx2() && avx2_table() != nullptr) return Isa::kAvx2;
  }
  if (cpu_has_avx2() && avx2_table() != nullptr) return Isa::kAvx2;
  return Isa::kScalar;
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{
      detect_default() == Isa::kAvx2 ? avx2_table() : &scalar_table()};
  return table;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

Isa active_isa() {
  return &active() == &scalar_table() ? Isa::kScalar : Isa::kAvx2;
}

void set_isa(Isa isa) {
  if (isa == Isa::kScalar) {
    slot().store(&scalar_table());
    return;
  }
  if (!cpu_has_avx2() || avx2_table() == nullptr) {
    throw std::runtime_error("AVX2 kernels unavailable on this build or CPU");
  }
  slot().store(avx2_table());
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::kScalar ? "scalar" : "avx2";
}

}  // namespace msdf::kernels
