#pragma once

// Dense f64 inner loops used by the autodiff engine. Every kernel has a
// portable scalar reference and, on x86-64, an AVX2/FMA variant. The active
// variant is chosen once at startup from CPUID and can be overridden with
// MSDF_KERNELS=scalar|avx2 or set_isa().

#include <cstddef>
#include <string_view>

namespace msdf::kernels {

enum class Isa { kScalar, kAvx2 };

struct KernelTable {
  // c[m×n] (+)= a[m×k] · b[k×n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // c[m×n] (+)= a[m×k] · b[n×k]ᵀ
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // c[m×n] (+)= a[k×m]ᵀ · b[k×n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  double (*dot)(const double* x, const double* y, std::size_t n);
};

const KernelTable& scalar_table();
// Null when the translation unit was built without AVX2 support.
const KernelTable* avx2_table();

bool cpu_has_avx2();
Isa active_isa();
// Throws std::runtime_error when the requested variant is unavailable.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

const KernelTable& active();

inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  active().gemm_nn(a, b, c, m, k, n, accumulate);
}
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  active().gemm_nt(a, b, c, m, k, n, accumulate);
}
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  active().gemm_tn(a, b, c, m, k, n, accumulate);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline double dot(const double* x, const double* y, std::size_t n) {
  return active().dot(x, y, n);
}

}  // namespace msdf::kernels
