#pragma once

#include <cstddef>
#include <string>

// Inner-loop primitives behind the tensor ops. Every entry has a scalar
// reference implementation; the AVX2 table overrides the profitable ones and
// is selected at runtime when the CPU supports AVX2+FMA. Entries the SIMD
// build does not specialize point back at the scalar function.
//
// GEMM layout: row-major, tight leading dimensions.
//   gemm_nn: C[m x n] (+)= A[m x k] * B[k x n]
//   gemm_nt: C[m x n] (+)= A[m x k] * B[n x k]^T
//   gemm_tn: C[m x n] (+)= A[k x m]^T * B[k x n]

namespace sacn::kernels {

enum class Backend { Auto, Scalar, Avx2 };

template <typename T>
struct Table {
  const char* name;
  void (*add)(const T* a, const T* b, T* out, std::size_t n);
  void (*sub)(const T* a, const T* b, T* out, std::size_t n);
  void (*mul)(const T* a, const T* b, T* out, std::size_t n);
  void (*scale)(const T* a, T c, T* out, std::size_t n);
  void (*axpy)(T c, const T* x, T* y, std::size_t n);  // y += c*x
  T (*dot)(const T* a, const T* b, std::size_t n);
  T (*sum)(const T* a, std::size_t n);
  T (*max)(const T* a, std::size_t n);  // n >= 1
  void (*relu)(const T* a, T* out, std::size_t n);
  void (*relu_grad)(const T* x, const T* g, T* acc, std::size_t n);  // acc += g*(x>0)
  // Accuracy contract on [-87, 87] (f32: rel err <= 2e-7 vs std::exp; f64:
  // exact std::exp). Callers shift inputs below zero first (softmax subtracts
  // the slice max), so behavior outside that range is backend-defined.
  void (*vexp)(const T* a, T* out, std::size_t n);
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* A,
                  const T* B, T* C, bool accumulate);
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* A,
                  const T* B, T* C, bool accumulate);
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* A,
                  const T* B, T* C, bool accumulate);
};

// Active table for the current backend selection.
template <typename T>
const Table<T>& active();

// Force a backend; Auto re-detects from the CPU (and honors SACN_KERNELS).
// Throws std::invalid_argument if the backend is unavailable on this CPU.
void select(Backend b);
Backend selected();
bool avx2_available();
Backend parse_backend(const std::string& name);  // "auto" | "scalar" | "avx2"
const char* backend_name(Backend b);

// Direct table access for cross-backend equivalence tests.
const Table<float>& scalar_f32();
const Table<double>& scalar_f64();
const Table<float>* avx2_f32();    // nullptr when not built/supported
const Table<double>* avx2_f64();

}  // namespace sacn::kernels
