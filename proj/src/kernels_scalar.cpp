#include <cmath>
#include <cstddef>

#include "sacn/kernels.hpp"

// Reference kernels. These are the semantics the SIMD variants must match;
// keep them as plain loops.

namespace sacn::kernels {
namespace {

template <typename T>
void add_ref(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_ref(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_ref(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scale_ref(const T* a, T c, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = c * a[i];
}

template <typename T>
void axpy_ref(T c, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += c * x[i];
}

template <typename T>
T dot_ref(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum_ref(const T* a, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

template <typename T>
T max_ref(const T* a, std::size_t n) {
  T m = a[0];
  for (std::size_t i = 1; i < n; ++i) m = a[i] > m ? a[i] : m;
  return m;
}

template <typename T>
void relu_ref(const T* a, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
}

template <typename T>
void relu_grad_ref(const T* x, const T* g, T* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += x[i] > T(0) ? g[i] : T(0);
}

template <typename T>
void vexp_ref(const T* a, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
}

template <typename T>
void gemm_nn_ref(std::size_t m, std::size_t n, std::size_t k, const T* A,
                 const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = C + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t l = 0; l < k; ++l) {
      const T a = A[i * k + l];
      const T* brow = B + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

template <typename T>
void gemm_nt_ref(std::size_t m, std::size_t n, std::size_t k, const T* A,
                 const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = B + j * k;
      T acc = T(0);
      for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      T* c = C + i * n + j;
      *c = accumulate ? *c + acc : acc;
    }
  }
}

template <typename T>
void gemm_tn_ref(std::size_t m, std::size_t n, std::size_t k, const T* A,
                 const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = C + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t l = 0; l < k; ++l) {
      const T a = A[l * m + i];
      const T* brow = B + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

template <typename T>
constexpr Table<T> make_scalar_table() {
  return Table<T>{
      "scalar",        add_ref<T>,      sub_ref<T>,     mul_ref<T>,
      scale_ref<T>,    axpy_ref<T>,     dot_ref<T>,     sum_ref<T>,
      max_ref<T>,      relu_ref<T>,     relu_grad_ref<T>, vexp_ref<T>,
      gemm_nn_ref<T>,  gemm_nt_ref<T>,  gemm_tn_ref<T>,
  };
}

const Table<float> kScalarF32 = make_scalar_table<float>();
const Table<double> kScalarF64 = make_scalar_table<double>();

}  // namespace

const Table<float>& scalar_f32() { return kScalarF32; }
const Table<double>& scalar_f64() { return kScalarF64; }

}  // namespace sacn::kernels
