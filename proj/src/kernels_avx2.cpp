#include <cstddef>

#include "sacn/kernels.hpp"

// AVX2+FMA variants. This TU is compiled with -mavx2 -mfma when the compiler
// supports them; callers must go through the dispatch layer, which only hands
// out this table after a runtime CPU check.

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <type_traits>

namespace sacn::kernels {
namespace {

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  using type = __m256;
  static constexpr std::size_t lanes = 8;
};
template <>
struct VecOf<double> {
  using type = __m256d;
  static constexpr std::size_t lanes = 4;
};
template <typename T>
using vec_t = typename VecOf<T>::type;

inline __m256 vload(const float* p) { return _mm256_loadu_ps(p); }
inline __m256d vload(const double* p) { return _mm256_loadu_pd(p); }
inline void vstore(float* p, __m256 v) { _mm256_storeu_ps(p, v); }
inline void vstore(double* p, __m256d v) { _mm256_storeu_pd(p, v); }
inline __m256 vset1(float x) { return _mm256_set1_ps(x); }
inline __m256d vset1(double x) { return _mm256_set1_pd(x); }
inline __m256 vadd(__m256 a, __m256 b) { return _mm256_add_ps(a, b); }
inline __m256d vadd(__m256d a, __m256d b) { return _mm256_add_pd(a, b); }
inline __m256 vsub(__m256 a, __m256 b) { return _mm256_sub_ps(a, b); }
inline __m256d vsub(__m256d a, __m256d b) { return _mm256_sub_pd(a, b); }
inline __m256 vmul(__m256 a, __m256 b) { return _mm256_mul_ps(a, b); }
inline __m256d vmul(__m256d a, __m256d b) { return _mm256_mul_pd(a, b); }
inline __m256 vmax(__m256 a, __m256 b) { return _mm256_max_ps(a, b); }
inline __m256d vmax(__m256d a, __m256d b) { return _mm256_max_pd(a, b); }
inline __m256 vfma(__m256 a, __m256 b, __m256 c) { return _mm256_fmadd_ps(a, b, c); }
inline __m256d vfma(__m256d a, __m256d b, __m256d c) { return _mm256_fmadd_pd(a, b, c); }
inline __m256 vgt_mask(__m256 a, __m256 b) { return _mm256_cmp_ps(a, b, _CMP_GT_OQ); }
inline __m256d vgt_mask(__m256d a, __m256d b) { return _mm256_cmp_pd(a, b, _CMP_GT_OQ); }
inline __m256 vand(__m256 a, __m256 b) { return _mm256_and_ps(a, b); }
inline __m256d vand(__m256d a, __m256d b) { return _mm256_and_pd(a, b); }

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  lo = _mm_add_pd(lo, _mm_unpackhi_pd(lo, lo));
  return _mm_cvtsd_f64(lo);
}

inline float hmax(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_max_ps(lo, hi);
  lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline double hmax(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_max_pd(lo, hi);
  lo = _mm_max_sd(lo, _mm_unpackhi_pd(lo, lo));
  return _mm_cvtsd_f64(lo);
}

template <typename T>
void add_v(const T* a, const T* b, T* out, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  std::size_t i = 0;
  for (; i + W <= n; i += W) vstore(out + i, vadd(vload(a + i), vload(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_v(const T* a, const T* b, T* out, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  std::size_t i = 0;
  for (; i + W <= n; i += W) vstore(out + i, vsub(vload(a + i), vload(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_v(const T* a, const T* b, T* out, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  std::size_t i = 0;
  for (; i + W <= n; i += W) vstore(out + i, vmul(vload(a + i), vload(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scale_v(const T* a, T c, T* out, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  const vec_t<T> vc = vset1(c);
  std::size_t i = 0;
  for (; i + W <= n; i += W) vstore(out + i, vmul(vc, vload(a + i)));
  for (; i < n; ++i) out[i] = c * a[i];
}

template <typename T>
void axpy_v(T c, const T* x, T* y, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  const vec_t<T> vc = vset1(c);
  std::size_t i = 0;
  for (; i + W <= n; i += W)
    vstore(y + i, vfma(vc, vload(x + i), vload(y + i)));
  for (; i < n; ++i) y[i] += c * x[i];
}

template <typename T>
T dot_v(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  vec_t<T> acc0 = vset1(T(0));
  vec_t<T> acc1 = vset1(T(0));
  std::size_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    acc0 = vfma(vload(a + i), vload(b + i), acc0);
    acc1 = vfma(vload(a + i + W), vload(b + i + W), acc1);
  }
  for (; i + W <= n; i += W) acc0 = vfma(vload(a + i), vload(b + i), acc0);
  T total = hsum(vadd(acc0, acc1));
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

template <typename T>
T sum_v(const T* a, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  vec_t<T> acc = vset1(T(0));
  std::size_t i = 0;
  for (; i + W <= n; i += W) acc = vadd(acc, vload(a + i));
  T total = hsum(acc);
  for (; i < n; ++i) total += a[i];
  return total;
}

template <typename T>
T max_v(const T* a, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  T m = a[0];
  std::size_t i = 0;
  if (n >= W) {
    vec_t<T> acc = vload(a);
    for (i = W; i + W <= n; i += W) acc = vmax(acc, vload(a + i));
    m = hmax(acc);
  }
  for (; i < n; ++i) m = a[i] > m ? a[i] : m;
  return m;
}

template <typename T>
void relu_v(const T* a, T* out, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  const vec_t<T> z = vset1(T(0));
  std::size_t i = 0;
  for (; i + W <= n; i += W) vstore(out + i, vmax(vload(a + i), z));
  for (; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
}

template <typename T>
void relu_grad_v(const T* x, const T* g, T* acc, std::size_t n) {
  constexpr std::size_t W = VecOf<T>::lanes;
  const vec_t<T> z = vset1(T(0));
  std::size_t i = 0;
  for (; i + W <= n; i += W) {
    vec_t<T> mask = vgt_mask(vload(x + i), z);
    vstore(acc + i, vadd(vload(acc + i), vand(mask, vload(g + i))));
  }
  for (; i < n; ++i) acc[i] += x[i] > T(0) ? g[i] : T(0);
}

// exp on 8 floats, Cephes polynomial split of exp(x) = 2^n * exp(r).
// Input clamped to the range where float exp is finite and normal.
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-87.3365447504019f);
  const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
  const __m256 c1 = _mm256_set1_ps(0.693359375f);
  const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
  const __m256 p0 = _mm256_set1_ps(1.9875691500e-4f);
  const __m256 p1 = _mm256_set1_ps(1.3981999507e-3f);
  const __m256 p2 = _mm256_set1_ps(8.3334519073e-3f);
  const __m256 p3 = _mm256_set1_ps(4.1665795894e-2f);
  const __m256 p4 = _mm256_set1_ps(1.6666665459e-1f);
  const __m256 p5 = _mm256_set1_ps(5.0000001201e-1f);
  const __m256 one = _mm256_set1_ps(1.0f);

  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
  __m256 fx = _mm256_round_ps(_mm256_mul_ps(x, log2e),
                              _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  // r = x - fx*ln2, with ln2 split for extra precision
  __m256 r = _mm256_fnmadd_ps(fx, c1, x);
  r = _mm256_fnmadd_ps(fx, c2, r);
  __m256 r2 = _mm256_mul_ps(r, r);
  __m256 y = p0;
  y = _mm256_fmadd_ps(y, r, p1);
  y = _mm256_fmadd_ps(y, r, p2);
  y = _mm256_fmadd_ps(y, r, p3);
  y = _mm256_fmadd_ps(y, r, p4);
  y = _mm256_fmadd_ps(y, r, p5);
  y = _mm256_fmadd_ps(y, r2, _mm256_add_ps(r, one));
  // scale by 2^n through the exponent field
  __m256i n = _mm256_cvtps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

void vexp_f32(const float* a, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, exp256(_mm256_loadu_ps(a + i)));
  if (i < n) {
    alignas(32) float buf[8];
    for (std::size_t j = 0; j < 8; ++j) buf[j] = j < n - i ? a[i + j] : 0.0f;
    _mm256_store_ps(buf, exp256(_mm256_load_ps(buf)));
    for (std::size_t j = 0; i + j < n; ++j) out[i + j] = buf[j];
  }
}

void vexp_f64(const double* a, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
}

// 4-row by 2-vector microtile; edge strips fall back to narrower kernels.
template <typename T>
void gemm_nn_v(std::size_t m, std::size_t n, std::size_t k, const T* A,
               const T* B, T* C, bool accumulate) {
  constexpr std::size_t W = VecOf<T>::lanes;
  const std::size_t jw = (n / (2 * W)) * (2 * W);
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    for (std::size_t j = 0; j < jw; j += 2 * W) {
      vec_t<T> acc[4][2];
      for (int r = 0; r < 4; ++r) {
        if (accumulate) {
          acc[r][0] = vload(C + (i + r) * n + j);
          acc[r][1] = vload(C + (i + r) * n + j + W);
        } else {
          acc[r][0] = vset1(T(0));
          acc[r][1] = vset1(T(0));
        }
      }
      for (std::size_t l = 0; l < k; ++l) {
        const vec_t<T> b0 = vload(B + l * n + j);
        const vec_t<T> b1 = vload(B + l * n + j + W);
        for (int r = 0; r < 4; ++r) {
          const vec_t<T> a = vset1(A[(i + r) * k + l]);
          acc[r][0] = vfma(a, b0, acc[r][0]);
          acc[r][1] = vfma(a, b1, acc[r][1]);
        }
      }
      for (int r = 0; r < 4; ++r) {
        vstore(C + (i + r) * n + j, acc[r][0]);
        vstore(C + (i + r) * n + j + W, acc[r][1]);
      }
    }
    // trailing columns, scalar
    for (std::size_t j = jw; j < n; ++j) {
      for (int r = 0; r < 4; ++r) {
        T acc = accumulate ? C[(i + r) * n + j] : T(0);
        for (std::size_t l = 0; l < k; ++l)
          acc += A[(i + r) * k + l] * B[l * n + j];
        C[(i + r) * n + j] = acc;
      }
    }
  }
  // trailing rows, single-row kernel
  for (; i < m; ++i) {
    T* crow = C + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t l = 0; l < k; ++l) {
      axpy_v(A[i * k + l], B + l * n, crow, n);
    }
  }
}

template <typename T>
void gemm_nt_v(std::size_t m, std::size_t n, std::size_t k, const T* A,
               const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = A + i * k;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      constexpr std::size_t W = VecOf<T>::lanes;
      vec_t<T> acc0 = vset1(T(0)), acc1 = vset1(T(0)), acc2 = vset1(T(0)),
               acc3 = vset1(T(0));
      const T* b0 = B + j * k;
      const T* b1 = B + (j + 1) * k;
      const T* b2 = B + (j + 2) * k;
      const T* b3 = B + (j + 3) * k;
      std::size_t l = 0;
      for (; l + W <= k; l += W) {
        const vec_t<T> a = vload(arow + l);
        acc0 = vfma(a, vload(b0 + l), acc0);
        acc1 = vfma(a, vload(b1 + l), acc1);
        acc2 = vfma(a, vload(b2 + l), acc2);
        acc3 = vfma(a, vload(b3 + l), acc3);
      }
      T s0 = hsum(acc0), s1 = hsum(acc1), s2 = hsum(acc2), s3 = hsum(acc3);
      for (; l < k; ++l) {
        s0 += arow[l] * b0[l];
        s1 += arow[l] * b1[l];
        s2 += arow[l] * b2[l];
        s3 += arow[l] * b3[l];
      }
      T* c = C + i * n + j;
      if (accumulate) {
        c[0] += s0; c[1] += s1; c[2] += s2; c[3] += s3;
      } else {
        c[0] = s0; c[1] = s1; c[2] = s2; c[3] = s3;
      }
    }
    for (; j < n; ++j) {
      const T s = dot_v(arow, B + j * k, k);
      T* c = C + i * n + j;
      *c = accumulate ? *c + s : s;
    }
  }
}

template <typename T>
void gemm_tn_v(std::size_t m, std::size_t n, std::size_t k, const T* A,
               const T* B, T* C, bool accumulate) {
  constexpr std::size_t W = VecOf<T>::lanes;
  const std::size_t jw = (n / (2 * W)) * (2 * W);
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    for (std::size_t j = 0; j < jw; j += 2 * W) {
      vec_t<T> acc[4][2];
      for (int r = 0; r < 4; ++r) {
        if (accumulate) {
          acc[r][0] = vload(C + (i + r) * n + j);
          acc[r][1] = vload(C + (i + r) * n + j + W);
        } else {
          acc[r][0] = vset1(T(0));
          acc[r][1] = vset1(T(0));
        }
      }
      for (std::size_t l = 0; l < k; ++l) {
        const vec_t<T> b0 = vload(B + l * n + j);
        const vec_t<T> b1 = vload(B + l * n + j + W);
        for (int r = 0; r < 4; ++r) {
          const vec_t<T> a = vset1(A[l * m + i + r]);
          acc[r][0] = vfma(a, b0, acc[r][0]);
          acc[r][1] = vfma(a, b1, acc[r][1]);
        }
      }
      for (int r = 0; r < 4; ++r) {
        vstore(C + (i + r) * n + j, acc[r][0]);
        vstore(C + (i + r) * n + j + W, acc[r][1]);
      }
    }
    for (std::size_t j = jw; j < n; ++j) {
      for (int r = 0; r < 4; ++r) {
        T acc = accumulate ? C[(i + r) * n + j] : T(0);
        for (std::size_t l = 0; l < k; ++l)
          acc += A[l * m + i + r] * B[l * n + j];
        C[(i + r) * n + j] = acc;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = C + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t l = 0; l < k; ++l) {
      axpy_v(A[l * m + i], B + l * n, crow, n);
    }
  }
}

const Table<float> kAvx2F32 = {
    "avx2",          add_v<float>,    sub_v<float>,      mul_v<float>,
    scale_v<float>,  axpy_v<float>,   dot_v<float>,      sum_v<float>,
    max_v<float>,    relu_v<float>,   relu_grad_v<float>, vexp_f32,
    gemm_nn_v<float>, gemm_nt_v<float>, gemm_tn_v<float>,
};

const Table<double> kAvx2F64 = {
    "avx2",          add_v<double>,   sub_v<double>,      mul_v<double>,
    scale_v<double>, axpy_v<double>,  dot_v<double>,      sum_v<double>,
    max_v<double>,   relu_v<double>,  relu_grad_v<double>, vexp_f64,
    gemm_nn_v<double>, gemm_nt_v<double>, gemm_tn_v<double>,
};

}  // namespace

const Table<float>* avx2_f32() { return &kAvx2F32; }
const Table<double>* avx2_f64() { return &kAvx2F64; }

}  // namespace sacn::kernels

#else  // no AVX2/FMA at compile time

namespace sacn::kernels {
const Table<float>* avx2_f32() { return nullptr; }
const Table<double>* avx2_f64() { return nullptr; }
}  // namespace sacn::kernels

#endif
