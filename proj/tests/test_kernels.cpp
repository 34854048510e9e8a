#include <cmath>
#include <cstdlib>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "sacn/kernels.hpp"
#include "sacn/rng.hpp"

using namespace sacn;
using namespace sacn::test;

namespace {

// Sizes that exercise full vector lanes, tails, and the empty case.
const std::vector<std::size_t> kSizes = {0, 1, 2, 3, 7, 8, 9, 15, 16, 17, 31, 64, 67, 255};

template <typename T>
std::vector<T> rand_vec(Rng& rng, std::size_t n, T lo = T(-2), T hi = T(2)) {
  std::vector<T> v(n);
  for (auto& x : v) x = lo + (hi - lo) * T(rng.uniform());
  return v;
}

}  // namespace

TEST_CASE_TEMPLATE("kernels: elementwise ops agree bitwise across backends", T,
                   float, double) {
  const kernels::Table<T>& ref = []() -> const kernels::Table<T>& {
    if constexpr (std::is_same_v<T, float>) return kernels::scalar_f32();
    else return kernels::scalar_f64();
  }();
  const kernels::Table<T>* alt = []() -> const kernels::Table<T>* {
    if constexpr (std::is_same_v<T, float>) return kernels::avx2_f32();
    else return kernels::avx2_f64();
  }();
  if (!alt) return;  // SIMD table not built on this machine

  Rng rng(42);
  for (std::size_t n : kSizes) {
    auto a = rand_vec<T>(rng, n);
    auto b = rand_vec<T>(rng, n);
    std::vector<T> o1(n), o2(n);

    ref.add(a.data(), b.data(), o1.data(), n);
    alt->add(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);

    ref.sub(a.data(), b.data(), o1.data(), n);
    alt->sub(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);

    ref.mul(a.data(), b.data(), o1.data(), n);
    alt->mul(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);

    ref.scale(a.data(), T(1.7), o1.data(), n);
    alt->scale(a.data(), T(1.7), o2.data(), n);
    CHECK(o1 == o2);

    ref.relu(a.data(), o1.data(), n);
    alt->relu(a.data(), o2.data(), n);
    CHECK(o1 == o2);

    if (n > 0) {
      CHECK(ref.max(a.data(), n) == alt->max(a.data(), n));
    }
  }
}

TEST_CASE_TEMPLATE("kernels: relu_grad accumulation agrees bitwise", T, float,
                   double) {
  const kernels::Table<T>* alt = std::is_same_v<T, float>
                                     ? (const kernels::Table<T>*)kernels::avx2_f32()
                                     : (const kernels::Table<T>*)kernels::avx2_f64();
  if (!alt) return;
  const kernels::Table<T>& ref = std::is_same_v<T, float>
                                     ? *(const kernels::Table<T>*)&kernels::scalar_f32()
                                     : *(const kernels::Table<T>*)&kernels::scalar_f64();
  Rng rng(43);
  for (std::size_t n : kSizes) {
    auto x = rand_vec<T>(rng, n);
    auto g = rand_vec<T>(rng, n);
    auto acc = rand_vec<T>(rng, n);
    auto a1 = acc, a2 = acc;
    ref.relu_grad(x.data(), g.data(), a1.data(), n);
    alt->relu_grad(x.data(), g.data(), a2.data(), n);
    CHECK(a1 == a2);
  }
}

TEST_CASE_TEMPLATE("kernels: reductions and axpy match a long-double oracle", T,
                   float, double) {
  const double tol = std::is_same_v<T, float> ? 2e-5 : 1e-13;
  Rng rng(7);
  auto run = [&](const kernels::Table<T>& t) {
    for (std::size_t n : kSizes) {
      auto a = rand_vec<T>(rng, n);
      auto b = rand_vec<T>(rng, n);
      long double s = 0, d = 0;
      for (std::size_t i = 0; i < n; ++i) {
        s += (long double)a[i];
        d += (long double)a[i] * (long double)b[i];
      }
      CHECK(std::abs((long double)t.sum(a.data(), n) - s) <=
            tol * std::max<long double>(1.0L, std::abs(s) + n));
      CHECK(std::abs((long double)t.dot(a.data(), b.data(), n) - d) <=
            tol * std::max<long double>(1.0L, std::abs(d) + n));

      auto y = rand_vec<T>(rng, n);
      std::vector<long double> yref(n);
      for (std::size_t i = 0; i < n; ++i)
        yref[i] = (long double)y[i] + 0.37L * (long double)a[i];
      t.axpy(T(0.37), a.data(), y.data(), n);
      for (std::size_t i = 0; i < n; ++i)
        CHECK(std::abs((long double)y[i] - yref[i]) <= tol * 4);
    }
  };
  run(std::is_same_v<T, float> ? *(const kernels::Table<T>*)&kernels::scalar_f32()
                               : *(const kernels::Table<T>*)&kernels::scalar_f64());
  const kernels::Table<T>* alt = std::is_same_v<T, float>
                                     ? (const kernels::Table<T>*)kernels::avx2_f32()
                                     : (const kernels::Table<T>*)kernels::avx2_f64();
  if (alt) run(*alt);
}

TEST_CASE("kernels: vexp f32 within 2e-7 relative of std::exp on [-87,87]") {
  Rng rng(11);
  auto check_table = [&](const kernels::Table<float>& t) {
    std::vector<float> xs;
    for (int i = 0; i < 400; ++i) xs.push_back(float(-87.0 + 174.0 * rng.uniform()));
    for (float v : {0.0f, -0.0f, 1.0f, -1.0f, 87.0f, -87.0f}) xs.push_back(v);
    std::vector<float> out(xs.size());
    t.vexp(xs.data(), out.data(), xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      CHECK(std::isfinite(out[i]));
      CHECK(out[i] > 0.0f);
      CHECK(rel_err(out[i], std::exp((double)xs[i])) < 2e-7);
    }
    // outside the contract range: never NaN, never negative
    const std::vector<float> wide = {-200.0f, -88.0f, 88.0f, 700.0f};
    std::vector<float> wout(wide.size());
    t.vexp(wide.data(), wout.data(), wide.size());
    for (float v : wout) {
      CHECK(!std::isnan(v));
      CHECK(v >= 0.0f);
    }
  };
  check_table(kernels::scalar_f32());
  if (kernels::avx2_f32()) check_table(*kernels::avx2_f32());
}

TEST_CASE("kernels: vexp f64 equals std::exp") {
  Rng rng(12);
  auto xs = rand_vec<double>(rng, 100, -700.0, 700.0);
  std::vector<double> o1(xs.size()), o2(xs.size());
  kernels::scalar_f64().vexp(xs.data(), o1.data(), xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(o1[i] == std::exp(xs[i]));
  if (kernels::avx2_f64()) {
    kernels::avx2_f64()->vexp(xs.data(), o2.data(), xs.size());
    CHECK(o1 == o2);
  }
}

TEST_CASE_TEMPLATE("kernels: gemm variants match brute-force oracle", T, float,
                   double) {
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
  Rng rng(21);
  const std::size_t dims[] = {1, 2, 3, 5, 8, 13, 17};
  auto run = [&](const kernels::Table<T>& t) {
    for (std::size_t m : dims)
      for (std::size_t kk : dims)
        for (std::size_t n : dims) {
          auto a = rand_vec<T>(rng, m * kk);
          auto b = rand_vec<T>(rng, kk * n);
          auto c0 = rand_vec<T>(rng, m * n);

          std::vector<long double> al(a.begin(), a.end()), bl(b.begin(), b.end());
          auto want = matmul_ref(al, bl, m, kk, n);

          // nn, overwrite then accumulate
          std::vector<T> c = c0;
          t.gemm_nn(m, n, kk, a.data(), b.data(), c.data(), false);
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(std::abs((long double)c[i] - want[i]) <=
                  tol * std::max<long double>(1.0L, std::abs(want[i])) * kk);
          c = c0;
          t.gemm_nn(m, n, kk, a.data(), b.data(), c.data(), true);
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(std::abs((long double)c[i] - (want[i] + (long double)c0[i])) <=
                  tol * std::max<long double>(1.0L, std::abs(want[i]) + 1) * kk);

          // nt: B stored as [n x k]
          std::vector<T> bt(kk * n);
          for (std::size_t r = 0; r < kk; ++r)
            for (std::size_t cc = 0; cc < n; ++cc) bt[cc * kk + r] = b[r * n + cc];
          c = c0;
          t.gemm_nt(m, n, kk, a.data(), bt.data(), c.data(), false);
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(std::abs((long double)c[i] - want[i]) <=
                  tol * std::max<long double>(1.0L, std::abs(want[i])) * kk);

          // tn: A stored as [k x m]
          std::vector<T> at(m * kk);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t cc = 0; cc < kk; ++cc) at[cc * m + r] = a[r * kk + cc];
          c = c0;
          t.gemm_tn(m, n, kk, at.data(), b.data(), c.data(), false);
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(std::abs((long double)c[i] - want[i]) <=
                  tol * std::max<long double>(1.0L, std::abs(want[i])) * kk);
        }
  };
  run(std::is_same_v<T, float> ? *(const kernels::Table<T>*)&kernels::scalar_f32()
                               : *(const kernels::Table<T>*)&kernels::scalar_f64());
  const kernels::Table<T>* alt = std::is_same_v<T, float>
                                     ? (const kernels::Table<T>*)kernels::avx2_f32()
                                     : (const kernels::Table<T>*)kernels::avx2_f64();
  if (alt) run(*alt);
}

TEST_CASE("kernels: backend parsing and selection") {
  CHECK(kernels::parse_backend("auto") == kernels::Backend::Auto);
  CHECK(kernels::parse_backend("scalar") == kernels::Backend::Scalar);
  CHECK(kernels::parse_backend("avx2") == kernels::Backend::Avx2);
  CHECK_THROWS_AS(kernels::parse_backend("cuda"), std::invalid_argument);

  kernels::select(kernels::Backend::Scalar);
  CHECK(kernels::selected() == kernels::Backend::Scalar);
  CHECK(std::string(kernels::active<float>().name) == "scalar");

  if (kernels::avx2_available()) {
    kernels::select(kernels::Backend::Avx2);
    CHECK(std::string(kernels::active<float>().name) == "avx2");
  } else {
    CHECK_THROWS_AS(kernels::select(kernels::Backend::Avx2), std::invalid_argument);
  }
  kernels::select(kernels::Backend::Auto);
}

TEST_CASE("kernels: SACN_KERNELS environment override") {
  setenv("SACN_KERNELS", "scalar", 1);
  kernels::select(kernels::Backend::Auto);
  CHECK(std::string(kernels::active<float>().name) == "scalar");
  unsetenv("SACN_KERNELS");
  kernels::select(kernels::Backend::Auto);
  if (kernels::avx2_available())
    CHECK(std::string(kernels::active<float>().name) == "avx2");
}
