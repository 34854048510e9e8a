#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "sacn/rng.hpp"
#include "sacn/tape.hpp"
#include "sacn/tensor.hpp"

namespace sacn::test {

// Brute-force row-major matmul in long double, independent of the kernel layer.
inline std::vector<long double> matmul_ref(const std::vector<long double>& a,
                                           const std::vector<long double>& b,
                                           std::size_t m, std::size_t k,
                                           std::size_t p) {
  std::vector<long double> c(m * p, 0.0L);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l)
      for (std::size_t j = 0; j < p; ++j) c[i * p + j] += a[i * k + l] * b[l * p + j];
  return c;
}

inline double rel_err(double got, double want, double floor = 1e-12) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

// max|a-b| / max(max|a|, max|b|, floor) over whole tensors.
template <typename T>
double group_rel_err(const Tensor<T>& a, const Tensor<T>& b,
                     double floor = 1e-12) {
  double diff = 0, mag = floor;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
    mag = std::max({mag, std::abs(double(a[i])), std::abs(double(b[i]))});
  }
  return diff / mag;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
  return diff;
}

// Builds a scalar root from leaf tensors on a fresh tape.
using BuildFn =
    std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Central finite differences against the tape's analytic gradients, all in
// 64-bit. Returns the worst per-leaf group relative error.
inline double fd_max_rel_err(const std::vector<Tensor<double>>& leaves,
                             const BuildFn& build, double eps = 1e-5) {
  auto eval = [&](const std::vector<Tensor<double>>& ls) {
    Tape<double> t;
    std::vector<Var> vs;
    vs.reserve(ls.size());
    for (const auto& l : ls) vs.push_back(t.leaf(l));
    Var root = build(t, vs);
    return t.value(root)[0];
  };

  Tape<double> t;
  std::vector<Var> vs;
  for (const auto& l : leaves) vs.push_back(t.leaf(l));
  Var root = build(t, vs);
  t.backward(root);

  double worst = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor<double>& analytic = t.grad(vs[li]);
    Tensor<double> fd(leaves[li].shape());
    for (std::size_t e = 0; e < leaves[li].numel(); ++e) {
      std::vector<Tensor<double>> pert = leaves;
      pert[li][e] += eps;
      const double fp = eval(pert);
      pert[li][e] -= 2 * eps;
      const double fm = eval(pert);
      fd[e] = (fp - fm) / (2 * eps);
    }
    worst = std::max(worst, group_rel_err(analytic, fd));
  }
  return worst;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, std::vector<std::size_t> shape, T lo = T(-1),
                        T hi = T(1)) {
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = lo + (hi - lo) * T(rng.uniform());
  return t;
}

// Uniform magnitudes in [0.2, 1] with random signs: keeps relu/sqrt/norm
// inputs away from their kinks so finite differences stay valid.
template <typename T>
Tensor<T> random_signed_offzero(Rng& rng, std::vector<std::size_t> shape) {
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const T mag = T(0.2) + T(0.8) * T(rng.uniform());
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace sacn::test
