#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "sacn/rng.hpp"
#include "sacn/tape.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

// Zero-mean normal init; the variance is a config knob (0.15 medical preset,
// 0.01 natural-image preset).
struct InitSpec {
  double variance = 0.15;
};

template <typename T>
Tensor<T> init_params(const InitSpec& spec, Rng& rng,
                      const std::vector<std::size_t>& shape) {
  if (!(spec.variance > 0.0))
    throw std::invalid_argument("init variance must be positive");
  const double stddev = std::sqrt(spec.variance);
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(stddev * rng.normal());
  return t;
}

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [outC x inC x kH x kW]
  Tensor<T> bias;    // [outC]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x[B x D] * w[D x D'] + b[D']
template <typename T>
Var fully_connected(Tape<T>& t, Var x, Var w, Var b) {
  return t.add_rowvec(t.matmul(x, w), b);
}

// Power-iteration state for one weight matrix. u estimates the left singular
// vector and persists across steps (checkpointed); one iteration per step is
// the default.
template <typename T>
struct SpectralNormState {
  Tensor<T> u;  // [rows], unit norm
  int n_power_iters = 1;
  bool warned_zero = false;
};

template <typename T>
SpectralNormState<T> make_spectral_state(Rng& rng, std::size_t rows) {
  SpectralNormState<T> s;
  s.u = Tensor<T>({rows});
  T norm = 0;
  while (norm == T(0)) {
    for (std::size_t i = 0; i < rows; ++i) s.u[i] = static_cast<T>(rng.normal());
    norm = std::sqrt(kernels::active<T>().dot(s.u.data(), s.u.data(), rows));
  }
  kernels::active<T>().scale(s.u.data(), T(1) / norm, s.u.data(), rows);
  return s;
}

// One-or-more power-iteration updates of (u, v) on w viewed as rows x cols;
// returns sigma_hat = u'Wv. Treated as a constant during backprop. A zero
// matrix flips warned_zero and yields sigma_hat = 1 (w passes unchanged).
template <typename T>
T spectral_norm_step(const Tensor<T>& w, std::size_t rows, std::size_t cols,
                     SpectralNormState<T>& s) {
  if (w.numel() != rows * cols || s.u.numel() != rows)
    throw std::invalid_argument("spectral_norm_step shape mismatch");
  const auto& k = kernels::active<T>();
  bool any = false;
  for (std::size_t i = 0; i < w.numel() && !any; ++i) any = w[i] != T(0);
  if (!any) {
    s.warned_zero = true;
    return T(1);
  }
  std::vector<T> v(cols);
  T sigma = T(0);
  for (int it = 0; it < s.n_power_iters; ++it) {
    // v = normalize(W^T u)
    k.gemm_tn(cols, 1, rows, w.data(), s.u.data(), v.data(), false);
    T vn = std::sqrt(k.dot(v.data(), v.data(), cols));
    if (vn == T(0)) {
      // u landed in the null space; restart from a deterministic direction
      for (std::size_t i = 0; i < rows; ++i) s.u[i] = T(1) / std::sqrt(T(rows));
      k.gemm_tn(cols, 1, rows, w.data(), s.u.data(), v.data(), false);
      vn = std::sqrt(k.dot(v.data(), v.data(), cols));
      if (vn == T(0)) {
        s.warned_zero = true;
        return T(1);
      }
    }
    k.scale(v.data(), T(1) / vn, v.data(), cols);
    // u = normalize(W v)
    k.gemm_nn(rows, 1, cols, w.data(), v.data(), s.u.data(), false);
    const T un = std::sqrt(k.dot(s.u.data(), s.u.data(), rows));
    k.scale(s.u.data(), T(1) / un, s.u.data(), rows);
    sigma = un;  // u'Wv with normalized u equals |Wv|
  }
  return sigma;
}

// w / sigma_hat with sigma_hat from one state update.
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& w, std::size_t rows,
                             std::size_t cols, SpectralNormState<T>& s) {
  const T sigma = spectral_norm_step(w, rows, cols, s);
  Tensor<T> out(w.shape());
  kernels::active<T>().scale(w.data(), T(1) / sigma, out.data(), w.numel());
  return out;
}

}  // namespace sacn
