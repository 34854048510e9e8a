#pragma once

#include <stdexcept>

#include "sacn/tape.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

// Attention projections are 1x1 convs without bias; callers hand in weight
// Vars that already went through spectral normalization (a constant scale on
// the tape, so gradients reach the raw weights).
struct AttentionVars {
  Var w_f;   // [C/8 x C x 1 x 1]
  Var w_g;   // [C/8 x C x 1 x 1]
  Var w_h;   // [C x C x 1 x 1]
  Var alpha; // [1], starts at exactly 0
};

struct AttentionOut {
  Var eta;   // [B x N x N] scores
  Var beta;  // [B x N x N] attention map
  Var o;     // [B x C x N]
  Var y;     // [B x C x H x W], same layout as the input
};

inline std::size_t attention_reduced_channels(std::size_t c) {
  return c / 8 > 0 ? c / 8 : 1;
}

namespace detail {

// 1x1 conv without bias, flattened to [B x outC x N].
template <typename T>
Var project_1x1(Tape<T>& t, Var x4, Var w) {
  const auto& xs = t.value(x4);
  const std::size_t b = xs.extent(0), h = xs.extent(2), wd = xs.extent(3);
  Var zb = t.constant(Tensor<T>({t.value(w).extent(0)}));
  Var conv = t.conv2d(x4, w, zb, 1, 0);
  return t.reshape(conv, {b, t.value(w).extent(0), h * wd});
}

}  // namespace detail

// eta[b,i,j] = f(x_i) . g(x_j), one (N x C/8)(C/8 x N) product per item.
template <typename T>
Var attention_scores(Tape<T>& t, Var x4, Var w_f, Var w_g) {
  Var f = detail::project_1x1(t, x4, w_f);
  Var g = detail::project_1x1(t, x4, w_g);
  return t.bmm(t.transpose_last2(f), g);
}

// Softmax over index i (axis 1 of [B x i x j]) as the equations print it;
// axis 2 gives the alternate convention for comparison runs.
template <typename T>
Var attention_map(Tape<T>& t, Var eta, std::size_t softmax_axis = 1) {
  if (softmax_axis != 1 && softmax_axis != 2)
    throw std::invalid_argument("attention softmax axis must be 1 or 2");
  return t.softmax(eta, softmax_axis);
}

// o[b,:,j] = sum_i beta[b,i,j] * h(x_i)  ==  h . beta per item.
template <typename T>
Var attention_output(Tape<T>& t, Var beta, Var x4, Var w_h) {
  Var h = detail::project_1x1(t, x4, w_h);
  return t.bmm(h, beta);
}

template <typename T>
AttentionOut attention_forward(Tape<T>& t, Var x4, const AttentionVars& p,
                               std::size_t softmax_axis = 1) {
  const auto& xs = t.value(x4);
  if (xs.rank() != 4)
    throw std::invalid_argument("attention expects [B x C x H x W], got " +
                                xs.shape_str());
  const std::size_t b = xs.extent(0), c = xs.extent(1), h = xs.extent(2),
                    w = xs.extent(3);
  AttentionOut out;
  out.eta = attention_scores(t, x4, p.w_f, p.w_g);
  out.beta = attention_map(t, out.eta, softmax_axis);
  out.o = attention_output(t, out.beta, x4, p.w_h);
  Var x_mat = t.reshape(x4, {b, c, h * w});
  Var y_mat = t.add(t.gate(p.alpha, out.o), x_mat);
  out.y = t.reshape(y_mat, {b, c, h, w});
  return out;
}

// Column j of beta as an H x W map, min-max normalized to [0,1]; a constant
// column has no range and comes back all zeros.
template <typename T>
Tensor<T> export_attention(const Tensor<T>& beta, std::size_t j, std::size_t h,
                           std::size_t w) {
  if (beta.rank() != 2 || beta.extent(0) != beta.extent(1))
    throw std::invalid_argument("export_attention expects a square beta, got " +
                                beta.shape_str());
  const std::size_t n = beta.extent(0);
  if (j >= n)
    throw std::invalid_argument("query location " + std::to_string(j) +
                                " out of range for N=" + std::to_string(n));
  if (h * w != n)
    throw std::invalid_argument("H*W does not match N");
  Tensor<T> map({h, w});
  T lo = beta.at(0, j), hi = beta.at(0, j);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = beta.at(i, j);
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (hi > lo)
    for (std::size_t i = 0; i < n; ++i) map[i] = (beta.at(i, j) - lo) / (hi - lo);
  return map;
}

}  // namespace sacn
