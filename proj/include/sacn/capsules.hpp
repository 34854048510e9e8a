#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sacn/kernels.hpp"
#include "sacn/tape.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

// Capsule conv output [B x (types*dim) x H x W] -> squashed poses
// [B x (types*H*W) x dim]. Channel c = t*dim + d carries pose component d of
// capsule type t, the baseline reshape convention.
template <typename T>
Var primary_caps_poses(Tape<T>& t, Var conv_out, std::size_t types,
                       std::size_t dim) {
  const auto& s = t.value(conv_out);
  if (s.rank() != 4 || s.extent(1) != types * dim)
    throw std::invalid_argument("primary caps reshape mismatch: " + s.shape_str() +
                                " vs " + std::to_string(types) + " types x " +
                                std::to_string(dim) + " dim");
  const std::size_t b = s.extent(0), hw = s.extent(2) * s.extent(3);
  Var split = t.reshape(conv_out, {b, types, dim, hw});
  Var moved = t.transpose_last2(split);  // [B x types x HW x dim]
  Var poses = t.reshape(moved, {b, types * hw, dim});
  return t.squash_rows(poses);
}

// u_hat[b,i,j,:] = W[i,j] y[b,i,:]
template <typename T>
Var caps_predictions(Tape<T>& t, Var w, Var poses) {
  return t.caps_predict(w, poses);
}

// One routing pass, unrolled on the tape so gradients flow through the
// couplings. Exposes the final-iteration state for inspection.
struct RoutingOut {
  Var b;  // [B x I x J] logits entering the last iteration
  Var c;  // [B x I x J] couplings of the last iteration
  Var s;  // [B x J x O] pre-squash sums
  Var v;  // [B x J x O] class capsules
};

template <typename T>
RoutingOut route(Tape<T>& t, Var u_hat, int n_iters) {
  if (n_iters < 1)
    throw std::invalid_argument("routing needs n_iters >= 1, got " +
                                std::to_string(n_iters));
  const auto& us = t.value(u_hat);
  if (us.rank() != 4)
    throw std::invalid_argument("route expects u_hat [B x I x J x O], got " +
                                us.shape_str());
  const std::size_t nb = us.extent(0), ni = us.extent(1), nj = us.extent(2);
  RoutingOut out;
  out.b = t.constant(Tensor<T>({nb, ni, nj}));
  for (int it = 0; it < n_iters; ++it) {
    out.c = t.softmax(out.b, 2);
    out.s = t.caps_weighted_sum(out.c, u_hat);
    out.v = t.squash_rows(out.s);
    if (it + 1 < n_iters) out.b = t.add(out.b, t.caps_agreement(u_hat, out.v));
  }
  return out;
}

// Lengths are the class probabilities; argmax with ties to the lowest index.
template <typename T>
std::size_t classify_item(const T* v, std::size_t classes, std::size_t dim,
                          std::vector<T>* lengths_out = nullptr) {
  const auto& k = kernels::active<T>();
  std::size_t best = 0;
  T best_len = T(-1);
  for (std::size_t j = 0; j < classes; ++j) {
    const T len = std::sqrt(k.dot(v + j * dim, v + j * dim, dim));
    if (lengths_out) lengths_out->push_back(len);
    if (len > best_len) {
      best_len = len;
      best = j;
    }
  }
  return best;
}

// v: [B x J x O] -> per-item predicted class.
template <typename T>
std::vector<std::size_t> classify(const Tensor<T>& v,
                                  std::vector<std::vector<T>>* lengths = nullptr) {
  if (v.rank() != 3)
    throw std::invalid_argument("classify expects [B x J x O], got " +
                                v.shape_str());
  const std::size_t nb = v.extent(0), nj = v.extent(1), od = v.extent(2);
  if (nj < 1) throw std::invalid_argument("classify needs at least one class");
  std::vector<std::size_t> out;
  out.reserve(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    std::vector<T> lens;
    out.push_back(classify_item(v.data() + b * nj * od, nj, od, &lens));
    if (lengths) lengths->push_back(std::move(lens));
  }
  return out;
}

}  // namespace sacn
