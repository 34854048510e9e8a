#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "sacn/tape.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

struct MarginConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;

  void validate() const {
    if (!(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0))
      throw std::invalid_argument("margin config needs 0 < m_minus < m_plus < 1");
    if (!(lambda > 0.0)) throw std::invalid_argument("margin lambda must be > 0");
  }
};

template <typename T>
Tensor<T> one_hot_mask(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor<T> m({labels.size(), classes});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= classes)
      throw std::invalid_argument("label " + std::to_string(labels[b]) +
                                  " out of range for " + std::to_string(classes) +
                                  " classes");
    m.at(b, labels[b]) = T(1);
  }
  return m;
}

// Sum over classes of T_k max(0, m+ - |v_k|)^2 + lambda (1-T_k) max(0, |v_k| - m-)^2,
// averaged over the batch. Lengths come from the capsule layer and must sit
// in [0,1].
template <typename T>
Var margin_loss(Tape<T>& t, Var lengths, const std::vector<std::size_t>& labels,
                const MarginConfig& cfg = {}) {
  cfg.validate();
  const Tensor<T>& lv = t.value(lengths);
  if (lv.rank() != 2 || lv.extent(0) != labels.size())
    throw std::invalid_argument("margin_loss expects lengths [B x J] matching " +
                                std::to_string(labels.size()) + " labels, got " +
                                lv.shape_str());
  for (std::size_t i = 0; i < lv.numel(); ++i)
    if (!(lv[i] >= T(0) && lv[i] <= T(1)))
      throw std::invalid_argument("capsule length " + std::to_string(double(lv[i])) +
                                  " outside [0,1]");
  const std::size_t b = lv.extent(0), j = lv.extent(1);
  Tensor<T> pos_mask = one_hot_mask<T>(labels, j);
  Tensor<T> neg_mask({b, j});
  for (std::size_t i = 0; i < neg_mask.numel(); ++i)
    neg_mask[i] = T(cfg.lambda) * (T(1) - pos_mask[i]);

  Var present = t.mul_mask(
      t.square(t.relu(t.affine(lengths, T(-1), T(cfg.m_plus)))), std::move(pos_mask));
  Var absent = t.mul_mask(
      t.square(t.relu(t.affine(lengths, T(1), T(-cfg.m_minus)))), std::move(neg_mask));
  return t.scale(t.sum_all(t.add(present, absent)), T(1) / T(b));
}

// Two ReLU hidden layers and a sigmoid output of I_size pixels.
struct DecoderVars {
  Var w1, b1;  // [J*O x h1], [h1]
  Var w2, b2;  // [h1 x h2], [h2]
  Var w3, b3;  // [h2 x I_size], [I_size]
};

// v [B x J x O] masked per sample by mask [B x J] (training: the true class;
// inference: the selected class), then decoded to [B x I_size] in (0,1).
template <typename T>
Var decode(Tape<T>& t, Var v, const Tensor<T>& mask, const DecoderVars& d) {
  const Tensor<T>& vs = t.value(v);
  if (vs.rank() != 3 || mask.rank() != 2 || mask.extent(0) != vs.extent(0) ||
      mask.extent(1) != vs.extent(1))
    throw std::invalid_argument("decode mask mismatch: v " + vs.shape_str() +
                                " vs mask " + mask.shape_str());
  const std::size_t b = vs.extent(0), j = vs.extent(1), o = vs.extent(2);
  Tensor<T> expanded({b, j, o});
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t jj = 0; jj < j; ++jj)
      for (std::size_t oo = 0; oo < o; ++oo)
        expanded.at(bb, jj, oo) = mask.at(bb, jj);
  Var flat = t.reshape(t.mul_mask(v, std::move(expanded)), {b, j * o});
  Var h1 = t.relu(t.add_rowvec(t.matmul(flat, d.w1), d.b1));
  Var h2 = t.relu(t.add_rowvec(t.matmul(h1, d.w2), d.b2));
  return t.sigmoid(t.add_rowvec(t.matmul(h2, d.w3), d.b3));
}

// Sum of squared differences per sample (Eq. sum, not mean), averaged over
// the batch.
template <typename T>
Var reconstruction_loss(Tape<T>& t, Var image, Var recon) {
  const Tensor<T>& iv = t.value(image);
  if (!iv.same_shape(t.value(recon)))
    throw std::invalid_argument("reconstruction shapes differ: " + iv.shape_str() +
                                " vs " + t.value(recon).shape_str());
  if (iv.rank() != 2)
    throw std::invalid_argument("reconstruction_loss expects [B x I_size]");
  const std::size_t b = iv.extent(0);
  return t.scale(t.sum_all(t.square(t.sub(image, recon))), T(1) / T(b));
}

// L_T = L_M + xi * I_size * L_R
template <typename T>
Var total_loss(Tape<T>& t, Var l_m, Var l_r, std::size_t i_size,
               double xi = 0.0005) {
  return t.add(l_m, t.scale(l_r, T(xi) * T(i_size)));
}

// Per-item sum of couplings toward each class; the class with the largest
// aggregate coupling wins, ties to the lowest index. Degenerate under one
// routing iteration (all couplings equal), hence not the default selector.
template <typename T>
std::vector<std::size_t> select_highest_coupling(const Tensor<T>& c) {
  if (c.rank() != 3)
    throw std::invalid_argument("couplings must be [B x I x J], got " +
                                c.shape_str());
  const std::size_t b = c.extent(0), ni = c.extent(1), nj = c.extent(2);
  std::vector<std::size_t> out(b, 0);
  for (std::size_t bb = 0; bb < b; ++bb) {
    T best = T(-1);
    for (std::size_t j = 0; j < nj; ++j) {
      T acc = T(0);
      for (std::size_t i = 0; i < ni; ++i) acc += c.at(bb, i, j);
      if (acc > best) {
        best = acc;
        out[bb] = j;
      }
    }
  }
  return out;
}

}  // namespace sacn
