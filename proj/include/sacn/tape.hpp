#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sacn/kernels.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

// Handle into a Tape's node list.
struct Var {
  std::uint32_t idx = 0xffffffffu;
  bool valid() const { return idx != 0xffffffffu; }
};

// Reverse-mode tape over a closed op set. Ops append nodes in topological
// order; backward() walks the list in reverse, so each node's closure sees
// its output gradient fully accumulated before it fires. Gradients persist
// across backward() calls until zero_grads() (repeated calls accumulate).
// A tape is confined to one thread; the Tensors handed in are never mutated.
template <typename T>
class Tape {
 public:
  Var constant(Tensor<T> v) { return push(std::move(v), false); }
  Var leaf(Tensor<T> v) { return push(std::move(v), true); }

  const Tensor<T>& value(Var v) const { return nodes_[v.idx].value; }

  // Accumulated gradient; zero tensor when nothing has flowed in yet.
  const Tensor<T>& grad(Var v) { return ensure_grad(v.idx); }

  std::size_t size() const { return nodes_.size(); }

  // Each call propagates one fresh unit of gradient from the root through a
  // per-call flow buffer, then adds the result into every node's persistent
  // grad, so repeated calls accumulate exact multiples.
  void backward(Var root) {
    Node& r = nodes_[root.idx];
    if (r.value.numel() != 1)
      throw std::invalid_argument("backward requires a scalar root, got shape " +
                                  r.value.shape_str());
    ensure_flow(root.idx)[0] = T(1);
    for (std::uint32_t i = root.idx + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backprop && n.flow_live) n.backprop();
    }
    for (std::uint32_t i = 0; i <= root.idx; ++i) {
      Node& n = nodes_[i];
      if (!n.flow_live) continue;
      k().axpy(T(1), n.flow.data(), ensure_grad(i).data(), n.flow.numel());
      n.flow_live = false;
      n.flow = Tensor<T>();
    }
  }

  void zero_grads() {
    for (Node& n : nodes_) {
      n.grad_live = false;
      n.grad = Tensor<T>();
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same_shape("add", a, b);
    Tensor<T> out(value(a).shape());
    k().add(value(a).data(), value(b).data(), out.data(), out.numel());
    Var r = push(std::move(out), needs(a) || needs(b));
    if (needs(r)) record(r, [this, r, a, b] {
      const Tensor<T>& g = flow(r.idx);
      if (needs(a)) k().axpy(T(1), g.data(), ensure_flow(a.idx).data(), g.numel());
      if (needs(b)) k().axpy(T(1), g.data(), ensure_flow(b.idx).data(), g.numel());
    });
    return r;
  }

  Var sub(Var a, Var b) {
    check_same_shape("sub", a, b);
    Tensor<T> out(value(a).shape());
    k().sub(value(a).data(), value(b).data(), out.data(), out.numel());
    Var r = push(std::move(out), needs(a) || needs(b));
    if (needs(r)) record(r, [this, r, a, b] {
      const Tensor<T>& g = flow(r.idx);
      if (needs(a)) k().axpy(T(1), g.data(), ensure_flow(a.idx).data(), g.numel());
      if (needs(b)) k().axpy(T(-1), g.data(), ensure_flow(b.idx).data(), g.numel());
    });
    return r;
  }

  Var mul(Var a, Var b) {
    check_same_shape("mul", a, b);
    Tensor<T> out(value(a).shape());
    k().mul(value(a).data(), value(b).data(), out.data(), out.numel());
    Var r = push(std::move(out), needs(a) || needs(b));
    if (needs(r)) record(r, [this, r, a, b] {
      const Tensor<T>& g = flow(r.idx);
      const std::size_t n = g.numel();
      Tensor<T> tmp(g.shape());
      if (needs(a)) {
        k().mul(g.data(), value(b).data(), tmp.data(), n);
        k().axpy(T(1), tmp.data(), ensure_flow(a.idx).data(), n);
      }
      if (needs(b)) {
        k().mul(g.data(), value(a).data(), tmp.data(), n);
        k().axpy(T(1), tmp.data(), ensure_flow(b.idx).data(), n);
      }
    });
    return r;
  }

  // out = mul*x + add, elementwise with scalar constants.
  Var affine(Var x, T mul, T add) {
    Tensor<T> out(value(x).shape());
    const Tensor<T>& xv = value(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mul * xv[i] + add;
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x, mul] {
      const Tensor<T>& g = flow(r.idx);
      k().axpy(mul, g.data(), ensure_flow(x.idx).data(), g.numel());
    });
    return r;
  }

  Var scale(Var x, T c) { return affine(x, c, T(0)); }

  // Elementwise product with a fixed tensor (masking).
  Var mul_mask(Var x, Tensor<T> mask) {
    if (!value(x).same_shape(mask))
      throw std::invalid_argument("mul_mask shape mismatch: " + value(x).shape_str() +
                                  " vs " + mask.shape_str());
    Tensor<T> out(value(x).shape());
    k().mul(value(x).data(), mask.data(), out.data(), out.numel());
    Var m = constant(std::move(mask));
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x, m] {
      const Tensor<T>& g = flow(r.idx);
      Tensor<T> tmp(g.shape());
      k().mul(g.data(), value(m).data(), tmp.data(), g.numel());
      k().axpy(T(1), tmp.data(), ensure_flow(x.idx).data(), g.numel());
    });
    return r;
  }

  // Scalar variable times tensor (the one sanctioned broadcast).
  Var gate(Var s, Var x) {
    if (value(s).numel() != 1)
      throw std::invalid_argument("gate expects a scalar gate, got " +
                                  value(s).shape_str());
    Tensor<T> out(value(x).shape());
    k().scale(value(x).data(), value(s)[0], out.data(), out.numel());
    Var r = push(std::move(out), needs(s) || needs(x));
    if (needs(r)) record(r, [this, r, s, x] {
      const Tensor<T>& g = flow(r.idx);
      if (needs(x)) k().axpy(value(s)[0], g.data(), ensure_flow(x.idx).data(), g.numel());
      if (needs(s)) ensure_flow(s.idx)[0] += k().dot(g.data(), value(x).data(), g.numel());
    });
    return r;
  }

  Var relu(Var x) {
    Tensor<T> out(value(x).shape());
    k().relu(value(x).data(), out.data(), out.numel());
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x] {
      const Tensor<T>& g = flow(r.idx);
      k().relu_grad(value(x).data(), g.data(), ensure_flow(x.idx).data(), g.numel());
    });
    return r;
  }

  Var sigmoid(Var x) {
    Tensor<T> out(value(x).shape());
    const Tensor<T>& xv = value(x);
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = T(1) / (T(1) + std::exp(-xv[i]));
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x] {
      const Tensor<T>& g = flow(r.idx);
      const Tensor<T>& s = nodes_[r.idx].value;
      Tensor<T>& gx = ensure_flow(x.idx);
      for (std::size_t i = 0; i < g.numel(); ++i)
        gx[i] += g[i] * s[i] * (T(1) - s[i]);
    });
    return r;
  }

  Var square(Var x) {
    Tensor<T> out(value(x).shape());
    k().mul(value(x).data(), value(x).data(), out.data(), out.numel());
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x] {
      const Tensor<T>& g = flow(r.idx);
      Tensor<T> tmp(g.shape());
      k().mul(g.data(), value(x).data(), tmp.data(), g.numel());
      k().axpy(T(2), tmp.data(), ensure_flow(x.idx).data(), g.numel());
    });
    return r;
  }

  // Gradient at exactly zero defined as zero (subgradient choice).
  Var sqrt_op(Var x) {
    Tensor<T> out(value(x).shape());
    const Tensor<T>& xv = value(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(xv[i]);
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x] {
      const Tensor<T>& g = flow(r.idx);
      const Tensor<T>& s = nodes_[r.idx].value;
      Tensor<T>& gx = ensure_flow(x.idx);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (s[i] > T(0)) gx[i] += g[i] / (T(2) * s[i]);
    });
    return r;
  }

  Var sum_all(Var x) {
    Tensor<T> out = Tensor<T>::scalar(k().sum(value(x).data(), value(x).numel()));
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x] {
      const T g0 = flow(r.idx)[0];
      Tensor<T>& gx = ensure_flow(x.idx);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g0;
    });
    return r;
  }

  Var pick(Var x, std::size_t flat_index) {
    if (flat_index >= value(x).numel())
      throw std::invalid_argument("pick index out of range");
    Var r = push(Tensor<T>::scalar(value(x)[flat_index]), needs(x));
    if (needs(r)) record(r, [this, r, x, flat_index] {
      ensure_flow(x.idx)[flat_index] += flow(r.idx)[0];
    });
    return r;
  }

  // ---- shape ----

  Var reshape(Var x, std::vector<std::size_t> shape) {
    Tensor<T> out = value(x).reshaped(shape);
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x] {
      const Tensor<T>& g = flow(r.idx);
      k().axpy(T(1), g.data(), ensure_flow(x.idx).data(), g.numel());
    });
    return r;
  }

  // Swap the last two axes; leading axes act as batch.
  Var transpose_last2(Var x) {
    const Tensor<T>& xv = value(x);
    if (xv.rank() < 2)
      throw std::invalid_argument("transpose_last2 needs rank >= 2, got " +
                                  xv.shape_str());
    std::vector<std::size_t> shape = xv.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    Tensor<T> out(shape);
    const std::size_t rows = xv.extent(xv.rank() - 2);
    const std::size_t cols = xv.extent(xv.rank() - 1);
    const std::size_t batch = xv.numel() / (rows * cols);
    transpose_batch(xv.data(), out.data(), batch, rows, cols);
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x, batch, rows, cols] {
      const Tensor<T>& g = flow(r.idx);
      Tensor<T> gt(value(x).shape());
      transpose_batch(g.data(), gt.data(), batch, cols, rows);
      k().axpy(T(1), gt.data(), ensure_flow(x.idx).data(), gt.numel());
    });
    return r;
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(0))
      throw std::invalid_argument("matmul shape mismatch: " + av.shape_str() +
                                  " x " + bv.shape_str());
    const std::size_t m = av.extent(0), kk = av.extent(1), p = bv.extent(1);
    Tensor<T> out({m, p});
    k().gemm_nn(m, p, kk, av.data(), bv.data(), out.data(), false);
    Var r = push(std::move(out), needs(a) || needs(b));
    if (needs(r)) record(r, [this, r, a, b, m, kk, p] {
      const Tensor<T>& g = flow(r.idx);
      if (needs(a))
        k().gemm_nt(m, kk, p, g.data(), value(b).data(), ensure_flow(a.idx).data(), true);
      if (needs(b))
        k().gemm_tn(kk, p, m, value(a).data(), g.data(), ensure_flow(b.idx).data(), true);
    });
    return r;
  }

  Var bmm(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.extent(0) != bv.extent(0) ||
        av.extent(2) != bv.extent(1))
      throw std::invalid_argument("bmm shape mismatch: " + av.shape_str() + " x " +
                                  bv.shape_str());
    const std::size_t nb = av.extent(0), m = av.extent(1), kk = av.extent(2),
                      p = bv.extent(2);
    Tensor<T> out({nb, m, p});
    for (std::size_t i = 0; i < nb; ++i)
      k().gemm_nn(m, p, kk, av.data() + i * m * kk, bv.data() + i * kk * p,
                  out.data() + i * m * p, false);
    Var r = push(std::move(out), needs(a) || needs(b));
    if (needs(r)) record(r, [this, r, a, b, nb, m, kk, p] {
      const Tensor<T>& g = flow(r.idx);
      for (std::size_t i = 0; i < nb; ++i) {
        const T* gi = g.data() + i * m * p;
        if (needs(a))
          k().gemm_nt(m, kk, p, gi, value(b).data() + i * kk * p,
                      ensure_flow(a.idx).data() + i * m * kk, true);
        if (needs(b))
          k().gemm_tn(kk, p, m, value(a).data() + i * m * kk, gi,
                      ensure_flow(b.idx).data() + i * kk * p, true);
      }
    });
    return r;
  }

  // x[R x C] + v[C] broadcast over rows.
  Var add_rowvec(Var x, Var v) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& vv = value(v);
    if (xv.rank() != 2 || vv.numel() != xv.extent(1))
      throw std::invalid_argument("add_rowvec shape mismatch: " + xv.shape_str() +
                                  " + " + vv.shape_str());
    const std::size_t rows = xv.extent(0), cols = xv.extent(1);
    Tensor<T> out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
      k().add(xv.data() + i * cols, vv.data(), out.data() + i * cols, cols);
    Var r = push(std::move(out), needs(x) || needs(v));
    if (needs(r)) record(r, [this, r, x, v, rows, cols] {
      const Tensor<T>& g = flow(r.idx);
      if (needs(x)) k().axpy(T(1), g.data(), ensure_flow(x.idx).data(), g.numel());
      if (needs(v)) {
        Tensor<T>& gv = ensure_flow(v.idx);
        for (std::size_t i = 0; i < rows; ++i)
          k().axpy(T(1), g.data() + i * cols, gv.data(), cols);
      }
    });
    return r;
  }

  // ---- softmax ----

  // Softmax along `axis` with max-subtraction; any rank.
  Var softmax(Var x, std::size_t axis) {
    const Tensor<T>& xv = value(x);
    if (axis >= xv.rank())
      throw std::invalid_argument("softmax axis " + std::to_string(axis) +
                                  " out of range for " + xv.shape_str());
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= xv.extent(a);
    for (std::size_t a = axis + 1; a < xv.rank(); ++a) inner *= xv.extent(a);
    const std::size_t len = xv.extent(axis);
    Tensor<T> out(xv.shape());
    softmax_forward(xv.data(), out.data(), outer, len, inner);
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x, outer, len, inner] {
      softmax_backward(nodes_[r.idx].value.data(), flow(r.idx).data(),
                       ensure_flow(x.idx).data(), outer, len, inner);
    });
    return r;
  }

  // ---- convolution ----

  // Cross-correlation with bias; output H' = (H + 2*pad - kh)/stride + 1,
  // rejected when not integral or not >= 1.
  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    const Tensor<T>& bv = value(b);
    if (xv.rank() != 4 || wv.rank() != 4)
      throw std::invalid_argument("conv2d expects rank-4 input and weight, got " +
                                  xv.shape_str() + " and " + wv.shape_str());
    const std::size_t nb = xv.extent(0), cin = xv.extent(1), h = xv.extent(2),
                      wd = xv.extent(3);
    const std::size_t cout = wv.extent(0), kh = wv.extent(2), kw = wv.extent(3);
    if (wv.extent(1) != cin)
      throw std::invalid_argument("conv2d channel mismatch: input " + xv.shape_str() +
                                  " vs weight " + wv.shape_str());
    if (bv.numel() != cout)
      throw std::invalid_argument("conv2d bias size mismatch");
    const auto out_extent = [&](std::size_t in, std::size_t kk) {
      const std::size_t padded = in + 2 * pad;
      if (padded < kk || (padded - kk) % stride != 0)
        throw std::invalid_argument(
            "conv2d output extent not integral: input " + std::to_string(in) +
            ", kernel " + std::to_string(kk) + ", stride " + std::to_string(stride) +
            ", pad " + std::to_string(pad));
      return (padded - kk) / stride + 1;
    };
    const std::size_t oh = out_extent(h, kh), ow = out_extent(wd, kw);
    const std::size_t patch = cin * kh * kw, npos = oh * ow;

    Tensor<T> out({nb, cout, oh, ow});
    Tensor<T> cols({patch, npos});
    for (std::size_t i = 0; i < nb; ++i) {
      im2col(xv.data() + i * cin * h * wd, cols.data(), cin, h, wd, kh, kw, stride,
             pad, oh, ow);
      T* oi = out.data() + i * cout * npos;
      k().gemm_nn(cout, npos, patch, wv.data(), cols.data(), oi, false);
      for (std::size_t c = 0; c < cout; ++c) {
        const T bias = bv[c];
        T* row = oi + c * npos;
        for (std::size_t j = 0; j < npos; ++j) row[j] += bias;
      }
    }
    Var r = push(std::move(out), needs(x) || needs(w) || needs(b));
    if (needs(r)) record(r, [this, r, x, w, b, nb, cin, h, wd, cout, kh, kw, stride,
                             pad, oh, ow, patch, npos] {
      const Tensor<T>& g = flow(r.idx);
      Tensor<T> cols({patch, npos});
      Tensor<T> gcols({patch, npos});
      for (std::size_t i = 0; i < nb; ++i) {
        const T* gi = g.data() + i * cout * npos;
        if (needs(b)) {
          Tensor<T>& gb = ensure_flow(b.idx);
          for (std::size_t c = 0; c < cout; ++c)
            gb[c] += k().sum(gi + c * npos, npos);
        }
        if (needs(w)) {
          im2col(value(x).data() + i * cin * h * wd, cols.data(), cin, h, wd, kh,
                 kw, stride, pad, oh, ow);
          k().gemm_nt(cout, patch, npos, gi, cols.data(), ensure_flow(w.idx).data(),
                      true);
        }
        if (needs(x)) {
          k().gemm_tn(patch, npos, cout, value(w).data(), gi, gcols.data(), false);
          col2im_add(gcols.data(), ensure_flow(x.idx).data() + i * cin * h * wd, cin,
                     h, wd, kh, kw, stride, pad, oh, ow);
        }
      }
    });
    return r;
  }

  // ---- capsule contractions ----

  // u[b,i,j,:] = W[i,j] * y[b,i,:]   (W: [I,J,O,D], y: [B,I,D])
  Var caps_predict(Var w, Var y) {
    const Tensor<T>& wv = value(w);
    const Tensor<T>& yv = value(y);
    if (wv.rank() != 4 || yv.rank() != 3 || wv.extent(0) != yv.extent(1) ||
        wv.extent(3) != yv.extent(2))
      throw std::invalid_argument("caps_predict shape mismatch: W " + wv.shape_str() +
                                  " vs y " + yv.shape_str());
    const std::size_t nb = yv.extent(0), ni = wv.extent(0), nj = wv.extent(1),
                      od = wv.extent(2), id = wv.extent(3);
    Tensor<T> out({nb, ni, nj, od});
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t i = 0; i < ni; ++i) {
        const T* yrow = yv.data() + (bi * ni + i) * id;
        const T* wrow = wv.data() + i * nj * od * id;
        T* urow = out.data() + (bi * ni + i) * nj * od;
        for (std::size_t jo = 0; jo < nj * od; ++jo)
          urow[jo] = k().dot(wrow + jo * id, yrow, id);
      }
    Var r = push(std::move(out), needs(w) || needs(y));
    if (needs(r)) record(r, [this, r, w, y, nb, ni, nj, od, id] {
      const Tensor<T>& g = flow(r.idx);
      for (std::size_t bi = 0; bi < nb; ++bi)
        for (std::size_t i = 0; i < ni; ++i) {
          const T* yrow = value(y).data() + (bi * ni + i) * id;
          const T* wrow = value(w).data() + i * nj * od * id;
          const T* grow = g.data() + (bi * ni + i) * nj * od;
          if (needs(w)) {
            T* gw = ensure_flow(w.idx).data() + i * nj * od * id;
            for (std::size_t jo = 0; jo < nj * od; ++jo)
              k().axpy(grow[jo], yrow, gw + jo * id, id);
          }
          if (needs(y)) {
            T* gy = ensure_flow(y.idx).data() + (bi * ni + i) * id;
            for (std::size_t jo = 0; jo < nj * od; ++jo)
              k().axpy(grow[jo], wrow + jo * id, gy, id);
          }
        }
    });
    return r;
  }

  // s[b,j,:] = sum_i c[b,i,j] * u[b,i,j,:]   (c: [B,I,J], u: [B,I,J,O])
  Var caps_weighted_sum(Var c, Var u) {
    const Tensor<T>& cv = value(c);
    const Tensor<T>& uv = value(u);
    if (cv.rank() != 3 || uv.rank() != 4 || cv.extent(0) != uv.extent(0) ||
        cv.extent(1) != uv.extent(1) || cv.extent(2) != uv.extent(2))
      throw std::invalid_argument("caps_weighted_sum shape mismatch: c " +
                                  cv.shape_str() + " vs u " + uv.shape_str());
    const std::size_t nb = uv.extent(0), ni = uv.extent(1), nj = uv.extent(2),
                      od = uv.extent(3);
    Tensor<T> out({nb, nj, od});
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j)
          k().axpy(cv.at(bi, i, j), uv.data() + ((bi * ni + i) * nj + j) * od,
                   out.data() + (bi * nj + j) * od, od);
    Var r = push(std::move(out), needs(c) || needs(u));
    if (needs(r)) record(r, [this, r, c, u, nb, ni, nj, od] {
      const Tensor<T>& g = flow(r.idx);
      for (std::size_t bi = 0; bi < nb; ++bi)
        for (std::size_t i = 0; i < ni; ++i)
          for (std::size_t j = 0; j < nj; ++j) {
            const T* gs = g.data() + (bi * nj + j) * od;
            const T* urow = value(u).data() + ((bi * ni + i) * nj + j) * od;
            if (needs(c))
              ensure_flow(c.idx).at(bi, i, j) += k().dot(gs, urow, od);
            if (needs(u))
              k().axpy(value(c).at(bi, i, j), gs,
                       ensure_flow(u.idx).data() + ((bi * ni + i) * nj + j) * od, od);
          }
    });
    return r;
  }

  // a[b,i,j] = u[b,i,j,:] . v[b,j,:]   (the routing agreement term)
  Var caps_agreement(Var u, Var v) {
    const Tensor<T>& uv = value(u);
    const Tensor<T>& vv = value(v);
    if (uv.rank() != 4 || vv.rank() != 3 || uv.extent(0) != vv.extent(0) ||
        uv.extent(2) != vv.extent(1) || uv.extent(3) != vv.extent(2))
      throw std::invalid_argument("caps_agreement shape mismatch: u " +
                                  uv.shape_str() + " vs v " + vv.shape_str());
    const std::size_t nb = uv.extent(0), ni = uv.extent(1), nj = uv.extent(2),
                      od = uv.extent(3);
    Tensor<T> out({nb, ni, nj});
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j)
          out.at(bi, i, j) = k().dot(uv.data() + ((bi * ni + i) * nj + j) * od,
                                     vv.data() + (bi * nj + j) * od, od);
    Var r = push(std::move(out), needs(u) || needs(v));
    if (needs(r)) record(r, [this, r, u, v, nb, ni, nj, od] {
      const Tensor<T>& g = flow(r.idx);
      for (std::size_t bi = 0; bi < nb; ++bi)
        for (std::size_t i = 0; i < ni; ++i)
          for (std::size_t j = 0; j < nj; ++j) {
            const T ga = g.at(bi, i, j);
            if (needs(u))
              k().axpy(ga, value(v).data() + (bi * nj + j) * od,
                       ensure_flow(u.idx).data() + ((bi * ni + i) * nj + j) * od, od);
            if (needs(v))
              k().axpy(ga, value(u).data() + ((bi * ni + i) * nj + j) * od,
                       ensure_flow(v.idx).data() + (bi * nj + j) * od, od);
          }
    });
    return r;
  }

  // ---- capsule nonlinearities (over the last axis) ----

  // v = (|s|^2 / (1 + |s|^2)) * s/|s|, zero at the origin.
  Var squash_rows(Var x) {
    const Tensor<T>& xv = value(x);
    const std::size_t d = xv.extent(xv.rank() - 1);
    const std::size_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape());
    for (std::size_t rr = 0; rr < rows; ++rr) {
      const T* s = xv.data() + rr * d;
      const T n2 = k().dot(s, s, d);
      const T n = std::sqrt(n2);
      const T c = n > T(0) ? n / (T(1) + n2) : T(0);
      k().scale(s, c, out.data() + rr * d, d);
    }
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x, rows, d] {
      const Tensor<T>& g = flow(r.idx);
      Tensor<T>& gx = ensure_flow(x.idx);
      for (std::size_t rr = 0; rr < rows; ++rr) {
        const T* s = value(x).data() + rr * d;
        const T* gr = g.data() + rr * d;
        T* gxr = gx.data() + rr * d;
        const T n2 = k().dot(s, s, d);
        const T n = std::sqrt(n2);
        if (n <= T(0)) continue;  // Jacobian limit at the origin is zero
        const T c = n / (T(1) + n2);
        const T cp = (T(1) - n2) / ((T(1) + n2) * (T(1) + n2));
        const T sg = k().dot(s, gr, d);
        k().axpy(c, gr, gxr, d);
        k().axpy(cp / n * sg, s, gxr, d);
      }
    });
    return r;
  }

  // Euclidean norm of each row; zero rows give zero norm and zero gradient.
  Var l2norm_rows(Var x) {
    const Tensor<T>& xv = value(x);
    const std::size_t d = xv.extent(xv.rank() - 1);
    const std::size_t rows = xv.numel() / d;
    std::vector<std::size_t> shape = xv.shape();
    shape.pop_back();
    if (shape.empty()) shape.push_back(1);
    Tensor<T> out(shape);
    for (std::size_t rr = 0; rr < rows; ++rr) {
      const T* s = xv.data() + rr * d;
      out[rr] = std::sqrt(k().dot(s, s, d));
    }
    Var r = push(std::move(out), needs(x));
    if (needs(r)) record(r, [this, r, x, rows, d] {
      const Tensor<T>& g = flow(r.idx);
      const Tensor<T>& nv = nodes_[r.idx].value;
      Tensor<T>& gx = ensure_flow(x.idx);
      for (std::size_t rr = 0; rr < rows; ++rr) {
        if (nv[rr] <= T(0)) continue;
        k().axpy(g[rr] / nv[rr], value(x).data() + rr * d, gx.data() + rr * d, d);
      }
    });
    return r;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // accumulated across backward() calls
    Tensor<T> flow;  // scratch for the backward() in progress
    std::function<void()> backprop;
    bool needs_grad = false;
    bool grad_live = false;
    bool flow_live = false;
  };

  static const kernels::Table<T>& k() { return kernels::active<T>(); }

  Var push(Tensor<T> v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void record(Var r, std::function<void()> fn) {
    nodes_[r.idx].backprop = std::move(fn);
  }

  bool needs(Var v) const { return nodes_[v.idx].needs_grad; }

  Tensor<T>& ensure_grad(std::uint32_t idx) {
    Node& n = nodes_[idx];
    if (!n.grad_live) {
      n.grad = Tensor<T>(n.value.shape());
      n.grad_live = true;
    }
    return n.grad;
  }

  Tensor<T>& ensure_flow(std::uint32_t idx) {
    Node& n = nodes_[idx];
    if (!n.flow_live) {
      n.flow = Tensor<T>(n.value.shape());
      n.flow_live = true;
    }
    return n.flow;
  }

  const Tensor<T>& flow(std::uint32_t idx) const { return nodes_[idx].flow; }

  void check_same_shape(const char* op, Var a, Var b) const {
    if (!value(a).same_shape(value(b)))
      throw std::invalid_argument(std::string(op) + " shape mismatch: " +
                                  value(a).shape_str() + " vs " +
                                  value(b).shape_str());
  }

  static void transpose_batch(const T* in, T* out, std::size_t batch,
                              std::size_t rows, std::size_t cols) {
    for (std::size_t bb = 0; bb < batch; ++bb) {
      const T* src = in + bb * rows * cols;
      T* dst = out + bb * rows * cols;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }

  void softmax_forward(const T* in, T* out, std::size_t outer, std::size_t len,
                       std::size_t inner) {
    if (inner == 1) {
      for (std::size_t o = 0; o < outer; ++o) {
        const T* px = in + o * len;
        T* py = out + o * len;
        const T m = k().max(px, len);
        for (std::size_t l = 0; l < len; ++l) py[l] = px[l] - m;
        k().vexp(py, py, len);
        const T inv = T(1) / k().sum(py, len);
        k().scale(py, inv, py, len);
      }
      return;
    }
    std::vector<T> colmax(inner), colsum(inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* px = in + o * len * inner;
      T* py = out + o * len * inner;
      for (std::size_t c = 0; c < inner; ++c) colmax[c] = px[c];
      for (std::size_t l = 1; l < len; ++l) {
        const T* row = px + l * inner;
        for (std::size_t c = 0; c < inner; ++c)
          if (row[c] > colmax[c]) colmax[c] = row[c];
      }
      for (std::size_t l = 0; l < len; ++l)
        k().sub(px + l * inner, colmax.data(), py + l * inner, inner);
      k().vexp(py, py, len * inner);
      for (std::size_t c = 0; c < inner; ++c) colsum[c] = T(0);
      for (std::size_t l = 0; l < len; ++l)
        k().add(colsum.data(), py + l * inner, colsum.data(), inner);
      for (std::size_t c = 0; c < inner; ++c) colsum[c] = T(1) / colsum[c];
      for (std::size_t l = 0; l < len; ++l)
        k().mul(py + l * inner, colsum.data(), py + l * inner, inner);
    }
  }

  void softmax_backward(const T* s, const T* g, T* gx, std::size_t outer,
                        std::size_t len, std::size_t inner) {
    if (inner == 1) {
      for (std::size_t o = 0; o < outer; ++o) {
        const T* ps = s + o * len;
        const T* pg = g + o * len;
        T* pgx = gx + o * len;
        const T d = k().dot(pg, ps, len);
        for (std::size_t l = 0; l < len; ++l) pgx[l] += ps[l] * (pg[l] - d);
      }
      return;
    }
    std::vector<T> coldot(inner), tmp(inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* ps = s + o * len * inner;
      const T* pg = g + o * len * inner;
      T* pgx = gx + o * len * inner;
      for (std::size_t c = 0; c < inner; ++c) coldot[c] = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        k().mul(pg + l * inner, ps + l * inner, tmp.data(), inner);
        k().add(coldot.data(), tmp.data(), coldot.data(), inner);
      }
      for (std::size_t l = 0; l < len; ++l) {
        k().sub(pg + l * inner, coldot.data(), tmp.data(), inner);
        k().mul(tmp.data(), ps + l * inner, tmp.data(), inner);
        k().add(pgx + l * inner, tmp.data(), pgx + l * inner, inner);
      }
    }
  }

  static void im2col(const T* x, T* cols, std::size_t cin, std::size_t h,
                     std::size_t w, std::size_t kh, std::size_t kw,
                     std::size_t stride, std::size_t pad, std::size_t oh,
                     std::size_t ow) {
    const std::size_t npos = oh * ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t dy = 0; dy < kh; ++dy)
        for (std::size_t dx = 0; dx < kw; ++dx, ++row) {
          T* dst = cols + row * npos;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + dy) -
                static_cast<std::ptrdiff_t>(pad);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + dx) -
                  static_cast<std::ptrdiff_t>(pad);
              dst[oy * ow + ox] =
                  (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                   ix < static_cast<std::ptrdiff_t>(w))
                      ? x[(c * h + static_cast<std::size_t>(iy)) * w +
                          static_cast<std::size_t>(ix)]
                      : T(0);
            }
          }
        }
  }

  static void col2im_add(const T* cols, T* gx, std::size_t cin, std::size_t h,
                         std::size_t w, std::size_t kh, std::size_t kw,
                         std::size_t stride, std::size_t pad, std::size_t oh,
                         std::size_t ow) {
    const std::size_t npos = oh * ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t dy = 0; dy < kh; ++dy)
        for (std::size_t dx = 0; dx < kw; ++dx, ++row) {
          const T* src = cols + row * npos;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + dy) -
                static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + dx) -
                  static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              gx[(c * h + static_cast<std::size_t>(iy)) * w +
                 static_cast<std::size_t>(ix)] += src[oy * ow + ox];
            }
          }
        }
  }

  // deque: push_back keeps references from value()/grad() stable
  std::deque<Node> nodes_;
};

}  // namespace sacn
