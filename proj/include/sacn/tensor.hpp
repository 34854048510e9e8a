#pragma once

#include <array>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace sacn {

// Dense rank-<=4 tensor, row-major, last axis fastest. Value semantics;
// immutable-by-convention once handed to the tape.
template <typename T>
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Tensor() : rank_(1), extents_{1, 1, 1, 1}, data_(1, T(0)) {}

  explicit Tensor(std::initializer_list<std::size_t> shape) { init_shape(shape.begin(), shape.size()); }
  explicit Tensor(const std::vector<std::size_t>& shape) { init_shape(shape.data(), shape.size()); }

  Tensor(std::initializer_list<std::size_t> shape, std::vector<T> data) {
    init_shape(shape.begin(), shape.size());
    if (data.size() != data_.size())
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str());
    data_ = std::move(data);
  }

  static Tensor zeros(std::initializer_list<std::size_t> shape) { return Tensor(shape); }

  static Tensor full(std::initializer_list<std::size_t> shape, T v) {
    Tensor t(shape);
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(T v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }

  std::size_t rank() const { return rank_; }
  std::size_t extent(std::size_t axis) const { return extents_[axis]; }
  std::size_t numel() const { return data_.size(); }
  const std::vector<T>& storage() const { return data_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i) { return data_[i]; }
  T& at(std::size_t i, std::size_t j) { return data_[i * extents_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * extents_[1] + j) * extents_[2] + k];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * extents_[1] + j) * extents_[2] + k) * extents_[3] + l];
  }
  const T& at(std::size_t i) const { return data_[i]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * extents_[1] + j]; }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * extents_[1] + j) * extents_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * extents_[1] + j) * extents_[2] + k) * extents_[3] + l];
  }

  bool same_shape(const Tensor& o) const {
    if (rank_ != o.rank_) return false;
    for (std::size_t a = 0; a < rank_; ++a)
      if (extents_[a] != o.extents_[a]) return false;
    return true;
  }

  std::vector<std::size_t> shape() const {
    return std::vector<std::size_t>(extents_.begin(), extents_.begin() + rank_);
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t a = 0; a < rank_; ++a) {
      if (a) s += "x";
      s += std::to_string(extents_[a]);
    }
    return s + "]";
  }

  Tensor reshaped(std::initializer_list<std::size_t> shape) const {
    return reshaped(std::vector<std::size_t>(shape));
  }

  Tensor reshaped(const std::vector<std::size_t>& shape) const {
    Tensor out(shape);
    if (out.numel() != numel())
      throw std::invalid_argument("reshape " + shape_str() + " -> " + out.shape_str() +
                                  " changes element count");
    out.data_ = data_;
    return out;
  }

  // Same shape and bit pattern (used by the bitwise-identity contracts).
  bool bitwise_equal(const Tensor& o) const {
    if (!same_shape(o)) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  template <typename It>
  void init_shape(It first, std::size_t n) {
    if (n == 0 || n > kMaxRank)
      throw std::invalid_argument("tensor rank must be 1..4, got " + std::to_string(n));
    rank_ = n;
    extents_ = {1, 1, 1, 1};
    std::size_t total = 1;
    for (std::size_t a = 0; a < n; ++a) {
      const std::size_t e = *(first + a);
      if (e < 1) throw std::invalid_argument("tensor extents must be >= 1");
      extents_[a] = e;
      total *= e;
    }
    data_.assign(total, T(0));
  }

  std::size_t rank_;
  std::array<std::size_t, kMaxRank> extents_;
  std::vector<T> data_;

  template <typename U>
  friend class Tensor;
};

}  // namespace sacn
