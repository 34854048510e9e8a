#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sacn/attention.hpp"
#include "sacn/capsules.hpp"
#include "sacn/config.hpp"
#include "sacn/losses.hpp"
#include "sacn/nn.hpp"
#include "sacn/rng.hpp"
#include "sacn/tape.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, Tensor<T>>> items;  // insertion order fixed

  void add(const std::string& name, Tensor<T> t) {
    if (has(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    items.emplace_back(name, std::move(t));
  }
  bool has(const std::string& name) const {
    for (const auto& [n, v] : items)
      if (n == name) return true;
    return false;
  }
  Tensor<T>& at(const std::string& name) {
    for (auto& [n, v] : items)
      if (n == name) return v;
    throw std::invalid_argument("no parameter '" + name + "'");
  }
  const Tensor<T>& at(const std::string& name) const {
    for (const auto& [n, v] : items)
      if (n == name) return v;
    throw std::invalid_argument("no parameter '" + name + "'");
  }
};

struct CensusRow {
  std::string name;
  std::string shape;
  std::size_t count = 0;
};

// Spatial arithmetic shared by construction and the forward pass.
struct ModelDims {
  std::size_t feat_h = 0, feat_w = 0;      // after the 5x5 feature conv
  std::size_t prim_h = 0, prim_w = 0;      // after the primary caps conv
  std::size_t types = 0;                    // primary capsule types
  std::size_t num_caps = 0;                 // I = types * prim_h * prim_w
  std::size_t image_size = 0;               // C*H*W, the decoder target
};

inline ModelDims derive_dims(const RunConfig& c) {
  auto out_extent = [](std::size_t in, std::size_t k, std::size_t stride,
                       std::size_t pad, const char* layer) {
    const std::size_t padded = in + 2 * pad;
    if (padded < k || (padded - k) % stride != 0)
      throw ConfigError(std::string(layer) + ": extent " + std::to_string(in) +
                        " with kernel " + std::to_string(k) + ", stride " +
                        std::to_string(stride) + ", padding " + std::to_string(pad) +
                        " gives a non-integral output");
    return (padded - k) / stride + 1;
  };
  ModelDims d;
  d.feat_h = out_extent(c.input_height, 5, 1, 0, "feature conv");
  d.feat_w = out_extent(c.input_width, 5, 1, 0, "feature conv");
  d.prim_h = out_extent(d.feat_h, 5, c.primary_stride, c.primary_padding, "primary caps");
  d.prim_w = out_extent(d.feat_w, 5, c.primary_stride, c.primary_padding, "primary caps");
  d.types = c.primary_channels / c.primary_dim;
  d.num_caps = d.types * d.prim_h * d.prim_w;
  d.image_size = c.input_channels * c.input_height * c.input_width;
  return d;
}

template <typename T>
class SacnModel {
 public:
  explicit SacnModel(RunConfig cfg) : cfg_(std::move(cfg)) {
    validate_config(cfg_);
    dims_ = derive_dims(cfg_);
    const std::size_t red = attention_reduced_channels(cfg_.conv_channels);
    auto init = [&](const std::string& name, std::vector<std::size_t> shape) {
      Rng rng = Rng::derive(cfg_.seed, name);
      params_.add(name, init_params<T>({cfg_.init_variance}, rng, shape));
    };
    auto zeros = [&](const std::string& name, std::vector<std::size_t> shape) {
      params_.add(name, Tensor<T>(std::move(shape)));
    };
    init("conv1.weight", {cfg_.conv_channels, cfg_.input_channels, 5, 5});
    zeros("conv1.bias", {cfg_.conv_channels});
    if (attended()) {
      init("attn.w_f", {red, cfg_.conv_channels, 1, 1});
      init("attn.w_g", {red, cfg_.conv_channels, 1, 1});
      init("attn.w_h", {cfg_.conv_channels, cfg_.conv_channels, 1, 1});
      zeros("attn.alpha", {1});
      if (cfg_.attention_spectral_norm) {
        for (const char* name : {"attn.w_f", "attn.w_g", "attn.w_h"}) {
          Rng rng = Rng::derive(cfg_.seed, std::string(name) + ".sn_u");
          sn_states_.emplace(name,
                             make_spectral_state<T>(rng, params_.at(name).extent(0)));
        }
      }
    }
    init("primary.weight", {cfg_.primary_channels, cfg_.conv_channels, 5, 5});
    zeros("primary.bias", {cfg_.primary_channels});
    init("caps.weight", {dims_.num_caps, cfg_.classes, cfg_.class_dim, cfg_.primary_dim});
    init("decoder.w1", {cfg_.classes * cfg_.class_dim, cfg_.decoder_hidden1});
    zeros("decoder.b1", {cfg_.decoder_hidden1});
    init("decoder.w2", {cfg_.decoder_hidden1, cfg_.decoder_hidden2});
    zeros("decoder.b2", {cfg_.decoder_hidden2});
    init("decoder.w3", {cfg_.decoder_hidden2, dims_.image_size});
    zeros("decoder.b3", {dims_.image_size});
  }

  const RunConfig& config() const { return cfg_; }
  const ModelDims& dims() const { return dims_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  bool attended() const { return cfg_.model_mode == "sacn"; }
  std::map<std::string, SpectralNormState<T>>& sn_states() { return sn_states_; }
  const std::map<std::string, SpectralNormState<T>>& sn_states() const { return sn_states_; }

  struct Forward {
    std::vector<std::pair<std::string, Var>> leaves;  // census order
    Var features;                  // post-attention feature map
    std::optional<AttentionOut> attention;
    Var caps_v;                    // [B x J x O]
    Var lengths;                   // [B x J]
    Var recon;                     // [B x image_size]
    Var flat_input;                // [B x image_size] constant, decoder target
    Tensor<T> couplings;           // routing c, detached copy
    std::vector<std::size_t> predicted;

    Var leaf(const std::string& name) const {
      for (const auto& [n, v] : leaves)
        if (n == name) return v;
      throw std::invalid_argument("no bound leaf '" + name + "'");
    }
  };

  // Builds one forward pass on the caller's tape. Parameters enter as leaves
  // bound from the store; labels select the reconstruction mask during
  // training, the configured selector does at inference.
  Forward forward(Tape<T>& t, const Tensor<T>& batch,
                  const std::vector<std::size_t>* labels = nullptr) {
    if (batch.rank() != 4 || batch.extent(1) != cfg_.input_channels ||
        batch.extent(2) != cfg_.input_height || batch.extent(3) != cfg_.input_width)
      throw std::invalid_argument(
          "input: expected [B x " + std::to_string(cfg_.input_channels) + " x " +
          std::to_string(cfg_.input_height) + " x " + std::to_string(cfg_.input_width) +
          "], got " + batch.shape_str());
    const std::size_t b = batch.extent(0);
    if (labels && labels->size() != b)
      throw std::invalid_argument("input: " + std::to_string(b) + " items vs " +
                                  std::to_string(labels->size()) + " labels");

    Forward f;
    for (auto& [name, tensor] : params_.items)
      f.leaves.emplace_back(name, t.leaf(tensor));
    Var x = t.constant(batch);
    f.flat_input = t.reshape(x, {b, dims_.image_size});

    Var feat = t.relu(t.conv2d(x, f.leaf("conv1.weight"), f.leaf("conv1.bias"), 1, 0));
    if (attended()) {
      AttentionVars av{spectral(t, f, "attn.w_f"), spectral(t, f, "attn.w_g"),
                       spectral(t, f, "attn.w_h"), f.leaf("attn.alpha")};
      f.attention = attention_forward(t, feat, av, cfg_.attention_softmax_axis);
      feat = f.attention->y;
    }
    f.features = feat;

    Var pc = t.conv2d(feat, f.leaf("primary.weight"), f.leaf("primary.bias"),
                      cfg_.primary_stride, cfg_.primary_padding);
    Var poses = primary_caps_poses(t, pc, dims_.types, cfg_.primary_dim);
    Var u_hat = caps_predictions(t, f.leaf("caps.weight"), poses);
    RoutingOut routed = route(t, u_hat, int(cfg_.routing_iters));
    f.caps_v = routed.v;
    f.lengths = t.l2norm_rows(routed.v);
    f.couplings = t.value(routed.c);
    f.predicted = classify(t.value(routed.v));

    std::vector<std::size_t> mask_classes;
    if (labels) mask_classes = *labels;
    else if (cfg_.decoder_select == "coupling")
      mask_classes = select_highest_coupling(f.couplings);
    else
      mask_classes = f.predicted;
    DecoderVars dv{f.leaf("decoder.w1"), f.leaf("decoder.b1"), f.leaf("decoder.w2"),
                   f.leaf("decoder.b2"), f.leaf("decoder.w3"), f.leaf("decoder.b3")};
    f.recon = decode(t, f.caps_v, one_hot_mask<T>(mask_classes, cfg_.classes), dv);
    return f;
  }

  std::vector<CensusRow> parameter_census() const {
    std::vector<CensusRow> rows;
    for (const auto& [name, tensor] : params_.items)
      rows.push_back({name, tensor.shape_str(), tensor.numel()});
    return rows;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, tensor] : params_.items) total += tensor.numel();
    return total;
  }

 private:
  // Divides the stored weight by the power-iteration sigma estimate on the
  // tape; sigma stays constant to the gradient.
  Var spectral(Tape<T>& t, Forward& f, const std::string& name) {
    Var w = f.leaf(name);
    auto it = sn_states_.find(name);
    if (it == sn_states_.end()) return w;
    const Tensor<T>& stored = params_.at(name);
    const T sigma = spectral_norm_step(stored, stored.extent(0),
                                       stored.numel() / stored.extent(0), it->second);
    return t.scale(w, T(1) / sigma);
  }

  RunConfig cfg_;
  ModelDims dims_;
  ParamStore<T> params_;
  std::map<std::string, SpectralNormState<T>> sn_states_;
};

}  // namespace sacn
