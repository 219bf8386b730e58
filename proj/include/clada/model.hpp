#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "clada/error.hpp"
#include "clada/random.hpp"
#include "clada/tensor.hpp"

namespace clada {

enum class Activation : std::uint8_t { silu = 0, relu = 1, gelu = 2 };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "silu") return Activation::silu;
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw FormatError("unknown activation '" + std::string(s) + "'");
}

inline float activate(Activation a, float x) {
  switch (a) {
    case Activation::silu: return x / (1.0f + std::exp(-x));
    case Activation::relu: return x > 0.0f ? x : 0.0f;
    case Activation::gelu: return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
  }
  return x;
}

struct ModelDims {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 256;
  std::uint32_t d_h = 1024;
  std::uint32_t n_heads = 4;
  std::uint32_t vocab_size = 258;
  std::uint32_t max_ctx = 2048;

  std::uint32_t head_dim() const { return d_model / n_heads; }

  /// Throws DimensionError when any invariant fails.
  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw DimensionError(std::string("invalid dims: ") + what);
    };
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(d_h >= 1, "d_h must be >= 1");
    require(n_heads >= 1, "n_heads must be >= 1");
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(max_ctx >= 1, "max_ctx must be >= 1");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    // Largest single tensor must be addressable and sane (< 2^31 floats).
    constexpr std::uint64_t kMaxElems = std::uint64_t{1} << 31;
    const std::uint64_t mlp = std::uint64_t{d_h} * d_model;
    const std::uint64_t emb = std::uint64_t{vocab_size} * d_model;
    const std::uint64_t att = std::uint64_t{d_model} * d_model;
    require(mlp < kMaxElems && emb < kMaxElems && att < kMaxElems, "tensor size overflows");
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;  // [d_model]
  Matrix wq, wk, wv, wo;         // [d_model x d_model]
  std::vector<float> mlp_norm;   // [d_model]
  Matrix w_in;                   // [d_h x d_model], row j = W_in,j
  Matrix v_in;                   // [d_h x d_model], row j = V_in,j
  Matrix w_out_cols;             // [d_h x d_model], row j = column j of W_out [d_model x d_h]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
  ModelDims dims;
  Activation activation = Activation::silu;
  std::uint32_t rng_seed = 0;
  Matrix token_embedding;  // [vocab x d_model]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // [d_model]
  Matrix lm_head;                 // [vocab x d_model]

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;

  /// Allocates zero-filled tensors (norm gains at 1) matching dims.
  static ModelWeights zeros(const ModelDims& dims, Activation act = Activation::silu) {
    dims.validate();
    ModelWeights m;
    m.dims = dims;
    m.activation = act;
    const std::size_t dm = dims.d_model;
    m.token_embedding = Matrix(dims.vocab_size, dm);
    m.layers.resize(dims.n_layers);
    for (auto& l : m.layers) {
      l.attn_norm.assign(dm, 1.0f);
      l.wq = l.wk = l.wv = l.wo = Matrix(dm, dm);
      l.mlp_norm.assign(dm, 1.0f);
      l.w_in = l.v_in = l.w_out_cols = Matrix(dims.d_h, dm);
    }
    m.final_norm.assign(dm, 1.0f);
    m.lm_head = Matrix(dims.vocab_size, dm);
    return m;
  }

  const LayerWeights& layer(std::size_t l) const {
    if (l >= layers.size())
      throw IndexError("layer " + std::to_string(l) + " out of range (n_layers=" +
                       std::to_string(layers.size()) + ")");
    return layers[l];
  }

  /// ||W_out column j||_2 for every neuron of a layer.
  std::vector<float> out_column_norms(std::size_t l) const {
    const auto& lw = layer(l);
    std::vector<float> norms(dims.d_h);
    for (std::size_t j = 0; j < dims.d_h; ++j) norms[j] = static_cast<float>(norm2(lw.w_out_cols.row(j)));
    return norms;
  }

  bool finite() const {
    auto ok = [](const Matrix& m) { return all_finite(m.data); };
    if (!ok(token_embedding) || !ok(lm_head) || !all_finite(final_norm)) return false;
    for (const auto& l : layers) {
      if (!all_finite(l.attn_norm) || !all_finite(l.mlp_norm)) return false;
      for (const Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_in, &l.v_in, &l.w_out_cols})
        if (!ok(*m)) return false;
    }
    return true;
  }
};

/// Distribution knobs for gen_random_model. Defaults are part of the
/// documented weight distribution (see README).
struct InitConfig {
  float head_scale = 2.0f;        // logit temperature of the output head
  float attn_out_scale = 0.5f;    // shrink on W_o
  float mlp_out_scale = 0.25f;    // shrink on W_out
  float neuron_spread = 0.5f;     // sd of log per-neuron W_out gain
};

namespace detail {

inline void fill_uniform(Rng& rng, std::span<float> v, double half_width) {
  for (float& x : v) x = static_cast<float>(rng.uniform(-half_width, half_width));
}

}  // namespace detail

/// Builds a random model fully determined by (seed, dims, cfg).
///
/// Every projection is uniform with unit output variance for unit-variance
/// input (half width sqrt(3 / fan_in)). W_out column j is additionally scaled
/// by exp(neuron_spread * z_j), z_j ~ N(0,1), so that neuron importance is
/// heavy-tailed the way it is in trained models.
inline ModelWeights gen_random_model(std::uint64_t seed, const ModelDims& dims, Activation act = Activation::silu,
                                     const InitConfig& cfg = {}) {
  dims.validate();
  ModelWeights m = ModelWeights::zeros(dims, act);
  m.rng_seed = static_cast<std::uint32_t>(seed);
  Rng rng(seed);
  const double unit_dm = std::sqrt(3.0 / dims.d_model);
  const double unit_dh = std::sqrt(3.0 / dims.d_h);

  detail::fill_uniform(rng, m.token_embedding.data, std::sqrt(3.0));
  for (auto& l : m.layers) {
    detail::fill_uniform(rng, l.wq.data, unit_dm);
    detail::fill_uniform(rng, l.wk.data, unit_dm);
    detail::fill_uniform(rng, l.wv.data, unit_dm);
    detail::fill_uniform(rng, l.wo.data, unit_dm * cfg.attn_out_scale);
    detail::fill_uniform(rng, l.w_in.data, unit_dm);
    detail::fill_uniform(rng, l.v_in.data, unit_dm);
    for (std::size_t j = 0; j < dims.d_h; ++j) {
      const double gain = std::exp(cfg.neuron_spread * rng.normal());
      detail::fill_uniform(rng, l.w_out_cols.row(j), unit_dh * cfg.mlp_out_scale * gain);
    }
  }
  detail::fill_uniform(rng, m.lm_head.data, unit_dm * cfg.head_scale);
  return m;
}

struct PlantedModel {
  ModelWeights model;
  std::vector<std::uint32_t> planted;  // sorted neuron indices
};

/// Zeroes W_out columns of ceil(fraction * d_h) seed-chosen neurons in one layer.
inline PlantedModel plant_dead_neurons(const ModelWeights& model, std::size_t layer, double fraction,
                                       std::uint64_t seed) {
  if (layer >= model.layers.size())
    throw IndexError("layer " + std::to_string(layer) + " out of range (n_layers=" +
                     std::to_string(model.layers.size()) + ")");
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw DimensionError("fraction must be in [0, 1]");
  const std::uint32_t d_h = model.dims.d_h;
  // Tolerance keeps products like 0.3 * 10 from rounding up to 4.
  const auto count = static_cast<std::uint32_t>(std::ceil(fraction * d_h - 1e-9));

  std::vector<std::uint32_t> idx(d_h);
  std::iota(idx.begin(), idx.end(), 0u);
  Rng rng(seed);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto k = i + static_cast<std::uint32_t>(rng.below(d_h - i));
    std::swap(idx[i], idx[k]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());

  PlantedModel out{model, idx};
  auto& cols = out.model.layers[layer].w_out_cols;
  for (auto j : idx) std::fill(cols.row(j).begin(), cols.row(j).end(), 0.0f);
  return out;
}

}  // namespace clada
