#pragma once

#include <filesystem>
#include <string>

#include "clada/clada.hpp"

namespace testutil {

inline clada::ModelDims small_dims(std::uint32_t layers = 2, std::uint32_t dm = 16, std::uint32_t dh = 64) {
  clada::ModelDims d;
  d.n_layers = layers;
  d.d_model = dm;
  d.d_h = dh;
  d.n_heads = 2;
  d.vocab_size = 258;
  d.max_ctx = 256;
  return d;
}

inline clada::ModelWeights small_model(std::uint64_t seed = 1, std::uint32_t layers = 2, std::uint32_t dm = 16,
                                       std::uint32_t dh = 64) {
  return clada::gen_random_model(seed, small_dims(layers, dm, dh));
}

inline clada::TokenSequence random_tokens(std::uint64_t seed, std::size_t n, std::uint32_t vocab = 256) {
  clada::Rng rng(seed);
  clada::TokenSequence t(n);
  for (auto& x : t) x = static_cast<clada::TokenId>(rng.below(vocab));
  return t;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("clada_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double rel_err(std::span<const double> a, std::span<const float> b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

}  // namespace testutil
