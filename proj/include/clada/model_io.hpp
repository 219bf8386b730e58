#pragma once

// Weight file layout (all integers and floats little-endian):
//
//   "CLDA"                      4 bytes magic
//   u32 version                 = 1
//   u32 x 7 dims                n_layers, d_model, d_h, n_heads, vocab_size,
//                               max_ctx, rng_seed
//   u8  activation              0 = silu, 1 = relu, 2 = gelu
//   tensors, in this order:
//     tok_embedding             [vocab_size x d_model]
//     for l in 0..n_layers:
//       layers.{l}.attn_norm    [d_model]
//       layers.{l}.wq           [d_model x d_model]
//       layers.{l}.wk           [d_model x d_model]
//       layers.{l}.wv           [d_model x d_model]
//       layers.{l}.wo           [d_model x d_model]
//       layers.{l}.mlp_norm     [d_model]
//       layers.{l}.w_in         [d_h x d_model]
//       layers.{l}.v_in         [d_h x d_model]
//       layers.{l}.w_out        [d_model x d_h]
//     final_norm                [d_model]
//     lm_head                   [vocab_size x d_model]
//
// Each tensor is u32 name length, the name bytes, then f32 row-major data.
// Shapes are implied by the dims block.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "clada/error.hpp"
#include "clada/model.hpp"

namespace clada {

inline constexpr std::array<char, 4> kWeightMagic = {'C', 'L', 'D', 'A'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline void put_tensor(std::ostream& os, const std::string& name, std::span<const float> data) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

class WeightReader {
 public:
  explicit WeightReader(std::istream& is) : is_(is) {}

  void bytes(void* dst, std::size_t n, const std::string& field) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError("truncated weight file while reading " + field);
  }

  std::uint32_t u32(const std::string& field) {
    std::uint32_t v;
    bytes(&v, 4, field);
    return v;
  }

  void tensor(const std::string& name, std::span<float> out) {
    const auto len = u32("name length of tensor '" + name + "'");
    if (len != name.size()) throw FormatError("tensor name mismatch: expected '" + name + "'");
    std::string got(len, '\0');
    bytes(got.data(), len, "name of tensor '" + name + "'");
    if (got != name) throw FormatError("tensor name mismatch: expected '" + name + "', found '" + got + "'");
    bytes(out.data(), out.size() * sizeof(float), "tensor '" + name + "'");
    if (!all_finite(out)) throw FormatError("tensor '" + name + "' contains non-finite values");
  }

 private:
  std::istream& is_;
};

// Visits every tensor in file order.
template <typename Model, typename Fn>
void for_each_tensor(Model& m, Fn&& fn) {
  fn(std::string("tok_embedding"), m.token_embedding.data);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& lw = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "attn_norm", lw.attn_norm);
    fn(p + "wq", lw.wq.data);
    fn(p + "wk", lw.wk.data);
    fn(p + "wv", lw.wv.data);
    fn(p + "wo", lw.wo.data);
    fn(p + "mlp_norm", lw.mlp_norm);
    fn(p + "w_in", lw.w_in.data);
    fn(p + "v_in", lw.v_in.data);
    fn(p + "w_out", lw.w_out_cols.data);
  }
  fn(std::string("final_norm"), m.final_norm);
  fn(std::string("lm_head"), m.lm_head.data);
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace detail

inline void write_model(const ModelWeights& m, std::ostream& os) {
  os.write(kWeightMagic.data(), 4);
  detail::put_u32(os, kWeightVersion);
  const auto& d = m.dims;
  for (std::uint32_t v : {d.n_layers, d.d_model, d.d_h, d.n_heads, d.vocab_size, d.max_ctx, m.rng_seed})
    detail::put_u32(os, v);
  const auto act = static_cast<std::uint8_t>(m.activation);
  os.write(reinterpret_cast<const char*>(&act), 1);
  detail::for_each_tensor(m, [&](const std::string& name, const auto& data) {
    if (name.ends_with(".w_out")) {
      // In memory W_out is held column-major (one row per neuron).
      const std::size_t l = std::stoul(name.substr(7));
      const Matrix w_out = detail::transpose(m.layers[l].w_out_cols);
      detail::put_tensor(os, name, w_out.data);
    } else {
      detail::put_tensor(os, name, data);
    }
  });
  if (!os) throw IoError("failed writing weight stream");
}

inline ModelWeights read_model(std::istream& is) {
  detail::WeightReader rd(is);
  std::array<char, 4> magic{};
  rd.bytes(magic.data(), 4, "magic");
  if (magic != kWeightMagic) throw FormatError("bad magic: not a CLDA weight file");
  const auto version = rd.u32("version");
  if (version != kWeightVersion) throw FormatError("unsupported version " + std::to_string(version));

  ModelDims d;
  d.n_layers = rd.u32("dims.n_layers");
  d.d_model = rd.u32("dims.d_model");
  d.d_h = rd.u32("dims.d_h");
  d.n_heads = rd.u32("dims.n_heads");
  d.vocab_size = rd.u32("dims.vocab_size");
  d.max_ctx = rd.u32("dims.max_ctx");
  const auto seed = rd.u32("dims.rng_seed");
  try {
    d.validate();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("dims block: ") + e.what());
  }
  std::uint8_t act = 0;
  rd.bytes(&act, 1, "activation_fn");
  if (act > 2) throw FormatError("activation_fn: unknown code " + std::to_string(act));

  ModelWeights m = ModelWeights::zeros(d, static_cast<Activation>(act));
  m.rng_seed = seed;
  detail::for_each_tensor(m, [&](const std::string& name, auto& data) {
    if (name.ends_with(".w_out")) {
      Matrix w_out(d.d_model, d.d_h);
      rd.tensor(name, w_out.data);
      const std::size_t l = std::stoul(name.substr(7));
      m.layers[l].w_out_cols = detail::transpose(w_out);
    } else {
      rd.tensor(name, data);
    }
  });
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0) throw FormatError("trailing bytes after lm_head");
  return m;
}

inline void save_model(const ModelWeights& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_model(m, os);
}

inline ModelWeights load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_model(is);
}

}  // namespace clada
