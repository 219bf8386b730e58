#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clada/error.hpp"
#include "clada/forward.hpp"
#include "clada/model.hpp"

namespace clada {

enum class Aggregation { per_token, mean_over_prefix, max_over_prefix };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::per_token: return "per_token";
    case Aggregation::mean_over_prefix: return "mean_over_prefix";
    case Aggregation::max_over_prefix: return "max_over_prefix";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "per_token") return Aggregation::per_token;
  if (s == "mean_over_prefix" || s == "mean") return Aggregation::mean_over_prefix;
  if (s == "max_over_prefix" || s == "max") return Aggregation::max_over_prefix;
  throw FormatError("unknown aggregation '" + std::string(s) + "'");
}

struct NeuronMagnitudes {
  std::size_t layer = 0;
  std::vector<float> values;  // A_j >= 0, length d_h
  Aggregation aggregation = Aggregation::mean_over_prefix;
  std::size_t first_position = 0;  // source token range [first, last]
  std::size_t last_position = 0;
};

struct CettReport {
  std::size_t layer = 0;
  double epsilon = 0.0;
  double cett = 0.0;
  std::size_t cut_set_size = 0;
  double denominator = 0.0;  // ||MLP(x)||_2
};

/// Below this MLP output norm a token's CETT is undefined.
inline constexpr double kDegenerateNorm = 1e-12;

namespace detail {

inline void check_hidden(const ModelWeights& m, std::span<const float> x) {
  if (x.size() != m.dims.d_model)
    throw DimensionError("hidden state has length " + std::to_string(x.size()) + ", expected d_model=" +
                         std::to_string(m.dims.d_model));
}

inline float neuron_hidden(const LayerWeights& lw, Activation act, std::span<const float> x, std::size_t j) {
  return activate(act, dot(lw.w_in.row(j), x)) * dot(lw.v_in.row(j), x);
}

}  // namespace detail

/// n_j(x) = sigma(W_in,j x) (V_in,j x) W_out[:, j].
inline std::vector<float> neuron_contribution(const ModelWeights& m, std::size_t layer, std::span<const float> x,
                                              std::size_t j) {
  const auto& lw = m.layer(layer);
  detail::check_hidden(m, x);
  if (j >= m.dims.d_h)
    throw IndexError("neuron " + std::to_string(j) + " out of range (d_h=" + std::to_string(m.dims.d_h) + ")");
  const float h = detail::neuron_hidden(lw, m.activation, x, j);
  auto col = lw.w_out_cols.row(j);
  std::vector<float> out(col.size());
  for (std::size_t i = 0; i < col.size(); ++i) out[i] = h * col[i];
  return out;
}

/// Per-token A_j = |sigma(a) b| * ||W_out[:, j]||_2 for every neuron.
inline std::vector<float> token_magnitudes(const ModelWeights& m, std::size_t layer, std::span<const float> x,
                                           std::span<const float> column_norms) {
  const auto& lw = m.layer(layer);
  detail::check_hidden(m, x);
  std::vector<float> a(m.dims.d_h);
  for (std::size_t j = 0; j < a.size(); ++j)
    a[j] = static_cast<float>(std::fabs(static_cast<double>(detail::neuron_hidden(lw, m.activation, x, j))) *
                              column_norms[j]);
  return a;
}

inline std::vector<float> token_magnitudes(const ModelWeights& m, std::size_t layer, std::span<const float> x) {
  const auto norms = m.out_column_norms(layer);
  return token_magnitudes(m, layer, x, norms);
}

/// Combines per-token magnitude rows. per_token keeps the last row.
inline NeuronMagnitudes aggregate_magnitudes(std::size_t layer, const std::vector<std::span<const float>>& rows,
                                             Aggregation agg, std::size_t first_position = 0) {
  if (rows.empty()) throw EmptyInputError("magnitudes need a non-empty prefix");
  NeuronMagnitudes out;
  out.layer = layer;
  out.aggregation = agg;
  out.first_position = first_position;
  out.last_position = first_position + rows.size() - 1;
  const std::size_t n = rows.front().size();
  switch (agg) {
    case Aggregation::per_token:
      out.values.assign(rows.back().begin(), rows.back().end());
      out.first_position = out.last_position;
      break;
    case Aggregation::mean_over_prefix: {
      std::vector<double> acc(n, 0.0);
      for (const auto& r : rows)
        for (std::size_t j = 0; j < n; ++j) acc[j] += r[j];
      out.values.resize(n);
      for (std::size_t j = 0; j < n; ++j) out.values[j] = static_cast<float>(acc[j] / static_cast<double>(rows.size()));
      break;
    }
    case Aggregation::max_over_prefix:
      out.values.assign(n, 0.0f);
      for (const auto& r : rows)
        for (std::size_t j = 0; j < n; ++j) out.values[j] = std::max(out.values[j], r[j]);
      break;
  }
  return out;
}

/// Neuron magnitudes over a prefix of MLP input states.
inline NeuronMagnitudes magnitudes(const ModelWeights& m, std::size_t layer,
                                   const std::vector<std::vector<float>>& prefix_states,
                                   Aggregation agg = Aggregation::mean_over_prefix) {
  if (prefix_states.empty()) throw EmptyInputError("magnitudes need a non-empty prefix");
  const auto norms = m.out_column_norms(layer);
  std::vector<std::vector<float>> per_token;
  per_token.reserve(prefix_states.size());
  for (const auto& x : prefix_states) per_token.push_back(token_magnitudes(m, layer, x, norms));
  std::vector<std::span<const float>> rows(per_token.begin(), per_token.end());
  return aggregate_magnitudes(layer, rows, agg);
}

/// Magnitudes of one layer straight from a forward trace.
inline NeuronMagnitudes magnitudes_from_trace(const ActivationTrace& trace, std::size_t layer,
                                              Aggregation agg = Aggregation::mean_over_prefix) {
  const auto recs = trace.layer(layer);
  if (recs.empty()) throw EmptyInputError("trace holds no records for layer " + std::to_string(layer));
  std::vector<std::span<const float>> rows;
  rows.reserve(recs.size());
  for (const auto* r : recs) rows.emplace_back(r->magnitudes);
  return aggregate_magnitudes(layer, rows, agg, recs.front()->position);
}

/// CETT of one token: ||sum_{A_j < eps} n_j|| / ||MLP(x)||. Computed by
/// direct summation of the cut contributions.
inline CettReport cett(const ModelWeights& m, std::size_t layer, std::span<const float> x, double epsilon) {
  if (!(epsilon >= 0.0)) throw DimensionError("epsilon must be >= 0");
  const auto& lw = m.layer(layer);
  detail::check_hidden(m, x);
  const auto norms = m.out_column_norms(layer);
  const std::size_t dm = m.dims.d_model;
  std::vector<double> cut(dm, 0.0), full(dm, 0.0);
  CettReport rep;
  rep.layer = layer;
  rep.epsilon = epsilon;
  for (std::size_t j = 0; j < m.dims.d_h; ++j) {
    const float h = detail::neuron_hidden(lw, m.activation, x, j);
    const auto a = static_cast<float>(std::fabs(static_cast<double>(h)) * norms[j]);
    const bool is_cut = a < epsilon;
    if (is_cut) ++rep.cut_set_size;
    auto col = lw.w_out_cols.row(j);
    for (std::size_t i = 0; i < dm; ++i) {
      const double c = static_cast<double>(h * col[i]);
      full[i] += c;
      if (is_cut) cut[i] += c;
    }
  }
  rep.denominator = norm2(std::span<const double>(full));
  if (rep.denominator < kDegenerateNorm)
    throw DegenerateError("||MLP(x)|| below 1e-12 in layer " + std::to_string(layer));
  rep.cett = norm2(std::span<const double>(cut)) / rep.denominator;
  return rep;
}

struct MeanCett {
  double mean = 0.0;
  std::size_t valid_tokens = 0;
  std::size_t degenerate_tokens = 0;
};

/// Mean per-token CETT over a sample of MLP inputs by direct summation.
/// Degenerate tokens are skipped and counted.
inline MeanCett mean_cett(const ModelWeights& m, std::size_t layer, const std::vector<std::vector<float>>& sample,
                          double epsilon) {
  if (sample.empty()) throw EmptyInputError("mean_cett needs a non-empty sample");
  MeanCett out;
  double sum = 0.0;
  for (const auto& x : sample) {
    try {
      sum += cett(m, layer, x, epsilon).cett;
      ++out.valid_tokens;
    } catch (const DegenerateError&) {
      ++out.degenerate_tokens;
    }
  }
  if (out.valid_tokens == 0) throw InsufficientDataError("every token in the sample has a degenerate MLP output");
  out.mean = sum / static_cast<double>(out.valid_tokens);
  return out;
}

/// Precomputed CETT curve of one token: neurons sorted by A_j ascending and
/// the norm of each cumulative cut sum. CETT at any eps is then a binary
/// search, which is what makes a threshold search over thousands of tokens
/// affordable.
class CettProfile {
 public:
  CettProfile(const ModelWeights& m, std::size_t layer, std::span<const float> x, std::span<const float> column_norms) {
    const auto& lw = m.layer(layer);
    detail::check_hidden(m, x);
    const std::size_t d_h = m.dims.d_h;
    const std::size_t dm = m.dims.d_model;
    std::vector<float> h(d_h);
    std::vector<float> a(d_h);
    for (std::size_t j = 0; j < d_h; ++j) {
      h[j] = detail::neuron_hidden(lw, m.activation, x, j);
      a[j] = static_cast<float>(std::fabs(static_cast<double>(h[j])) * column_norms[j]);
    }
    std::vector<std::uint32_t> order(d_h);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto p, auto q) { return a[p] < a[q]; });

    sorted_.resize(d_h);
    cumulative_.resize(d_h + 1);
    cumulative_[0] = 0.0;
    std::vector<double> c(dm, 0.0);
    for (std::size_t k = 0; k < d_h; ++k) {
      const auto j = order[k];
      sorted_[k] = a[j];
      auto col = lw.w_out_cols.row(j);
      double ss = 0.0;
      for (std::size_t i = 0; i < dm; ++i) {
        c[i] += static_cast<double>(h[j] * col[i]);
        ss += c[i] * c[i];
      }
      cumulative_[k + 1] = std::sqrt(ss);
    }
    denominator_ = cumulative_[d_h];
  }

  bool degenerate() const { return denominator_ < kDegenerateNorm; }
  double denominator() const { return denominator_; }
  float max_magnitude() const { return sorted_.empty() ? 0.0f : sorted_.back(); }
  std::span<const float> sorted_magnitudes() const { return sorted_; }

  std::size_t cut_count(double epsilon) const {
    return static_cast<std::size_t>(
        std::lower_bound(sorted_.begin(), sorted_.end(), epsilon, [](float v, double e) { return v < e; }) -
        sorted_.begin());
  }

  double cett(double epsilon) const { return cumulative_[cut_count(epsilon)] / denominator_; }

 private:
  std::vector<float> sorted_;
  std::vector<double> cumulative_;
  double denominator_ = 0.0;
};

/// Mean CETT over a fixed sample, backed by per-token profiles.
class CettEvaluator {
 public:
  CettEvaluator(const ModelWeights& m, std::size_t layer, const std::vector<std::vector<float>>& sample)
      : layer_(layer), d_h_(m.dims.d_h) {
    if (sample.empty()) throw EmptyInputError("CETT sample is empty");
    const auto norms = m.out_column_norms(layer);
    for (const auto& x : sample) {
      CettProfile p(m, layer, x, norms);
      if (p.degenerate()) {
        ++degenerate_;
        continue;
      }
      max_a_ = std::max(max_a_, p.max_magnitude());
      profiles_.push_back(std::move(p));
    }
    if (profiles_.empty()) throw InsufficientDataError("every token in the sample has a degenerate MLP output");
  }

  std::size_t layer() const { return layer_; }
  std::size_t valid_tokens() const { return profiles_.size(); }
  std::size_t degenerate_tokens() const { return degenerate_; }
  float max_magnitude() const { return max_a_; }
  const std::vector<CettProfile>& profiles() const { return profiles_; }

  double mean(double epsilon) const {
    double s = 0.0;
    for (const auto& p : profiles_) s += p.cett(epsilon);
    return s / static_cast<double>(profiles_.size());
  }

  /// Mean fraction of neurons with A_j(t) < eps, token by token.
  double mean_cut_fraction(double epsilon) const {
    double s = 0.0;
    for (const auto& p : profiles_) s += static_cast<double>(p.cut_count(epsilon));
    return s / static_cast<double>(profiles_.size() * d_h_);
  }

 private:
  std::size_t layer_;
  std::size_t d_h_;
  std::vector<CettProfile> profiles_;
  std::size_t degenerate_ = 0;
  float max_a_ = 0.0f;
};

/// mask[j] = A_j >= tau. Ties at tau stay active.
inline NeuronMask build_mask(std::span<const float> mags, double tau) {
  NeuronMask mask(mags.size());
  for (std::size_t j = 0; j < mags.size(); ++j) mask[j] = mags[j] >= tau ? 1 : 0;
  return mask;
}

inline NeuronMask build_mask(const NeuronMagnitudes& mags, double tau) { return build_mask(mags.values, tau); }

inline std::size_t active_count(const NeuronMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
}

/// 1 - active / d_h.
inline double sparsity(const NeuronMask& mask) {
  if (mask.empty()) return 0.0;
  return 1.0 - static_cast<double>(active_count(mask)) / static_cast<double>(mask.size());
}

/// CSV with columns layer, neuron, value, aggregation.
inline void write_magnitudes_csv(const std::vector<NeuronMagnitudes>& mags, std::ostream& os) {
  os << "layer,neuron,value,aggregation\n";
  char buf[64];
  for (const auto& m : mags) {
    for (std::size_t j = 0; j < m.values.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(m.values[j]));
      os << m.layer << ',' << j << ',' << buf << ',' << to_string(m.aggregation) << '\n';
    }
  }
}

}  // namespace clada
