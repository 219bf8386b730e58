#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clada/error.hpp"
#include "clada/forward.hpp"
#include "clada/model.hpp"
#include "clada/tensor.hpp"

namespace clada {

namespace detail {

inline double log_sum_exp(std::span<const float> z) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : z) mx = std::max(mx, static_cast<double>(v));
  double s = 0.0;
  for (float v : z) s += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// -ln softmax(logits)[target], in nats.
inline double surprisal(std::span<const float> logits, std::size_t target) {
  if (target >= logits.size())
    throw RangeError("target " + std::to_string(target) + " >= vocab_size " + std::to_string(logits.size()));
  const double lp = static_cast<double>(logits[target]) - detail::log_sum_exp(logits);
  // Probability clamped at 1e-30; lp <= 0 up to rounding.
  static const double kMax = -std::log(1e-30);
  return std::clamp(-lp, 0.0, kMax);
}

/// Shannon entropy of softmax(logits), in nats.
inline double entropy(std::span<const float> logits) {
  if (logits.empty()) return 0.0;
  const double lse = detail::log_sum_exp(logits);
  double h = 0.0;
  for (float v : logits) {
    const double lp = static_cast<double>(v) - lse;
    const double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  return std::clamp(h, 0.0, std::log(static_cast<double>(logits.size())));
}

/// Min-max scaling to [0, 1]; a constant input maps to zeros.
inline std::vector<double> normalize(std::span<const double> values) {
  if (values.empty()) throw EmptyInputError("normalize needs a non-empty input");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo, range = *hi - *lo;
  std::vector<double> out(values.size(), 0.0);
  if (range > 0.0)
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::clamp((values[i] - min) / range, 0.0, 1.0);
  return out;
}

/// Per-token cognitive load of one sequence; entry i describes token i+1.
struct CognitiveSignal {
  std::vector<double> surprisal_raw;
  std::vector<double> entropy_raw;
  std::vector<double> surprisal_norm;
  std::vector<double> entropy_norm;

  std::size_t size() const { return surprisal_raw.size(); }
};

/// Signal from precomputed logits: s_t and H_t from row t-1 for t = 1..T-1.
inline CognitiveSignal signal_from_logits(const Matrix& logits, const TokenSequence& tokens) {
  if (tokens.size() < 2) throw InsufficientDataError("cognitive signal needs at least 2 tokens");
  if (logits.rows < tokens.size() - 1) throw DimensionError("fewer logits rows than predicted positions");
  CognitiveSignal s;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    s.surprisal_raw.push_back(surprisal(logits.row(t - 1), tokens[t]));
    s.entropy_raw.push_back(entropy(logits.row(t - 1)));
  }
  s.surprisal_norm = normalize(s.surprisal_raw);
  s.entropy_norm = normalize(s.entropy_raw);
  return s;
}

inline CognitiveSignal signal_for_sequence(const ModelWeights& m, const TokenSequence& tokens) {
  if (tokens.size() < 2) throw InsufficientDataError("cognitive signal needs at least 2 tokens");
  return signal_from_logits(forward(m, tokens).logits, tokens);
}

/// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInputError("quantile of empty data");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

struct CognitiveThresholds {
  double tau_s = 0.75;
  double tau_H = 0.75;
};

/// Pooled quantiles of normalized surprisal and entropy.
inline CognitiveThresholds calibrate_thresholds(const std::vector<CognitiveSignal>& signals, double q_s = 0.75,
                                                double q_H = 0.75) {
  if (!(q_s > 0.0 && q_s < 1.0) || !(q_H > 0.0 && q_H < 1.0))
    throw DimensionError("calibration quantiles must lie in (0, 1)");
  std::vector<double> s, h;
  for (const auto& sig : signals) {
    s.insert(s.end(), sig.surprisal_norm.begin(), sig.surprisal_norm.end());
    h.insert(h.end(), sig.entropy_norm.begin(), sig.entropy_norm.end());
  }
  if (s.size() < 10) throw InsufficientDataError("threshold calibration needs >= 10 tokens of signal");
  return {quantile(std::move(s), q_s), quantile(std::move(h), q_H)};
}

/// CSV columns: sequence_id, position, surprisal_raw, entropy_raw,
/// surprisal_norm, entropy_norm. position is the index of the predicted token.
inline void write_signal_csv(const std::vector<std::pair<std::string, CognitiveSignal>>& signals, std::ostream& os) {
  os << "sequence_id,position,surprisal_raw,entropy_raw,surprisal_norm,entropy_norm\n";
  char buf[160];
  for (const auto& [id, sig] : signals) {
    for (std::size_t i = 0; i < sig.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%zu,%.9g,%.9g,%.9g,%.9g\n", i + 1, sig.surprisal_raw[i], sig.entropy_raw[i],
                    sig.surprisal_norm[i], sig.entropy_norm[i]);
      os << id << buf;
    }
  }
}

}  // namespace clada
