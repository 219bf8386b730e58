#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "clada/activation_meter.hpp"
#include "clada/cogload.hpp"
#include "clada/corpus.hpp"
#include "clada/error.hpp"
#include "clada/forward.hpp"
#include "clada/model.hpp"

namespace clada {

enum class SearchMethod { bisection, grid };

inline std::string_view to_string(SearchMethod m) { return m == SearchMethod::bisection ? "bisection" : "grid"; }

inline SearchMethod parse_search_method(std::string_view s) {
  if (s == "bisection") return SearchMethod::bisection;
  if (s == "grid") return SearchMethod::grid;
  throw FormatError("unknown search method '" + std::string(s) + "'");
}

struct SearchConfig {
  double cett_budget = 0.2;
  SearchMethod method = SearchMethod::bisection;
  std::size_t bisection_iters = 40;
  std::size_t grid = 64;  // number of quantile cells
  std::string corpus_id = "unspecified";
  std::size_t token_cap = 4096;
  Aggregation aggregation = Aggregation::mean_over_prefix;
  // Cognitive thresholds: explicit values win over calibration quantiles.
  std::optional<double> tau_s;
  std::optional<double> tau_H;
  double q_s = 0.75;
  double q_H = 0.75;
  double lambda = 0.80;
  double gamma = 0.12;

  void validate() const {
    if (!(cett_budget >= 0.0 && cett_budget <= 1.0)) throw DimensionError("cett_budget must be in [0, 1]");
    if (bisection_iters < 1) throw DimensionError("bisection_iters must be >= 1");
    if (grid < 1) throw DimensionError("grid must be >= 1");
    if (token_cap < 1) throw DimensionError("token_cap must be >= 1");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"cett_budget", cett_budget},
                        {"method", std::string(to_string(method))},
                        {"bisection_iters", bisection_iters},
                        {"grid", grid},
                        {"corpus_id", corpus_id},
                        {"token_cap", token_cap},
                        {"aggregation", std::string(to_string(aggregation))},
                        {"q_s", q_s},
                        {"q_H", q_H},
                        {"lambda", lambda},
                        {"gamma", gamma}};
    if (tau_s) j["tau_s"] = *tau_s;
    if (tau_H) j["tau_H"] = *tau_H;
    return j;
  }

  /// FNV-1a over the canonical JSON form.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : to_json().dump()) {
      h ^= c;
      h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

/// Whether the load indicators compare normalized or raw signal values.
enum class SignalMode { normalized, raw };

struct LayerThreshold {
  double tau_base = 0.0;
  double lambda = 0.80;
  double gamma = 0.12;
  double achieved_cett = 0.0;
  double achieved_sparsity = 0.0;

  friend bool operator==(const LayerThreshold&, const LayerThreshold&) = default;
};

/// Searched per-layer base thresholds plus the cognitive modulation knobs
/// consumed by the runtime.
struct ThresholdPolicy {
  double cett_budget = 0.2;
  double tau_s = 0.75;
  double tau_H = 0.75;
  std::vector<LayerThreshold> layers;
  Aggregation aggregation = Aggregation::mean_over_prefix;
  SignalMode signal_mode = SignalMode::normalized;
  // +1 applies the modulation as written (thresholds rise under load),
  // -1 lowers thresholds under load instead.
  double modulation_sign = 1.0;
  nlohmann::json meta = nlohmann::json::object();

  friend bool operator==(const ThresholdPolicy&, const ThresholdPolicy&) = default;

  /// Policy with the same tau_base on every layer; handy for tests and CLI.
  static ThresholdPolicy uniform(std::size_t n_layers, double tau_base) {
    ThresholdPolicy p;
    p.layers.assign(n_layers, LayerThreshold{tau_base});
    return p;
  }
};

inline nlohmann::json to_json(const ThresholdPolicy& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers)
    layers.push_back({{"tau_base", l.tau_base},
                      {"lambda", l.lambda},
                      {"gamma", l.gamma},
                      {"achieved_cett", l.achieved_cett},
                      {"achieved_sparsity", l.achieved_sparsity}});
  return {{"cett_budget", p.cett_budget},
          {"tau_s", p.tau_s},
          {"tau_H", p.tau_H},
          {"layers", layers},
          {"aggregation", std::string(to_string(p.aggregation))},
          {"signal_mode", p.signal_mode == SignalMode::raw ? "raw" : "normalized"},
          {"modulation_sign", p.modulation_sign},
          {"meta", p.meta}};
}

inline ThresholdPolicy policy_from_json(const nlohmann::json& j) {
  auto fail = [](const std::string& what) -> void { throw FormatError("policy: " + what); };
  if (!j.is_object()) fail("top level must be an object");
  auto number = [&](const nlohmann::json& obj, const char* key, double def, const std::string& where) {
    if (!obj.contains(key)) return def;
    if (!obj[key].is_number()) fail(where + "'" + key + "' must be a number");
    const double v = obj[key].get<double>();
    if (!std::isfinite(v)) fail(where + "'" + key + "' must be finite");
    return v;
  };
  ThresholdPolicy p;
  p.cett_budget = number(j, "cett_budget", p.cett_budget, "");
  p.tau_s = number(j, "tau_s", p.tau_s, "");
  p.tau_H = number(j, "tau_H", p.tau_H, "");
  p.modulation_sign = number(j, "modulation_sign", p.modulation_sign, "");
  if (p.modulation_sign != 1.0 && p.modulation_sign != -1.0) fail("'modulation_sign' must be +1 or -1");
  if (j.contains("aggregation")) {
    if (!j["aggregation"].is_string()) fail("'aggregation' must be a string");
    try {
      p.aggregation = parse_aggregation(j["aggregation"].get<std::string>());
    } catch (const FormatError& e) {
      fail(e.what());
    }
  }
  if (j.contains("signal_mode")) {
    const auto m = j["signal_mode"].is_string() ? j["signal_mode"].get<std::string>() : std::string{};
    if (m == "raw")
      p.signal_mode = SignalMode::raw;
    else if (m == "normalized")
      p.signal_mode = SignalMode::normalized;
    else
      fail("'signal_mode' must be \"raw\" or \"normalized\"");
  }
  if (!j.contains("layers") || !j["layers"].is_array()) fail("missing array field 'layers'");
  for (std::size_t i = 0; i < j["layers"].size(); ++i) {
    const auto& lj = j["layers"][i];
    const std::string where = "layers[" + std::to_string(i) + "].";
    if (!lj.is_object()) fail(where + " must be an object");
    if (!lj.contains("tau_base")) fail(where + "tau_base is missing");
    LayerThreshold l;
    l.tau_base = number(lj, "tau_base", 0.0, where);
    if (l.tau_base < 0.0) fail(where + "tau_base must be >= 0");
    l.lambda = number(lj, "lambda", l.lambda, where);
    l.gamma = number(lj, "gamma", l.gamma, where);
    l.achieved_cett = number(lj, "achieved_cett", 0.0, where);
    l.achieved_sparsity = number(lj, "achieved_sparsity", 0.0, where);
    p.layers.push_back(l);
  }
  if (j.contains("meta")) {
    if (!j["meta"].is_object()) fail("'meta' must be an object");
    p.meta = j["meta"];
  }
  return p;
}

inline void save_policy(const ThresholdPolicy& p, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << to_json(p).dump(2) << '\n';
}

inline ThresholdPolicy load_policy(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open policy '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("policy: ") + e.what());
  }
  return policy_from_json(j);
}

/// MLP inputs and aggregated magnitudes of every layer over a corpus slice,
/// plus the cognitive signals of the same sequences.
struct ValidationSample {
  std::vector<std::vector<std::vector<float>>> inputs;  // [layer][token] -> x
  std::vector<NeuronMagnitudes> aggregate;              // per layer, over all sampled tokens
  std::vector<CognitiveSignal> signals;
  std::size_t tokens = 0;
};

/// Runs dense forward passes over the corpus in order until `token_cap`
/// tokens are collected. Sequences are clipped to max_ctx and to the cap.
inline ValidationSample collect_sample(const ModelWeights& m, const Corpus& corpus, std::size_t token_cap,
                                       Aggregation agg = Aggregation::mean_over_prefix) {
  ValidationSample s;
  const std::size_t L = m.dims.n_layers;
  s.inputs.resize(L);
  std::vector<std::vector<std::vector<float>>> mags(L);
  TraceConfig cfg;
  cfg.retain_inputs = true;
  for (const auto& seq : corpus.sequences) {
    if (s.tokens >= token_cap) break;
    const std::size_t n = std::min({seq.tokens.size(), static_cast<std::size_t>(m.dims.max_ctx), token_cap - s.tokens});
    if (n == 0) continue;
    TokenSequence toks(seq.tokens.begin(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(n));
    auto res = forward(m, toks, cfg);
    for (auto& r : res.trace.records) {
      s.inputs[r.layer].push_back(std::move(r.mlp_input));
      mags[r.layer].push_back(std::move(r.magnitudes));
    }
    if (toks.size() >= 2) s.signals.push_back(signal_from_logits(res.logits, toks));
    s.tokens += n;
  }
  if (s.tokens == 0) throw InsufficientDataError("validation corpus yields no tokens");
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<std::span<const float>> rows(mags[l].begin(), mags[l].end());
    s.aggregate.push_back(aggregate_magnitudes(l, rows, agg));
  }
  return s;
}

struct LayerSearchResult {
  double tau_base = 0.0;
  double achieved_cett = 0.0;
  double achieved_sparsity = 0.0;   // mask built from the aggregated sample magnitudes
  double per_token_cut_fraction = 0.0;
  double resolution = 0.0;          // distance to the nearest infeasible candidate
  std::size_t valid_tokens = 0;
  std::size_t degenerate_tokens = 0;
};

namespace detail {

inline std::vector<double> grid_candidates(const CettEvaluator& ev, std::size_t cells) {
  std::vector<float> pooled;
  for (const auto& p : ev.profiles()) {
    auto s = p.sorted_magnitudes();
    pooled.insert(pooled.end(), s.begin(), s.end());
  }
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> c;
  c.push_back(0.0);
  for (std::size_t k = 1; k <= cells; ++k) {
    const double pos = static_cast<double>(k) / static_cast<double>(cells) * static_cast<double>(pooled.size() - 1);
    c.push_back(pooled[static_cast<std::size_t>(std::llround(pos))]);
  }
  c.push_back(std::nextafter(static_cast<double>(pooled.back()), std::numeric_limits<double>::infinity()));
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

}  // namespace detail

/// Largest epsilon with mean CETT <= budget. Mean CETT is monotone in
/// epsilon, so bisection over [0, max A_j] brackets the answer; the grid
/// variant scans pooled-magnitude quantiles instead.
inline LayerSearchResult search_layer(const CettEvaluator& ev, const NeuronMagnitudes* aggregate,
                                      const SearchConfig& cfg) {
  cfg.validate();
  const double budget = cfg.cett_budget;
  const double top = std::nextafter(static_cast<double>(ev.max_magnitude()), std::numeric_limits<double>::infinity());
  LayerSearchResult r;
  r.valid_tokens = ev.valid_tokens();
  r.degenerate_tokens = ev.degenerate_tokens();

  if (ev.mean(top) <= budget) {
    r.tau_base = top;
    r.resolution = 0.0;
  } else if (cfg.method == SearchMethod::bisection) {
    double lo = 0.0, hi = top;
    for (std::size_t i = 0; i < cfg.bisection_iters; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (ev.mean(mid) <= budget)
        lo = mid;
      else
        hi = mid;
    }
    r.tau_base = lo;
    r.resolution = hi - lo;
  } else {
    const auto cand = detail::grid_candidates(ev, cfg.grid);
    std::size_t best = 0;
    for (std::size_t k = 0; k < cand.size(); ++k)
      if (ev.mean(cand[k]) <= budget) best = k;
    r.tau_base = cand[best];
    r.resolution = best + 1 < cand.size() ? cand[best + 1] - cand[best] : 0.0;
  }
  r.achieved_cett = ev.mean(r.tau_base);
  r.per_token_cut_fraction = ev.mean_cut_fraction(r.tau_base);
  r.achieved_sparsity = aggregate ? sparsity(build_mask(*aggregate, r.tau_base)) : r.per_token_cut_fraction;
  return r;
}

inline LayerSearchResult search_layer(const ModelWeights& m, std::size_t layer,
                                      const std::vector<std::vector<float>>& sample, const SearchConfig& cfg) {
  m.layer(layer);
  CettEvaluator ev(m, layer, sample);
  const auto agg = magnitudes(m, layer, sample, cfg.aggregation);
  return search_layer(ev, &agg, cfg);
}

/// Searches every layer and fills the modulation defaults.
inline ThresholdPolicy search_all(const ModelWeights& m, const ValidationSample& sample, const SearchConfig& cfg) {
  cfg.validate();
  ThresholdPolicy p;
  p.cett_budget = cfg.cett_budget;
  p.aggregation = cfg.aggregation;
  nlohmann::json per_layer = nlohmann::json::array();
  for (std::size_t l = 0; l < m.dims.n_layers; ++l) {
    LayerSearchResult r;
    try {
      CettEvaluator ev(m, l, sample.inputs[l]);
      r = search_layer(ev, &sample.aggregate[l], cfg);
    } catch (const Error& e) {
      throw InsufficientDataError("layer " + std::to_string(l) + ": " + e.what());
    }
    p.layers.push_back({r.tau_base, cfg.lambda, cfg.gamma, r.achieved_cett, r.achieved_sparsity});
    per_layer.push_back({{"per_token_cut_fraction", r.per_token_cut_fraction},
                         {"resolution", r.resolution},
                         {"valid_tokens", r.valid_tokens},
                         {"degenerate_tokens", r.degenerate_tokens}});
  }
  if (cfg.tau_s && cfg.tau_H) {
    p.tau_s = *cfg.tau_s;
    p.tau_H = *cfg.tau_H;
  } else {
    const auto th = calibrate_thresholds(sample.signals, cfg.q_s, cfg.q_H);
    p.tau_s = cfg.tau_s.value_or(th.tau_s);
    p.tau_H = cfg.tau_H.value_or(th.tau_H);
  }
  p.meta = {{"search_config_hash", cfg.hash()},
            {"search_config", cfg.to_json()},
            {"corpus_id", cfg.corpus_id},
            {"sample_tokens", sample.tokens},
            {"layers", per_layer}};
  return p;
}

inline ThresholdPolicy search_all(const ModelWeights& m, const Corpus& corpus, const SearchConfig& cfg) {
  return search_all(m, collect_sample(m, corpus, cfg.token_cap, cfg.aggregation), cfg);
}

}  // namespace clada
