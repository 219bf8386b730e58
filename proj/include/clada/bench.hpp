#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clada/corpus.hpp"
#include "clada/error.hpp"
#include "clada/runtime.hpp"

namespace clada {

inline constexpr int kReportSchemaVersion = 1;

struct BenchResult {
  std::string mode;
  std::size_t prompt_len = 0;
  std::size_t gen_len = 0;
  std::size_t batch_size = 1;
  double wall_time_s = 0.0;  // median over repeats, generation loop only
  double speedup_vs_dense = 1.0;
  double mean_sparsity = 0.0;
  std::uint32_t n_layers = 0;
  std::uint32_t d_model = 0;
  std::uint32_t d_h = 0;
  double wall_time_cv = 0.0;
  double prefill_time_s = 0.0;  // median over repeats
  std::size_t repeats = 0;
};

struct BenchOptions {
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
  GenerationOptions generation;
};

/// Worker count from CLADA_THREADS (default 1). The engine itself is
/// single-threaded; the value is recorded with every report.
inline std::size_t bench_threads() {
  if (const char* env = std::getenv("CLADA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw FormatError(std::string("CLADA_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

/// `batch` synthetic prompts of exactly `prompt_len` tokens.
inline std::vector<TokenSequence> bench_prompts(std::uint64_t seed, std::size_t prompt_len, std::size_t batch) {
  std::vector<TokenSequence> out;
  for (auto& s : synthetic_corpus(seed, batch, prompt_len).sequences) out.push_back(std::move(s.tokens));
  return out;
}

namespace detail {

struct Timing {
  double median = 0.0;
  double cv = 0.0;
  double prefill_median = 0.0;
  double sparsity = 0.0;
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline Timing time_mode(const ModelWeights& m, const std::vector<TokenSequence>& prompts, const ThresholdPolicy& policy,
                        const RuntimeMode& mode, std::size_t gen_len, const BenchOptions& opt) {
  for (std::size_t w = 0; w < opt.warmup; ++w) generate_batch(m, prompts, policy, mode, gen_len, opt.generation);
  std::vector<double> wall, pre;
  double sparsity_sum = 0.0;
  for (std::size_t r = 0; r < opt.repeats; ++r) {
    const auto res = generate_batch(m, prompts, policy, mode, gen_len, opt.generation);
    wall.push_back(res.front().stats.wall_time_s);
    pre.push_back(res.front().stats.prefill_time_s);
    double s = 0.0;
    for (const auto& g : res) s += g.stats.mean_sparsity;
    sparsity_sum += s / static_cast<double>(res.size());
  }
  Timing t;
  t.median = median(wall);
  t.prefill_median = median(pre);
  t.sparsity = sparsity_sum / static_cast<double>(opt.repeats);
  const double mean = std::accumulate(wall.begin(), wall.end(), 0.0) / static_cast<double>(wall.size());
  double var = 0.0;
  for (double x : wall) var += (x - mean) * (x - mean);
  var /= static_cast<double>(wall.size() > 1 ? wall.size() - 1 : 1);
  t.cv = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
  return t;
}

}  // namespace detail

/// Median-of-repeats generation latency per mode. Dense is always timed as
/// the denominator; it appears in the output only when requested.
inline std::vector<BenchResult> bench_latency(const ModelWeights& m, const ThresholdPolicy& policy,
                                              const std::vector<RuntimeMode>& modes, std::size_t prompt_len,
                                              std::size_t gen_len, std::size_t batch, const BenchOptions& opt = {}) {
  if (opt.repeats < 3) throw DimensionError("bench needs repeats >= 3");
  if (batch < 1 || prompt_len < 1 || gen_len < 1) throw DimensionError("prompt, gen and batch must be >= 1");
  if (prompt_len + gen_len > m.dims.max_ctx)
    throw LengthError("prompt " + std::to_string(prompt_len) + " + gen " + std::to_string(gen_len) +
                      " exceeds max_ctx " + std::to_string(m.dims.max_ctx));
  const auto prompts = bench_prompts(opt.seed, prompt_len, batch);

  auto row = [&](const RuntimeMode& mode, const detail::Timing& t, double dense_time) {
    BenchResult r;
    r.mode = mode.name();
    r.prompt_len = prompt_len;
    r.gen_len = gen_len;
    r.batch_size = batch;
    r.wall_time_s = t.median;
    r.speedup_vs_dense = dense_time / t.median;
    r.mean_sparsity = t.sparsity;
    r.n_layers = m.dims.n_layers;
    r.d_model = m.dims.d_model;
    r.d_h = m.dims.d_h;
    r.wall_time_cv = t.cv;
    r.prefill_time_s = t.prefill_median;
    r.repeats = opt.repeats;
    return r;
  };

  const auto dense = detail::time_mode(m, prompts, policy, RuntimeMode::dense(), gen_len, opt);
  std::vector<BenchResult> rows;
  for (const auto& mode : modes) {
    const auto t = mode.kind == ModeKind::dense ? dense : detail::time_mode(m, prompts, policy, mode, gen_len, opt);
    rows.push_back(row(mode, t, dense.median));
  }
  return rows;
}

struct BenchGrid {
  std::vector<std::size_t> prompt = {256};
  std::vector<std::size_t> gen = {256};
  std::vector<std::size_t> batch = {1};

  std::size_t cells() const { return prompt.size() * gen.size() * batch.size(); }
};

/// Parses items like "prompt=256,512", "gen=256", "batch=1,4". Keys not
/// given keep their defaults.
inline BenchGrid parse_grid(const std::vector<std::string>& items) {
  BenchGrid g;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw FormatError("grid item '" + item + "' is not key=values");
    const std::string key = item.substr(0, eq);
    std::vector<std::size_t> values;
    std::stringstream ss(item.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) {
      std::size_t used = 0;
      unsigned long x = 0;
      try {
        x = std::stoul(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != v.size() || x == 0) throw FormatError("grid value '" + v + "' in '" + item + "'");
      values.push_back(x);
    }
    if (values.empty()) throw FormatError("grid item '" + item + "' has no values");
    if (key == "prompt")
      g.prompt = values;
    else if (key == "gen")
      g.gen = values;
    else if (key == "batch")
      g.batch = values;
    else
      throw FormatError("unknown grid key '" + key + "'");
  }
  return g;
}

inline std::vector<BenchResult> bench_grid(const ModelWeights& m, const ThresholdPolicy& policy,
                                           const std::vector<RuntimeMode>& modes, const BenchGrid& grid,
                                           const BenchOptions& opt = {}) {
  std::vector<BenchResult> rows;
  for (auto p : grid.prompt)
    for (auto g : grid.gen)
      for (auto b : grid.batch) {
        auto r = bench_latency(m, policy, modes, p, g, b, opt);
        rows.insert(rows.end(), r.begin(), r.end());
      }
  return rows;
}

enum class ReportFormat { csv, json };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw FormatError("unknown report format '" + std::string(s) + "'");
}

inline constexpr std::string_view kBenchColumns =
    "schema_version,mode,prompt_len,gen_len,batch_size,wall_time_s,speedup_vs_dense,mean_sparsity,n_layers,d_model,"
    "d_h,wall_time_cv,prefill_time_s,repeats";

inline nlohmann::json to_json(const BenchResult& r) {
  return {{"mode", r.mode},
          {"prompt_len", r.prompt_len},
          {"gen_len", r.gen_len},
          {"batch_size", r.batch_size},
          {"wall_time_s", r.wall_time_s},
          {"speedup_vs_dense", r.speedup_vs_dense},
          {"mean_sparsity", r.mean_sparsity},
          {"n_layers", r.n_layers},
          {"d_model", r.d_model},
          {"d_h", r.d_h},
          {"wall_time_cv", r.wall_time_cv},
          {"prefill_time_s", r.prefill_time_s},
          {"repeats", r.repeats}};
}

inline void write_report(const std::vector<BenchResult>& rows, ReportFormat fmt, std::ostream& os) {
  if (fmt == ReportFormat::json) {
    nlohmann::json j = {{"schema_version", kReportSchemaVersion}, {"threads", bench_threads()}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back(to_json(r));
    os << j.dump(2) << '\n';
    return;
  }
  os << kBenchColumns << '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%zu,%zu,%zu,%.9g,%.9g,%.9g,%u,%u,%u,%.9g,%.9g,%zu\n", kReportSchemaVersion,
                  r.mode.c_str(), r.prompt_len, r.gen_len, r.batch_size, r.wall_time_s, r.speedup_vs_dense,
                  r.mean_sparsity, r.n_layers, r.d_model, r.d_h, r.wall_time_cv, r.prefill_time_s, r.repeats);
    os << buf;
  }
}

inline void emit_report(const std::vector<BenchResult>& rows, ReportFormat fmt, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_report(rows, fmt, os);
  if (!os) throw IoError("failed writing '" + path + "'");
}

}  // namespace clada
