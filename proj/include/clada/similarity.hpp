#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "clada/activation_meter.hpp"
#include "clada/cogload.hpp"
#include "clada/corpus.hpp"
#include "clada/error.hpp"
#include "clada/forward.hpp"
#include "clada/model.hpp"
#include "clada/random.hpp"

namespace clada {

enum class SimilarityMetric { cka, cosine };

inline std::string_view to_string(SimilarityMetric m) { return m == SimilarityMetric::cka ? "cka" : "cos"; }

inline SimilarityMetric parse_metric(std::string_view s) {
  if (s == "cka") return SimilarityMetric::cka;
  if (s == "cos" || s == "cosine") return SimilarityMetric::cosine;
  throw FormatError("unknown similarity metric '" + std::string(s) + "'");
}

/// Contribution matrix of one layer at one token (row j = n_j).
struct ActivationMatrix {
  std::size_t layer = 0;
  std::size_t position = 0;
  Matrix matrix;
};

namespace detail {

using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::MatrixXd as_eigen(const Matrix& m) {
  return Eigen::Map<const RowMajorF>(m.data.data(), static_cast<Eigen::Index>(m.rows),
                                     static_cast<Eigen::Index>(m.cols))
      .cast<double>();
}

inline void check_pair(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows || x.cols != y.cols) throw DimensionError("similarity inputs differ in shape");
  if (x.data.empty()) throw DegenerateError("similarity of empty matrices");
}

}  // namespace detail

/// ||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F), no feature centering.
/// Uses the smaller of the two Gram forms: ||X^T Y||_F^2 = <X X^T, Y Y^T>_F.
inline double cka(const Matrix& x, const Matrix& y) {
  detail::check_pair(x, y);
  const Eigen::MatrixXd X = detail::as_eigen(x);
  const Eigen::MatrixXd Y = detail::as_eigen(y);
  double cross, xx, yy;
  if (X.cols() <= X.rows()) {
    const Eigen::MatrixXd gxy = X.transpose() * Y;
    const Eigen::MatrixXd gxx = X.transpose() * X;
    const Eigen::MatrixXd gyy = Y.transpose() * Y;
    cross = gxy.squaredNorm();
    xx = gxx.norm();
    yy = gyy.norm();
  } else {
    const Eigen::MatrixXd kx = X * X.transpose();
    const Eigen::MatrixXd ky = Y * Y.transpose();
    cross = kx.cwiseProduct(ky).sum();
    xx = kx.norm();
    yy = ky.norm();
  }
  if (xx == 0.0 || yy == 0.0) throw DegenerateError("cka of an all-zero matrix");
  return std::clamp(cross / (xx * yy), 0.0, 1.0);
}

/// Cosine of the flattened matrices.
inline double cosine(const Matrix& x, const Matrix& y) {
  detail::check_pair(x, y);
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double a = x.data[i], b = y.data[i];
    dot += a * b;
    nx += a * a;
    ny += b * b;
  }
  if (nx == 0.0 || ny == 0.0) throw DegenerateError("cosine of an all-zero matrix");
  return std::clamp(dot / (std::sqrt(nx) * std::sqrt(ny)), -1.0, 1.0);
}

inline double similarity(SimilarityMetric m, const Matrix& x, const Matrix& y) {
  return m == SimilarityMetric::cka ? cka(x, y) : cosine(x, y);
}

/// sim(M_A', M_B) / sim(M_A, M_B) - 1.
inline double delta_sim(const Matrix& ma, const Matrix& mb, const Matrix& ma_prime, SimilarityMetric metric) {
  const double base = similarity(metric, ma, mb);
  if (base == 0.0) throw DegenerateError("delta_sim: sim(M_A, M_B) is zero");
  return similarity(metric, ma_prime, mb) / base - 1.0;
}

/// ceil(L * alpha), for alpha in (0, 1].
inline std::size_t prefix_length(std::size_t seq_len, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw DimensionError("alpha must be in (0, 1]");
  const auto l = static_cast<std::size_t>(std::ceil(static_cast<double>(seq_len) * alpha - 1e-9));
  return std::clamp<std::size_t>(l, 1, seq_len);
}

/// A with its first ceil(L * alpha) tokens taken from B.
inline TokenSequence make_hybrid(const TokenSequence& a, const TokenSequence& b, double alpha) {
  if (a.size() != b.size())
    throw DimensionError("hybrid sources differ in length (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  if (a.empty()) throw EmptyInputError("hybrid sources are empty");
  const std::size_t l = prefix_length(a.size(), alpha);
  TokenSequence out = a;
  std::copy(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(l), out.begin());
  return out;
}

/// Random token sequences drawn i.i.d. from the corpus unigram distribution.
inline Corpus make_rts(const Corpus& corpus, std::uint64_t seed, std::size_t length, std::size_t count) {
  std::vector<TokenId> pool;
  for (const auto& s : corpus.sequences) pool.insert(pool.end(), s.tokens.begin(), s.tokens.end());
  if (pool.empty()) throw EmptyInputError("make_rts needs a non-empty corpus");
  Rng rng(seed);
  Corpus out;
  for (std::size_t i = 0; i < count; ++i) {
    CorpusSequence s{"rts-" + std::to_string(i), "RTS", {}};
    s.tokens.reserve(length);
    for (std::size_t t = 0; t < length; ++t) s.tokens.push_back(pool[rng.below(pool.size())]);
    out.sequences.push_back(std::move(s));
  }
  return out;
}

/// Forward pass over `tokens` plus, when position == len(tokens), one
/// greedy continuation step; returns the contribution matrix at `position`
/// and the logits of the original tokens.
struct ProbeResult {
  ActivationMatrix activation;
  Matrix logits;
};

inline ProbeResult probe(const ModelWeights& m, const TokenSequence& tokens, std::size_t layer, std::size_t position) {
  m.layer(layer);
  if (tokens.empty()) throw EmptyInputError("probe needs tokens");
  if (position > tokens.size())
    throw IndexError("probe position " + std::to_string(position) + " beyond sequence length " +
                     std::to_string(tokens.size()));
  if (position >= m.dims.max_ctx) throw IndexError("probe position beyond max_ctx");
  TraceConfig cfg;
  cfg.layers = std::vector<std::size_t>{layer};
  cfg.positions = std::vector<std::size_t>{position};
  cfg.retain_contributions = true;

  Engine eng(m);
  DecodeState st(m.dims);
  TraceCollector sink(m, cfg);
  ProbeResult r;
  r.logits = Matrix(tokens.size(), m.dims.vocab_size);
  for (std::size_t t = 0; t < tokens.size(); ++t) eng.step(st, tokens[t], nullptr, r.logits.row(t), &sink);
  if (position == tokens.size()) {
    std::vector<float> next(m.dims.vocab_size);
    eng.step(st, argmax(r.logits.row(tokens.size() - 1)), nullptr, next, &sink);
  }
  auto trace = sink.take();
  r.activation = {layer, position, std::move(trace.records.front().contributions)};
  return r;
}

inline ActivationMatrix extract_activation_matrix(const ModelWeights& m, const TokenSequence& tokens, std::size_t layer,
                                                  std::size_t position) {
  return probe(m, tokens, layer, position).activation;
}

/// One row of the flocking panel.
struct PanelRow {
  std::size_t pair_id = 0;
  std::string group;   // NLS | RTS
  std::string metric;  // cka | cos
  double alpha = 0.0;
  std::size_t prefix_len = 0;
  std::size_t token_len = 0;
  double surprisal_mean_norm = 0.0;
  double entropy_mean_norm = 0.0;
  double delta_sim = 0.0;
};

struct FlockingConfig {
  std::vector<double> alphas = {0.25, 0.30, 0.35, 0.40, 0.45, 0.50};
  std::vector<std::string> groups = {"NLS", "RTS"};
  std::optional<std::size_t> layer;  // default: n_layers / 2
  std::size_t n_pairs = 50;
  std::size_t seq_len = 256;
  std::optional<std::size_t> probe_position;  // default: seq_len (next-token position)
  std::uint64_t seed = 0;
};

/// Hybrid-sequence experiment: for every (group, pair, alpha) builds A',
/// extracts M_A, M_B, M_A' and records delta_sim under both metrics with the
/// mean normalized surprisal and entropy of A'.
inline std::vector<PanelRow> run_flocking_experiment(const ModelWeights& m, const Corpus& corpus,
                                                     const FlockingConfig& cfg) {
  const std::size_t layer = cfg.layer.value_or(m.dims.n_layers / 2);
  const std::size_t L = cfg.seq_len;
  const std::size_t probe_pos = cfg.probe_position.value_or(L);
  m.layer(layer);
  if (L < 2) throw DimensionError("seq_len must be >= 2");
  if (probe_pos > L || probe_pos >= m.dims.max_ctx) throw IndexError("probe position out of range");
  if (cfg.alphas.empty() || cfg.n_pairs == 0) throw EmptyInputError("flocking needs alphas and pairs");

  Corpus nls = corpus.filter_group("NLS");
  if (nls.empty()) nls = corpus;
  std::vector<TokenSequence> natural;
  for (const auto& s : nls.sequences)
    if (s.tokens.size() >= L) natural.emplace_back(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(L));

  std::vector<PanelRow> rows;
  for (const auto& group : cfg.groups) {
    std::vector<TokenSequence> seqs;
    if (group == "NLS") {
      seqs = natural;
    } else if (group == "RTS") {
      if (natural.empty()) throw InsufficientDataError("RTS construction needs natural sequences");
      for (auto& s : make_rts(nls, cfg.seed, L, 2 * cfg.n_pairs).sequences) seqs.push_back(std::move(s.tokens));
    } else {
      throw FormatError("unknown group '" + group + "'");
    }
    if (seqs.size() < 2 * cfg.n_pairs)
      throw InsufficientDataError("group " + group + " has " + std::to_string(seqs.size()) +
                                  " sequences of length >= " + std::to_string(L) + ", need " +
                                  std::to_string(2 * cfg.n_pairs));
    for (std::size_t p = 0; p < cfg.n_pairs; ++p) {
      const auto& a = seqs[2 * p];
      const auto& b = seqs[2 * p + 1];
      const auto ma = probe(m, a, layer, probe_pos).activation.matrix;
      const auto mb = probe(m, b, layer, probe_pos).activation.matrix;
      const double base_cka = cka(ma, mb);
      const double base_cos = cosine(ma, mb);
      for (double alpha : cfg.alphas) {
        const auto hybrid = make_hybrid(a, b, alpha);
        const auto pr = probe(m, hybrid, layer, probe_pos);
        const auto sig = signal_from_logits(pr.logits, hybrid);
        const double s_mean = std::accumulate(sig.surprisal_norm.begin(), sig.surprisal_norm.end(), 0.0) /
                              static_cast<double>(sig.size());
        const double h_mean = std::accumulate(sig.entropy_norm.begin(), sig.entropy_norm.end(), 0.0) /
                              static_cast<double>(sig.size());
        for (auto metric : {SimilarityMetric::cka, SimilarityMetric::cosine}) {
          const double base = metric == SimilarityMetric::cka ? base_cka : base_cos;
          if (base == 0.0) throw DegenerateError("pair " + std::to_string(p) + ": sim(M_A, M_B) is zero");
          PanelRow r;
          r.pair_id = p;
          r.group = group;
          r.metric = std::string(to_string(metric));
          r.alpha = alpha;
          r.prefix_len = prefix_length(L, alpha);
          r.token_len = L;
          r.surprisal_mean_norm = s_mean;
          r.entropy_mean_norm = h_mean;
          r.delta_sim = similarity(metric, pr.activation.matrix, mb) / base - 1.0;
          rows.push_back(std::move(r));
        }
      }
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const PanelRow& x, const PanelRow& y) {
    return std::tie(x.pair_id, x.group, x.alpha, x.metric) < std::tie(y.pair_id, y.group, y.alpha, y.metric);
  });
  return rows;
}

inline constexpr std::string_view kPanelHeader =
    "pair_id,group,metric,alpha,prefix_len,token_len,surprisal_mean_norm,entropy_mean_norm,delta_sim";

inline void write_panel_csv(const std::vector<PanelRow>& rows, std::ostream& os) {
  os << kPanelHeader << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%s,%.2f,%zu,%zu,%.9g,%.9g,%.9g\n", r.pair_id, r.group.c_str(),
                  r.metric.c_str(), r.alpha, r.prefix_len, r.token_len, r.surprisal_mean_norm, r.entropy_mean_norm,
                  r.delta_sim);
    os << buf;
  }
}

inline std::vector<PanelRow> read_panel_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("panel CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kPanelHeader) throw FormatError("panel CSV header mismatch");
  std::vector<PanelRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw FormatError("panel CSV line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      PanelRow r;
      r.pair_id = std::stoul(f[0]);
      r.group = f[1];
      r.metric = f[2];
      r.alpha = std::stod(f[3]);
      r.prefix_len = std::stoul(f[4]);
      r.token_len = std::stoul(f[5]);
      r.surprisal_mean_norm = std::stod(f[6]);
      r.entropy_mean_norm = std::stod(f[7]);
      r.delta_sim = std::stod(f[8]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw FormatError("panel CSV line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

/// S[i][j] = metric(M_i, M_j); symmetric with unit diagonal.
inline Matrix pairwise_similarity(const ModelWeights& m, const std::vector<TokenSequence>& samples, std::size_t layer,
                                  std::optional<std::size_t> position, SimilarityMetric metric) {
  if (samples.size() < 2) throw InsufficientDataError("pairwise similarity needs >= 2 samples");
  std::vector<Matrix> mats;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto mat = extract_activation_matrix(m, samples[i], layer, position.value_or(samples[i].size())).matrix;
    if (std::all_of(mat.data.begin(), mat.data.end(), [](float v) { return v == 0.0f; }))
      throw DegenerateError("sample " + std::to_string(i) + " has an all-zero activation matrix");
    mats.push_back(std::move(mat));
  }
  const std::size_t n = mats.size();
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0f;
    for (std::size_t j = i + 1; j < n; ++j) {
      double v;
      try {
        v = similarity(metric, mats[i], mats[j]);
      } catch (const DegenerateError&) {
        throw DegenerateError("samples " + std::to_string(i) + " and " + std::to_string(j) + " are degenerate");
      }
      s(i, j) = s(j, i) = static_cast<float>(v);
    }
  }
  return s;
}

inline void write_matrix_csv(const Matrix& m, std::ostream& os) {
  char buf[32];
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(m(i, j)));
      if (j) os << ',';
      os << buf;
    }
    os << '\n';
  }
}

/// Min-max scaling to 0..255; a constant matrix maps to zeros.
inline std::vector<std::uint8_t> greyscale(const Matrix& m) {
  const auto [lo, hi] = std::minmax_element(m.data.begin(), m.data.end());
  const double min = *lo, range = static_cast<double>(*hi) - *lo;
  std::vector<std::uint8_t> px(m.data.size(), 0);
  if (range > 0.0)
    for (std::size_t i = 0; i < px.size(); ++i)
      px[i] = static_cast<std::uint8_t>(std::lround((m.data[i] - min) / range * 255.0));
  return px;
}

/// Binary (P5) greyscale image, one pixel per entry.
inline void write_pgm(const Matrix& m, std::ostream& os) {
  os << "P5\n" << m.cols << ' ' << m.rows << "\n255\n";
  const auto px = greyscale(m);
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

/// Tokens x neurons magnitude matrix of one traced layer.
inline Matrix heatmap_from_trace(const ActivationTrace& trace, std::size_t layer) {
  const auto recs = trace.layer(layer);
  if (recs.empty()) throw EmptyInputError("trace has no records for layer " + std::to_string(layer));
  Matrix h(recs.size(), recs.front()->magnitudes.size());
  for (std::size_t t = 0; t < recs.size(); ++t)
    std::copy(recs[t]->magnitudes.begin(), recs[t]->magnitudes.end(), h.row(t).begin());
  return h;
}

/// Writes `<path>` as CSV (rows = tokens, cols = neurons) and, when
/// `pgm_path` is non-empty, a greyscale PGM next to it.
inline void export_heatmap(const Matrix& m, const std::string& path, const std::string& pgm_path = {}) {
  if (m.data.empty()) throw EmptyInputError("heatmap data is empty");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_matrix_csv(m, os);
  if (!os) throw IoError("failed writing '" + path + "'");
  if (!pgm_path.empty()) {
    std::ofstream ps(pgm_path, std::ios::binary | std::ios::trunc);
    if (!ps) throw IoError("cannot open '" + pgm_path + "' for writing");
    write_pgm(m, ps);
  }
}

}  // namespace clada
