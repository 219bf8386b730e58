// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).
//
// Seeds below are fixed and were not used while choosing the random-model
// initialization defaults.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "clada/clada.hpp"
#include "oracles.hpp"
#include "panel_gen.hpp"

using namespace clada;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* spec, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, spec, args...);
  return buf;
}

ModelDims dims(std::uint32_t layers, std::uint32_t dm, std::uint32_t dh, std::uint32_t heads = 4,
               std::uint32_t ctx = 2048) {
  ModelDims d;
  d.n_layers = layers;
  d.d_model = dm;
  d.d_h = dh;
  d.n_heads = heads;
  d.vocab_size = 258;
  d.max_ctx = ctx;
  return d;
}

TokenSequence random_tokens(Rng& rng, std::size_t n) {
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(256));
  return t;
}

// 1. Sum of contributions equals the MLP output (1e-5 relative norm) and
// A_j equals ||n_j|| (1e-6, relative to max(1, ||n_j||)) on 100 random
// (model, input) pairs, in under 10 s.
Outcome reconstruction() {
  const auto t0 = clock_type::now();
  Rng rng(1001);
  double worst_sum = 0.0, worst_mag = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::uint32_t dm = 8u << rng.below(3), dh = 16u << rng.below(4);
    const auto m = gen_random_model(5000 + i, dims(1 + rng.below(3), dm, dh, 2, 64),
                                    static_cast<Activation>(rng.below(3)));
    const auto toks = random_tokens(rng, 1 + rng.below(16));
    TraceConfig cfg;
    cfg.retain_contributions = true;
    cfg.positions = std::vector<std::size_t>{toks.size() - 1};
    const auto res = forward(m, toks, cfg);
    for (const auto& r : res.trace.records) {
      std::vector<double> sum(dm, 0.0);
      for (std::size_t j = 0; j < dh; ++j) {
        double nn = 0.0;
        for (std::size_t k = 0; k < dm; ++k) {
          const double c = r.contributions(j, k);
          sum[k] += c;
          nn += c * c;
        }
        nn = std::sqrt(nn);
        worst_mag = std::max(worst_mag, std::fabs(r.magnitudes[j] - nn) / std::max(1.0, nn));
      }
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < dm; ++k) {
        num += (sum[k] - r.mlp_output[k]) * (sum[k] - r.mlp_output[k]);
        den += static_cast<double>(r.mlp_output[k]) * r.mlp_output[k];
      }
      worst_sum = std::max(worst_sum, std::sqrt(num) / std::max(std::sqrt(den), 1e-30));
    }
  }
  const double t = seconds_since(t0);
  return {worst_sum <= 1e-5 && worst_mag <= 1e-6 && t < 10.0,
          fmt("max rel sum err %.2e, max |A-||n||| %.2e, %.2fs", worst_sum, worst_mag, t)};
}

// 2. tau_base = 0 everywhere: generate() matches plain greedy decoding over
// forward() for 64 tokens on 10 random prompts.
Outcome dense_equivalence() {
  const auto m = gen_random_model(2002, dims(4, 64, 256));
  auto pol = ThresholdPolicy::uniform(4, 0.0);
  Rng rng(2003);
  int identical = 0;
  for (int i = 0; i < 10; ++i) {
    const auto prompt = random_tokens(rng, 8 + rng.below(40));
    identical += generate(m, prompt, pol, RuntimeMode::clada_full(), 64).tokens == greedy_reference(m, prompt, 64);
  }
  return {identical == 10, fmt("%d/10 prompts token-identical", identical)};
}

// 3. CETT(0) = 0, CETT(inf) = 1 +- 1e-6, non-decreasing over a 10-point grid,
// on 50 random tokens.
Outcome cett_endpoints() {
  const auto m = gen_random_model(3003, dims(2, 64, 256));
  TraceConfig cfg;
  cfg.retain_inputs = true;
  Rng rng(3004);
  const auto res = forward(m, random_tokens(rng, 25), cfg);
  int ok = 0;
  double worst_top = 0.0;
  for (const auto& r : res.trace.records) {  // 25 tokens x 2 layers
    const double amax = *std::max_element(r.magnitudes.begin(), r.magnitudes.end());
    const double c0 = cett(m, r.layer, r.mlp_input, 0.0).cett;
    const double cinf = cett(m, r.layer, r.mlp_input, std::numeric_limits<double>::infinity()).cett;
    bool mono = true;
    double prev = c0;
    for (int k = 1; k <= 10; ++k) {
      const double c = cett(m, r.layer, r.mlp_input, amax * k / 9.0).cett;
      mono = mono && c >= prev;
      prev = c;
    }
    worst_top = std::max(worst_top, std::fabs(cinf - 1.0));
    ok += c0 == 0.0 && std::fabs(cinf - 1.0) <= 1e-6 && mono;
  }
  return {ok == 50, fmt("%d/50 tokens pass, max |CETT(inf)-1| %.2e", ok, worst_top)};
}

// 4. Searched tau is feasible (<= 0.2 + 1e-3) and maximal (one bisection
// step higher exceeds 0.2); 50% planted dead neurons at budget 0.01 give
// sparsity >= 0.5 with every planted neuron cut; sparsity at 0.2 is > 0.
Outcome threshold_search() {
  const auto m = gen_random_model(4004, dims(4, 256, 1024));
  const auto corpus = synthetic_corpus(4005, 16, 256);
  SearchConfig cfg;
  cfg.token_cap = 2048;
  const auto sample = collect_sample(m, corpus, cfg.token_cap);
  bool feasible = true, maximal = true;
  double min_sp = 1.0, worst_cett = 0.0;
  for (std::size_t l = 0; l < m.dims.n_layers; ++l) {
    const CettEvaluator ev(m, l, sample.inputs[l]);
    const auto r = search_layer(ev, &sample.aggregate[l], cfg);
    worst_cett = std::max(worst_cett, ev.mean(r.tau_base));
    feasible = feasible && ev.mean(r.tau_base) <= 0.2 + 1e-3;
    maximal = maximal && (r.resolution > 0.0 ? ev.mean(r.tau_base + r.resolution) > 0.2 : true);
    min_sp = std::min(min_sp, r.achieved_sparsity);
  }

  const auto planted = plant_dead_neurons(m, 1, 0.5, 4006);
  const auto ps = collect_sample(planted.model, corpus, cfg.token_cap);
  SearchConfig tight = cfg;
  tight.cett_budget = 0.01;
  const CettEvaluator pev(planted.model, 1, ps.inputs[1]);
  const auto pr = search_layer(pev, &ps.aggregate[1], tight);
  const auto mask = build_mask(ps.aggregate[1], pr.tau_base);
  bool all_cut = true;
  for (auto j : planted.planted) all_cut = all_cut && !mask[j];

  return {feasible && maximal && pr.achieved_sparsity >= 0.5 && all_cut && min_sp > 0.0,
          fmt("max E[CETT] %.4f, maximal %s; planted sparsity %.3f, planted cut %s; sparsity at 0.2 >= %.3f",
              worst_cett, maximal ? "yes" : "no", pr.achieved_sparsity, all_cut ? "all" : "NOT all", min_sp)};
}

// 5. Surprisal and entropy against a brute-force reference (1e-6) on 1000
// random rows; uniform entropy ln 256; shift invariance.
Outcome cognitive_metrics() {
  Rng rng(5005);
  double worst = 0.0, worst_shift = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<float> z(258);
    const double scale = 0.1 + 10.0 * rng.uniform();
    // Dyadic grid keeps z + shift exact in float for the invariance check.
    for (auto& v : z) v = std::ldexp(std::round(std::ldexp(static_cast<float>(scale * rng.normal()), 12)), -12);
    const auto lp = oracle::log_softmax(z);
    const std::size_t tgt = rng.below(z.size());
    worst = std::max(worst, std::fabs(surprisal(z, tgt) + static_cast<double>(lp[tgt])));
    worst = std::max(worst, std::fabs(entropy(z) - oracle::entropy(z)));
    const double h = entropy(z);
    const auto shift = static_cast<float>(std::round(50.0 * rng.normal()));
    for (auto& v : z) v += shift;
    worst_shift = std::max(worst_shift, std::fabs(entropy(z) - h));
  }
  const double uni = std::fabs(entropy(std::vector<float>(256, 1.5f)) - std::log(256.0));
  return {worst <= 1e-6 && uni <= 1e-6 && worst_shift <= 1e-6,
          fmt("max ref err %.2e, uniform err %.2e, shift err %.2e", worst, uni, worst_shift)};
}

// 6. tau_final / tau_base is exactly 1.00, 1.80, 1.12, 1.92.
Outcome modulation_arithmetic() {
  auto p = ThresholdPolicy::uniform(1, 1.0);
  p.tau_s = p.tau_H = 0.5;
  const double r00 = final_threshold(p, 0, 0.1, 0.1), r10 = final_threshold(p, 0, 0.9, 0.1),
               r01 = final_threshold(p, 0, 0.1, 0.9), r11 = final_threshold(p, 0, 0.9, 0.9);
  return {r00 == 1.00 && r10 == 1.80 && r01 == 1.12 && r11 == 1.92,
          fmt("ratios %.17g %.17g %.17g %.17g", r00, r10, r01, r11)};
}

// 7. cka(X,X) = 1, scale invariance, symmetry, range on 1000 random pairs;
// 2x2 hand cases exact.
Outcome similarity_kernels() {
  Rng rng(7007);
  int ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t r = 1 + rng.below(16), c = 1 + rng.below(16);
    Matrix x(r, c), y(r, c);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    for (auto& v : y.data) v = static_cast<float>(rng.normal());
    Matrix cy = y;
    const auto k = static_cast<float>(0.01 + 100 * rng.uniform()) * (rng.below(2) ? 1.0f : -1.0f);
    for (auto& v : cy.data) v *= k;
    const double s = cka(x, y);
    ok += std::fabs(cka(x, x) - 1.0) <= 1e-6 && std::fabs(cka(x, cy) - s) <= 1e-6 && std::fabs(cka(y, x) - s) <= 1e-12 &&
          s >= 0.0 && s <= 1.0;
  }
  Matrix a(2, 2), b(2, 2), i2(2, 2), o(2, 2);
  a(0, 0) = 1;
  b(1, 1) = 1;
  i2(0, 0) = i2(1, 1) = 1;
  o(0, 0) = o(0, 1) = 1;
  const bool hand = cka(a, b) == 0.0 && cka(a, a) == 1.0 && cka(i2, o) == 2.0 / (std::sqrt(2.0) * 2.0);
  return {ok == 1000 && hand, fmt("%d/1000 random pairs, hand cases %s", ok, hand ? "exact" : "WRONG")};
}

// 8. Group-mean delta_sim rises with alpha (Spearman rho > 0) for NLS and
// RTS under both metrics; >= 50 pairs, the six default alphas, < 5 min.
Outcome flocking() {
  const auto t0 = clock_type::now();
  InitConfig init;
  init.attn_out_scale = 2.0f;
  const auto m = gen_random_model(8008, dims(4, 128, 512), Activation::silu, init);
  FlockingConfig cfg;
  cfg.n_pairs = 50;
  cfg.seq_len = 256;
  cfg.seed = 8009;
  const auto rows = run_flocking_experiment(m, synthetic_corpus(8010, 100, 256), cfg);
  std::string detail;
  bool pass = true;
  for (const char* g : {"NLS", "RTS"})
    for (const char* metric : {"cka", "cos"}) {
      std::vector<double> alphas, means;
      for (double a : cfg.alphas) {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& r : rows)
          if (r.group == g && r.metric == metric && r.alpha == a) {
            s += r.delta_sim;
            ++n;
          }
        alphas.push_back(a);
        means.push_back(s / static_cast<double>(n));
      }
      const double rho = oracle::spearman(alphas, means);
      pass = pass && rho > 0.0;
      detail += fmt("%s/%s rho %.2f; ", g, metric, rho);
    }
  const double t = seconds_since(t0);
  return {pass && t < 300.0, detail + fmt("%.0fs", t)};
}

// 9. Within estimator equals dummy-variable OLS (1e-8) for <= 50
// individuals; planted 12000-row panel recovers every coefficient within 5%
// with |t| > 5; the constant covariate is dropped with a reason.
Outcome regression() {
  double worst = 0.0;
  for (std::uint64_t seed : {9001u, 9002u, 9003u}) {
    panelgen::Spec s;
    s.individuals = 10 + 20 * (seed - 9001);
    s.seed = seed;
    s.constant_token_len = false;
    const auto panel = panelgen::make(s);
    const auto fit = fit_fe(panel);
    std::vector<std::string> names;
    for (const auto& c : fit.coefficients) names.push_back(c.name);
    const auto ref = oracle::dummy_ols(panel, names);
    for (std::size_t k = 0; k < names.size(); ++k)
      worst = std::max(worst, std::fabs(fit.coefficients[k].estimate - ref.beta[k]) /
                                  std::max(1.0, std::fabs(ref.beta[k])));
  }

  panelgen::Spec s;  // 2000 individuals x 6 alphas, seed 42
  const auto panel = panelgen::make(s);
  const auto fit = fit_fe(panel);
  bool recovered = panel.size() == 12000;
  std::string detail = fmt("dummy-OLS max diff %.2e; ", worst);
  for (auto [name, truth] : {std::pair{"prefix_len", 4.12}, {"surprisal", -0.80}, {"entropy", -0.12}}) {
    const auto& c = fit.at(name);
    const double rel = std::fabs(c.estimate / truth - 1.0);
    recovered = recovered && rel <= 0.05 && std::fabs(c.t_stat) > 5.0;
    detail += fmt("%s %.4f (%+.1f%%, t %.1f); ", name, c.estimate, 100 * (c.estimate / truth - 1.0), c.t_stat);
  }
  const bool dropped =
      fit.dropped.size() == 1 && fit.dropped[0].name == "token_len" && fit.dropped[0].reason == "zero within-variance";
  detail += fmt("adj R2 %.3f; token_len %s", fit.adj_r2, dropped ? "dropped (zero within-variance)" : "NOT dropped");
  return {worst <= 1e-8 && recovered && dropped, detail};
}

// 10. Desk defaults (d_model 512, d_h 4096, 1024 generated tokens, batch 1):
// clada_full at >= 50% sparsity runs > 1.10x faster than dense with CV < 5%
// over 5 repeats; batch 1 -> 16 total time grows by < 16x.
Outcome latency() {
  const auto m = gen_random_model(10010, dims(4, 512, 4096));
  SearchConfig cfg;
  cfg.token_cap = 1024;
  const auto policy = search_all(m, synthetic_corpus(10011, 8, 256), cfg);
  BenchOptions opt;
  opt.repeats = 5;
  opt.warmup = 1;
  opt.seed = 10012;
  const auto rows = bench_latency(m, policy, {RuntimeMode::dense(), RuntimeMode::clada_full()}, 1024, 1024, 1, opt);
  const auto& dense = rows[0];
  const auto& sparse = rows[1];
  const bool speed = sparse.mean_sparsity >= 0.5 && sparse.speedup_vs_dense > 1.10 && sparse.wall_time_cv < 0.05 &&
                     dense.wall_time_cv < 0.05;

  BenchOptions bopt = opt;
  bopt.repeats = 3;
  const auto b1 = bench_latency(m, policy, {RuntimeMode::clada_full()}, 128, 128, 1, bopt);
  const auto b16 = bench_latency(m, policy, {RuntimeMode::clada_full()}, 128, 128, 16, bopt);
  const double growth = b16[0].wall_time_s / b1[0].wall_time_s;
  return {speed && growth < 16.0,
          fmt("sparsity %.3f, speedup %.3f, cv dense %.3f clada %.3f; batch 1->16 time x%.2f", sparse.mean_sparsity,
              sparse.speedup_vs_dense, dense.wall_time_cv, sparse.wall_time_cv, growth)};
}

// 11. Next-token agreement vs dense: clada_full >= clada_no_semantic >=
// top_p(0.5). The load modulation lowers thresholds (sign -1); the verbatim
// sign is reported alongside for reference.
Outcome ablation() {
  const auto m = gen_random_model(11011, dims(4, 256, 1024));
  SearchConfig cfg;
  const auto base = search_all(m, synthetic_corpus(11012, 16, 256), cfg);
  std::vector<TokenSequence> prompts;
  for (auto& s : synthetic_corpus(11013, 20, 128).sequences) prompts.push_back(s.tokens);
  const std::vector<RuntimeMode> modes = {RuntimeMode::clada_full(), RuntimeMode::clada_no_semantic(),
                                          RuntimeMode::top_p(0.5)};
  auto lowered = base;
  lowered.modulation_sign = -1.0;
  const auto rows = ablation_run(m, prompts, lowered, modes, 64);
  const auto verbatim = ablation_run(m, prompts, base, {RuntimeMode::clada_full()}, 64);
  const bool ordered = rows[0].agreement_rate >= rows[1].agreement_rate && rows[1].agreement_rate >= rows[2].agreement_rate;
  return {ordered,
          fmt("full %.4f (sparsity %.3f) >= no_semantic %.4f (%.3f) >= top_p:0.5 %.4f (%.3f); "
              "full with raising modulation %.4f (%.3f)",
              rows[0].agreement_rate, rows[0].mean_sparsity, rows[1].agreement_rate, rows[1].mean_sparsity,
              rows[2].agreement_rate, rows[2].mean_sparsity, verbatim[0].agreement_rate, verbatim[0].mean_sparsity)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"reconstruction identity", reconstruction},
      {"dense equivalence", dense_equivalence},
      {"CETT endpoints and monotonicity", cett_endpoints},
      {"threshold search correctness", threshold_search},
      {"cognitive metrics", cognitive_metrics},
      {"threshold modulation arithmetic", modulation_arithmetic},
      {"similarity kernels", similarity_kernels},
      {"flocking direction", flocking},
      {"regression engine", regression},
      {"latency", latency},
      {"ablation ordering", ablation},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed;
}
