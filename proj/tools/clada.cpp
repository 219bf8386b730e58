// clada: command-line front end for model generation, threshold search,
// sparse generation, similarity experiments, regression and benchmarks.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "clada/clada.hpp"

namespace {

using namespace clada;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << data;
  if (!os) throw IoError("failed writing '" + path + "'");
}

/// Writes to `path`, or stdout when path is empty or "-".
void emit(const std::string& path, const std::string& data) {
  if (path.empty() || path == "-") {
    std::cout << data;
    std::cout.flush();
  } else {
    write_file(path, data);
  }
}

/// Fills options that were not given on the command line from a JSON
/// object. Keys are long option names without dashes; a nested object keyed
/// by the subcommand name is used instead when present.
void apply_config(CLI::App* sub, const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw UsageError("config '" + path + "' must be a JSON object");
  if (j.contains(sub->get_name()) && j[sub->get_name()].is_object()) j = j[sub->get_name()];
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt) throw UsageError("config '" + path + "': unknown option '" + key + "' for " + sub->get_name());
    if (key == "config" || opt->count() > 0) continue;
    auto as_string = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(as_string(v));
    } else {
      opt->add_result(as_string(value));
    }
    opt->run_callback();
  }
}

// Shared argument blocks ----------------------------------------------------

struct Common {
  std::uint64_t seed = 0;
  std::string config;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "RNG seed")->capture_default_str();
  sub->add_option("--config", c.config, "JSON file supplying values for options not given on the command line");
}

struct CorpusArgs {
  std::string path;
  std::size_t count = 64;
  std::size_t length = 256;
};

void add_corpus(CLI::App* sub, CorpusArgs& c) {
  sub->add_option("--corpus", c.path, "JSONL corpus; a synthetic corpus is generated when omitted");
  sub->add_option("--corpus-count", c.count, "sequences in the synthetic corpus")->capture_default_str();
  sub->add_option("--corpus-length", c.length, "tokens per synthetic sequence")->capture_default_str();
}

Corpus get_corpus(const CorpusArgs& c, std::uint64_t seed) {
  return c.path.empty() ? synthetic_corpus(seed, c.count, c.length) : load_corpus(c.path);
}

std::string corpus_id(const CorpusArgs& c, std::uint64_t seed) {
  if (!c.path.empty()) return c.path;
  return "synthetic:seed=" + std::to_string(seed) + ",count=" + std::to_string(c.count) +
         ",length=" + std::to_string(c.length);
}

struct ModelArgs {
  std::uint32_t layers = 4, dmodel = 256, dh = 1024, heads = 4, vocab = 258, ctx = 2048;
  std::string activation = "silu";
  InitConfig init;
};

void add_model_shape(CLI::App* sub, ModelArgs& m) {
  sub->add_option("--layers", m.layers, "decoder layers")->capture_default_str();
  sub->add_option("--dmodel", m.dmodel, "residual width")->capture_default_str();
  sub->add_option("--dh", m.dh, "MLP hidden width")->capture_default_str();
  sub->add_option("--heads", m.heads, "attention heads")->capture_default_str();
  sub->add_option("--vocab", m.vocab, "vocabulary size")->capture_default_str();
  sub->add_option("--ctx", m.ctx, "maximum context")->capture_default_str();
  sub->add_option("--activation", m.activation, "silu, relu or gelu")->capture_default_str();
  sub->add_option("--head-scale", m.init.head_scale)->capture_default_str();
  sub->add_option("--attn-out-scale", m.init.attn_out_scale)->capture_default_str();
  sub->add_option("--mlp-out-scale", m.init.mlp_out_scale)->capture_default_str();
  sub->add_option("--neuron-spread", m.init.neuron_spread)->capture_default_str();
}

ModelWeights make_model(const ModelArgs& a, std::uint64_t seed) {
  ModelDims d{a.layers, a.dmodel, a.dh, a.heads, a.vocab, a.ctx};
  return gen_random_model(seed, d, parse_activation(a.activation), a.init);
}

std::vector<RuntimeMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<RuntimeMode> modes;
  for (const auto& n : names) modes.push_back(RuntimeMode::parse(n));
  return modes;
}

/// Prompts: the first `count` corpus sequences clipped to `len` tokens.
std::vector<TokenSequence> corpus_prompts(const Corpus& c, std::size_t count, std::size_t len) {
  std::vector<TokenSequence> out;
  for (const auto& s : c.sequences) {
    if (out.size() == count) break;
    if (s.tokens.size() < len) continue;
    out.emplace_back(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(len));
  }
  if (out.size() < count)
    throw InsufficientDataError("corpus has " + std::to_string(out.size()) + " sequences of length >= " +
                                std::to_string(len) + ", need " + std::to_string(count));
  return out;
}

std::string csv_of(const std::function<void(std::ostream&)>& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cognitive-load-aware dynamic activation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;
  std::map<CLI::App*, std::function<void()>> runners;
  std::map<CLI::App*, std::vector<CLI::Option*>> required;
  auto subcommand = [&](const char* name, const char* desc) {
    CLI::App* s = app.add_subcommand(name, desc);
    add_common(s, common);
    return s;
  };
  // Checked after --config is applied, so required values may come from it.
  auto require = [&](CLI::App* sub, CLI::Option* opt) { required[sub].push_back(opt); };

  // gen-model
  ModelArgs gm;
  std::string gm_out;
  auto* gen_model = subcommand("gen-model", "Generate a seeded random model");
  add_model_shape(gen_model, gm);
  require(gen_model, gen_model->add_option("-o,--out", gm_out, "output weight file"));
  runners[gen_model] = [&] { save_model(make_model(gm, common.seed), gm_out); };

  // gen-corpus
  CorpusArgs gc;
  std::string gc_out;
  auto* gen_corpus = subcommand("gen-corpus", "Write a synthetic natural-language corpus as JSONL");
  gen_corpus->add_option("--count", gc.count)->capture_default_str();
  gen_corpus->add_option("--length", gc.length)->capture_default_str();
  require(gen_corpus, gen_corpus->add_option("-o,--out", gc_out));
  runners[gen_corpus] = [&] { save_corpus(synthetic_corpus(common.seed, gc.count, gc.length), gc_out); };

  // plant
  std::string pl_model, pl_out, pl_list;
  std::size_t pl_layer = 0;
  double pl_fraction = 0.5;
  auto* plant = subcommand("plant", "Zero the output columns of a random neuron subset");
  require(plant, plant->add_option("--model", pl_model));
  plant->add_option("--layer", pl_layer)->capture_default_str();
  plant->add_option("--fraction", pl_fraction)->capture_default_str();
  require(plant, plant->add_option("-o,--out", pl_out));
  plant->add_option("--planted-out", pl_list, "JSON file listing the planted neuron indices");
  runners[plant] = [&] {
    auto p = plant_dead_neurons(load_model(pl_model), pl_layer, pl_fraction, common.seed);
    save_model(p.model, pl_out);
    if (!pl_list.empty()) write_file(pl_list, json{{"layer", pl_layer}, {"neurons", p.planted}}.dump() + "\n");
  };

  // search
  std::string se_model, se_out, se_method = "bisection", se_agg = "mean_over_prefix", se_mags;
  CorpusArgs se_corpus;
  SearchConfig se_cfg;
  double se_sign = 1.0;
  auto* search = subcommand("search", "Search per-layer base thresholds under a CETT budget");
  require(search, search->add_option("--model", se_model));
  add_corpus(search, se_corpus);
  search->add_option("--budget", se_cfg.cett_budget)->capture_default_str();
  search->add_option("--method", se_method, "bisection or grid")->capture_default_str();
  search->add_option("--iters", se_cfg.bisection_iters)->capture_default_str();
  search->add_option("--grid", se_cfg.grid, "quantile cells for the grid method")->capture_default_str();
  search->add_option("--token-cap", se_cfg.token_cap)->capture_default_str();
  search->add_option("--aggregation", se_agg, "per_token, mean_over_prefix or max_over_prefix")->capture_default_str();
  search->add_option("--q-s", se_cfg.q_s)->capture_default_str();
  search->add_option("--q-h", se_cfg.q_H)->capture_default_str();
  auto* tau_s_opt = search->add_option("--tau-s", "explicit surprisal threshold");
  auto* tau_h_opt = search->add_option("--tau-h", "explicit entropy threshold");
  search->add_option("--lambda", se_cfg.lambda)->capture_default_str();
  search->add_option("--gamma", se_cfg.gamma)->capture_default_str();
  search->add_option("--modulation-sign", se_sign, "+1 raises thresholds under load, -1 lowers them")
      ->capture_default_str();
  search->add_option("--magnitudes-csv", se_mags, "also write the aggregated sample magnitudes");
  require(search, search->add_option("-o,--out", se_out, "policy JSON"));
  runners[search] = [&] {
    se_cfg.method = parse_search_method(se_method);
    se_cfg.aggregation = parse_aggregation(se_agg);
    if (tau_s_opt->count()) se_cfg.tau_s = tau_s_opt->as<double>();
    if (tau_h_opt->count()) se_cfg.tau_H = tau_h_opt->as<double>();
    if (se_sign != 1.0 && se_sign != -1.0) throw UsageError("--modulation-sign must be 1 or -1");
    se_cfg.corpus_id = corpus_id(se_corpus, common.seed);
    const auto m = load_model(se_model);
    const auto sample = collect_sample(m, get_corpus(se_corpus, common.seed), se_cfg.token_cap, se_cfg.aggregation);
    auto policy = search_all(m, sample, se_cfg);
    policy.modulation_sign = se_sign;
    save_policy(policy, se_out);
    if (!se_mags.empty()) write_file(se_mags, csv_of([&](std::ostream& os) { write_magnitudes_csv(sample.aggregate, os); }));
    for (std::size_t l = 0; l < policy.layers.size(); ++l)
      std::fprintf(stderr, "layer %zu: tau_base=%.6g cett=%.4f sparsity=%.4f\n", l, policy.layers[l].tau_base,
                   policy.layers[l].achieved_cett, policy.layers[l].achieved_sparsity);
  };

  // run
  std::string ru_model, ru_policy, ru_mode = "clada_full", ru_prompt_file, ru_prompt, ru_stats, ru_source = "prefill";
  std::size_t ru_max_new = 64;
  auto* run = subcommand("run", "Greedy generation under a runtime mode; generated text goes to stdout");
  require(run, run->add_option("--model", ru_model));
  run->add_option("--policy", ru_policy, "policy JSON (dense and top_p/top_k modes may omit it)");
  run->add_option("--mode", ru_mode, "dense, clada_full, clada_no_semantic, clada_no_statistical, top_p:P, top_k:F")
      ->capture_default_str();
  auto* pf = run->add_option("--prompt-file", ru_prompt_file);
  run->add_option("--prompt", ru_prompt)->excludes(pf);
  run->add_option("--max-new", ru_max_new)->capture_default_str();
  run->add_option("--source", ru_source, "prefill or lagged magnitudes")->capture_default_str();
  run->add_option("--stats", ru_stats, "write generation statistics as JSON");
  runners[run] = [&] {
    const auto m = load_model(ru_model);
    const auto mode = RuntimeMode::parse(ru_mode);
    ThresholdPolicy policy = ru_policy.empty() ? ThresholdPolicy::uniform(m.dims.n_layers, 0.0) : load_policy(ru_policy);
    if (ru_policy.empty() && (mode.kind == ModeKind::clada_full || mode.kind == ModeKind::clada_no_semantic ||
                              mode.kind == ModeKind::clada_no_statistical))
      throw UsageError("--policy is required for mode " + mode.name());
    const std::string text = ru_prompt_file.empty() ? ru_prompt : read_file(ru_prompt_file);
    GenerationOptions opts;
    if (ru_source == "lagged")
      opts.source = MagnitudeSource::lagged;
    else if (ru_source != "prefill")
      throw UsageError("--source must be prefill or lagged");
    const auto r = generate(m, ByteTokenizer(m.dims.vocab_size).tokenize(text), policy, mode, ru_max_new, opts);
    std::cout << ByteTokenizer(m.dims.vocab_size).detokenize(r.tokens);
    std::cout.flush();
    if (!ru_stats.empty()) {
      const auto& s = r.stats;
      json j = {{"mode", mode.name()},       {"tokens", r.tokens},
                {"tokens_generated", s.tokens_generated}, {"layer_sparsity", s.layer_sparsity},
                {"mean_sparsity", s.mean_sparsity},       {"wall_time_s", s.wall_time_s},
                {"prefill_time_s", s.prefill_time_s},     {"fires_s", s.fires_s},
                {"fires_H", s.fires_H},                   {"mlp_multiplies", s.mlp_multiplies},
                {"dense_mlp_multiplies", s.dense_mlp_multiplies}, {"decode", s.decode}};
      write_file(ru_stats, j.dump(2) + "\n");
    }
  };

  // ablate
  std::string ab_model, ab_policy, ab_out;
  CorpusArgs ab_corpus;
  std::size_t ab_prompts = 10, ab_prompt_len = 128, ab_max_new = 64;
  std::vector<std::string> ab_modes = {"dense", "clada_full", "clada_no_semantic", "clada_no_statistical", "top_p:0.5"};
  auto* ablate = subcommand("ablate", "Teacher-forced next-token agreement of each mode against dense");
  require(ablate, ablate->add_option("--model", ab_model));
  require(ablate, ablate->add_option("--policy", ab_policy));
  add_corpus(ablate, ab_corpus);
  ablate->add_option("--prompts", ab_prompts)->capture_default_str();
  ablate->add_option("--prompt-len", ab_prompt_len)->capture_default_str();
  ablate->add_option("--max-new", ab_max_new)->capture_default_str();
  ablate->add_option("--modes", ab_modes)->capture_default_str();
  ablate->add_option("-o,--out", ab_out, "CSV path (stdout by default)");
  runners[ablate] = [&] {
    const auto m = load_model(ab_model);
    const auto prompts = corpus_prompts(get_corpus(ab_corpus, common.seed), ab_prompts, ab_prompt_len);
    const auto rows = ablation_run(m, prompts, load_policy(ab_policy), parse_modes(ab_modes), ab_max_new);
    emit(ab_out, csv_of([&](std::ostream& os) { write_ablation_csv(rows, os); }));
  };

  // cogload
  std::string cg_model, cg_out, cg_text;
  CorpusArgs cg_corpus;
  std::size_t cg_limit = 16;
  double cg_qs = 0.75, cg_qh = 0.75;
  auto* cogload = subcommand("cogload", "Per-token surprisal and entropy");
  require(cogload, cogload->add_option("--model", cg_model));
  auto* cg_text_opt = cogload->add_option("--text-file", cg_text, "score one text file instead of a corpus");
  add_corpus(cogload, cg_corpus);
  cogload->add_option("--limit", cg_limit, "corpus sequences to score")->capture_default_str();
  cogload->add_option("--q-s", cg_qs)->capture_default_str();
  cogload->add_option("--q-h", cg_qh)->capture_default_str();
  cogload->add_option("-o,--out", cg_out, "CSV path (stdout by default)");
  runners[cogload] = [&] {
    const auto m = load_model(cg_model);
    std::vector<std::pair<std::string, CognitiveSignal>> sigs;
    if (cg_text_opt->count()) {
      sigs.emplace_back(cg_text, signal_for_sequence(m, ByteTokenizer(m.dims.vocab_size).tokenize(read_file(cg_text))));
    } else {
      const auto c = get_corpus(cg_corpus, common.seed);
      for (std::size_t i = 0; i < c.size() && i < cg_limit; ++i) {
        TokenSequence t = c.sequences[i].tokens;
        if (t.size() > m.dims.max_ctx) t.resize(m.dims.max_ctx);
        sigs.emplace_back(c.sequences[i].id, signal_for_sequence(m, t));
      }
    }
    emit(cg_out, csv_of([&](std::ostream& os) { write_signal_csv(sigs, os); }));
    std::vector<CognitiveSignal> only;
    for (auto& [id, s] : sigs) only.push_back(s);
    std::size_t n = 0;
    for (const auto& s : only) n += s.size();
    if (n >= 10) {
      const auto th = calibrate_thresholds(only, cg_qs, cg_qh);
      std::fprintf(stderr, "calibrated tau_s=%.6f tau_H=%.6f\n", th.tau_s, th.tau_H);
    }
  };

  // hybrid
  std::string hy_a, hy_b, hy_out;
  double hy_alpha = 0.25;
  auto* hybrid = subcommand("hybrid", "Replace the first ceil(L*alpha) bytes of A with those of B");
  require(hybrid, hybrid->add_option("--a", hy_a, "text file A"));
  require(hybrid, hybrid->add_option("--b", hy_b, "text file B (same length as A)"));
  hybrid->add_option("--alpha", hy_alpha)->capture_default_str();
  hybrid->add_option("-o,--out", hy_out, "output file (stdout by default)");
  runners[hybrid] = [&] {
    const auto a = tokenize(read_file(hy_a));
    const auto b = tokenize(read_file(hy_b));
    emit(hy_out, detokenize(make_hybrid(a, b, hy_alpha)));
  };

  // flock
  std::string fl_model, fl_out;
  CorpusArgs fl_corpus;
  FlockingConfig fl_cfg;
  std::vector<std::string> fl_groups = {"NLS", "RTS"};
  auto* fl_layer = static_cast<CLI::Option*>(nullptr);
  auto* fl_probe = static_cast<CLI::Option*>(nullptr);
  auto* flock = subcommand("flock", "Hybrid-prefix similarity experiment; writes the panel CSV");
  require(flock, flock->add_option("--model", fl_model));
  add_corpus(flock, fl_corpus);
  flock->add_option("--pairs", fl_cfg.n_pairs)->capture_default_str();
  flock->add_option("--seq-len", fl_cfg.seq_len)->capture_default_str();
  flock->add_option("--alphas", fl_cfg.alphas)->capture_default_str();
  flock->add_option("--groups", fl_groups)->capture_default_str();
  fl_layer = flock->add_option("--layer", "layer to probe (default n_layers/2)");
  fl_probe = flock->add_option("--probe-position", "token index to probe (default seq-len)");
  flock->add_option("-o,--out", fl_out, "panel CSV (stdout by default)");
  runners[flock] = [&] {
    const auto m = load_model(fl_model);
    fl_cfg.seed = common.seed;
    fl_cfg.groups = fl_groups;
    if (fl_layer->count()) fl_cfg.layer = fl_layer->as<std::size_t>();
    if (fl_probe->count()) fl_cfg.probe_position = fl_probe->as<std::size_t>();
    if (fl_corpus.path.empty()) fl_corpus.length = std::max(fl_corpus.length, fl_cfg.seq_len);
    if (fl_corpus.path.empty()) fl_corpus.count = std::max(fl_corpus.count, 2 * fl_cfg.n_pairs);
    const auto rows = run_flocking_experiment(m, get_corpus(fl_corpus, common.seed), fl_cfg);
    emit(fl_out, csv_of([&](std::ostream& os) { write_panel_csv(rows, os); }));
  };

  // sim
  std::string si_model, si_out, si_pgm, si_metric = "cka", si_heat_text, si_heat_out;
  std::vector<std::string> si_inputs;
  std::size_t si_layer = 0;
  auto* si_layer_opt = static_cast<CLI::Option*>(nullptr);
  auto* si_pos_opt = static_cast<CLI::Option*>(nullptr);
  auto* sim = subcommand("sim", "Pairwise activation similarity of text samples, or a magnitude heatmap");
  require(sim, sim->add_option("--model", si_model));
  sim->add_option("--inputs", si_inputs, "text files, one sample each");
  si_layer_opt = sim->add_option("--layer", si_layer, "layer (default n_layers/2)");
  si_pos_opt = sim->add_option("--position", "probe position (default: each sample's length)");
  sim->add_option("--metric", si_metric, "cka or cos")->capture_default_str();
  sim->add_option("-o,--out", si_out, "similarity matrix CSV (stdout by default)");
  sim->add_option("--pgm", si_pgm, "also write the matrix as a greyscale PGM");
  sim->add_option("--heatmap-text", si_heat_text, "text file whose tokens x neurons magnitudes are exported");
  sim->add_option("--heatmap-out", si_heat_out, "CSV path for --heatmap-text (a .pgm is written next to it)");
  runners[sim] = [&] {
    const auto m = load_model(si_model);
    const std::size_t layer = si_layer_opt->count() ? si_layer : m.dims.n_layers / 2;
    if (!si_heat_text.empty()) {
      if (si_heat_out.empty()) throw UsageError("--heatmap-text needs --heatmap-out");
      TraceConfig cfg;
      cfg.layers = std::vector<std::size_t>{layer};
      const auto res = forward(m, ByteTokenizer(m.dims.vocab_size).tokenize(read_file(si_heat_text)), cfg);
      export_heatmap(heatmap_from_trace(res.trace, layer), si_heat_out, si_heat_out + ".pgm");
    }
    if (si_inputs.empty()) {
      if (si_heat_text.empty()) throw UsageError("sim needs --inputs or --heatmap-text");
      return;
    }
    std::vector<TokenSequence> samples;
    for (const auto& p : si_inputs) samples.push_back(ByteTokenizer(m.dims.vocab_size).tokenize(read_file(p)));
    std::optional<std::size_t> pos;
    if (si_pos_opt->count()) pos = si_pos_opt->as<std::size_t>();
    const auto s = pairwise_similarity(m, samples, layer, pos, parse_metric(si_metric));
    emit(si_out, csv_of([&](std::ostream& os) { write_matrix_csv(s, os); }));
    if (!si_pgm.empty()) {
      std::ofstream ps(si_pgm, std::ios::binary | std::ios::trunc);
      if (!ps) throw IoError("cannot open '" + si_pgm + "' for writing");
      write_pgm(s, ps);
    }
  };

  // regress
  std::string re_panel, re_metric = "cka", re_group, re_out, re_csv, re_json;
  std::vector<std::string> re_fits = {"prefix_len,token_len", "prefix_len,surprisal_mean_norm,entropy_mean_norm,token_len"};
  bool re_cluster = false;
  auto* regress = subcommand("regress", "Fixed-effects regressions on a flocking panel CSV");
  require(regress, regress->add_option("--panel", re_panel));
  regress->add_option("--metric", re_metric, "cka or cos rows")->capture_default_str();
  regress->add_option("--group", re_group, "NLS or RTS (default: both)");
  regress->add_option("--fits", re_fits, "comma-separated covariates, one entry per table column")->capture_default_str();
  regress->add_flag("--cluster", re_cluster, "cluster-robust standard errors by individual");
  regress->add_option("-o,--out", re_out, "text table (stdout by default)");
  regress->add_option("--csv", re_csv, "table as CSV");
  regress->add_option("--json", re_json, "fit results as JSON");
  runners[regress] = [&] {
    std::ifstream is(re_panel);
    if (!is) throw IoError("cannot open '" + re_panel + "'");
    const auto obs = panel_from_rows(read_panel_csv(is), re_metric, re_group);
    if (obs.empty()) throw InsufficientDataError("no panel rows match the metric/group filter");
    std::vector<FitResult> fits;
    for (const auto& spec : re_fits) {
      FitOptions opt;
      opt.cluster_by_individual = re_cluster;
      std::stringstream ss(spec);
      std::string name;
      while (std::getline(ss, name, ',')) opt.covariates.push_back(name);
      fits.push_back(fit_fe(obs, opt));
      for (const auto& d : fits.back().dropped)
        std::fprintf(stderr, "fit %zu: dropped %s (%s)\n", fits.size(), d.name.c_str(), d.reason.c_str());
    }
    emit(re_out, report_table(fits));
    if (!re_csv.empty()) write_file(re_csv, report_csv(fits));
    if (!re_json.empty()) {
      json j = json::array();
      for (const auto& f : fits) j.push_back(to_json(f));
      write_file(re_json, j.dump(2) + "\n");
    }
  };

  // bench
  std::string be_model, be_policy, be_out, be_format = "csv";
  ModelArgs be_shape;
  std::vector<std::string> be_grid;
  std::vector<std::string> be_modes = {"clada_full"};
  BenchOptions be_opt;
  double be_budget = 0.2;
  std::size_t be_token_cap = 512;
  auto* bench = subcommand("bench", "Generation latency over a prompt/gen/batch grid");
  bench->add_option("--model", be_model, "weight file (a seeded random model when omitted)");
  add_model_shape(bench, be_shape);
  bench->add_option("--policy", be_policy, "policy JSON (searched on a synthetic corpus when omitted)");
  bench->add_option("--budget", be_budget, "CETT budget for the implicit search")->capture_default_str();
  bench->add_option("--token-cap", be_token_cap, "tokens for the implicit search")->capture_default_str();
  bench->add_option("--grid", be_grid, "items like prompt=256,512 gen=256 batch=1,4");
  bench->add_option("--modes", be_modes)->capture_default_str();
  bench->add_option("--repeats", be_opt.repeats)->capture_default_str();
  bench->add_option("--warmup", be_opt.warmup)->capture_default_str();
  bench->add_option("--format", be_format, "csv or json")->capture_default_str();
  bench->add_option("-o,--out", be_out, "report path (stdout by default)");
  runners[bench] = [&] {
    const auto fmt = parse_report_format(be_format);
    const auto modes = parse_modes(be_modes);
    const auto grid = parse_grid(be_grid);
    bench_threads();
    const auto m = be_model.empty() ? make_model(be_shape, common.seed) : load_model(be_model);
    ThresholdPolicy policy;
    if (!be_policy.empty()) {
      policy = load_policy(be_policy);
    } else {
      SearchConfig cfg;
      cfg.cett_budget = be_budget;
      cfg.token_cap = be_token_cap;
      cfg.corpus_id = "synthetic:seed=" + std::to_string(common.seed);
      policy = search_all(m, synthetic_corpus(common.seed, 8, 256), cfg);
    }
    be_opt.seed = common.seed;
    const auto rows = bench_grid(m, policy, modes, grid, be_opt);
    emit(be_out, csv_of([&](std::ostream& os) { write_report(rows, fmt, os); }));
  };

  try {
    app.parse(argc, argv);
    CLI::App* sub = app.get_subcommands().front();
    if (!common.config.empty()) apply_config(sub, common.config);
    for (auto* opt : required[sub])
      if (opt->count() == 0) throw UsageError(opt->get_name() + " is required");
    runners.at(sub)();
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
