#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace clada;
using testutil::small_dims;
using testutil::small_model;

namespace {

std::string serialize(const ModelWeights& m) {
  std::ostringstream os;
  write_model(m, os);
  return os.str();
}

}  // namespace

TEST(GenRandomModel, SameSeedIsBitIdentical) {
  const auto a = gen_random_model(7, small_dims());
  const auto b = gen_random_model(7, small_dims());
  EXPECT_EQ(serialize(a), serialize(b));
}

TEST(GenRandomModel, ZeroDModelIsDimensionError) {
  auto d = small_dims();
  d.d_model = 0;
  EXPECT_THROW(gen_random_model(7, d), DimensionError);
  d = small_dims();
  d.d_model = 15;  // not divisible by n_heads
  EXPECT_THROW(gen_random_model(7, d), DimensionError);
}

TEST(GenRandomModel, OverflowingDimsRejected) {
  auto d = small_dims();
  d.d_model = 1u << 16;
  d.d_h = 1u << 16;
  EXPECT_THROW(d.validate(), DimensionError);
}

TEST(GenRandomModel, DifferentSeedsDiffer) {
  EXPECT_NE(serialize(gen_random_model(7, small_dims())), serialize(gen_random_model(8, small_dims())));
}

TEST(GenRandomModel, WeightsAreFinite) { EXPECT_TRUE(small_model(3).finite()); }

TEST(PlantDeadNeurons, FractionZeroLeavesModelUnchanged) {
  const auto m = small_model();
  const auto p = plant_dead_neurons(m, 1, 0.0, 5);
  EXPECT_TRUE(p.planted.empty());
  EXPECT_EQ(p.model, m);
}

TEST(PlantDeadNeurons, FractionOneZeroesLayerOutput) {
  const auto m = small_model();
  const auto p = plant_dead_neurons(m, 0, 1.0, 5);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> x(m.dims.d_model);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    for (float v : mlp_forward(p.model, 0, x)) EXPECT_EQ(v, 0.0f);
  }
}

TEST(PlantDeadNeurons, HalfOf64GivesExactly32ZeroColumns) {
  const auto m = small_model(1, 2, 16, 64);
  const auto p = plant_dead_neurons(m, 1, 0.5, 9);
  std::size_t zero_cols = 0;
  for (std::size_t j = 0; j < 64; ++j) {
    const auto col = p.model.layers[1].w_out_cols.row(j);
    zero_cols += std::all_of(col.begin(), col.end(), [](float v) { return v == 0.0f; });
  }
  EXPECT_EQ(zero_cols, 32u);
  EXPECT_EQ(p.planted.size(), 32u);
  EXPECT_TRUE(std::is_sorted(p.planted.begin(), p.planted.end()));
  // Other layers untouched.
  EXPECT_EQ(p.model.layers[0], m.layers[0]);
}

TEST(PlantDeadNeurons, RejectsBadArguments) {
  const auto m = small_model();
  EXPECT_THROW(plant_dead_neurons(m, 2, 0.5, 1), IndexError);
  EXPECT_THROW(plant_dead_neurons(m, 0, 1.5, 1), DimensionError);
  EXPECT_THROW(plant_dead_neurons(m, 0, -0.1, 1), DimensionError);
}

TEST(ModelIo, RoundTripIsBitEqual) {
  const auto dir = testutil::scratch("io");
  const auto m = small_model(4);
  save_model(m, (dir / "m.bin").string());
  const auto back = load_model((dir / "m.bin").string());
  EXPECT_EQ(back, m);
  EXPECT_EQ(serialize(back), serialize(m));
}

TEST(ModelIo, WrongMagicIsFormatError) {
  auto bytes = serialize(small_model());
  bytes[0] = 'X';
  std::istringstream is(bytes);
  try {
    read_model(is);
    FAIL() << "no error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, WrongVersionIsFormatError) {
  auto bytes = serialize(small_model());
  bytes[4] = 9;
  std::istringstream is(bytes);
  try {
    read_model(is);
    FAIL() << "no error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, TruncationNamesTheTensor) {
  const auto m = small_model();
  const auto bytes = serialize(m);
  // The last tensor is lm_head; cutting a few hundred bytes lands inside its data.
  std::istringstream is(bytes.substr(0, bytes.size() - 300));
  try {
    read_model(is);
    FAIL() << "no error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("lm_head"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, TrailingBytesRejected) {
  std::istringstream is(serialize(small_model()) + "x");
  EXPECT_THROW(read_model(is), FormatError);
}

TEST(Tokenizer, EmptyRoundTrip) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(detokenize({}), "");
}

TEST(Tokenizer, BytesAreIds) { EXPECT_EQ(tokenize("ab"), (TokenSequence{97, 98})); }

TEST(Tokenizer, RandomBlobRoundTrips) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    std::string blob(1024, '\0');
    for (auto& c : blob) c = static_cast<char>(rng.below(256));
    const auto ids = tokenize(blob);
    for (auto id : ids) EXPECT_LT(id, 256u);
    EXPECT_EQ(detokenize(ids), blob);
  }
}

TEST(Tokenizer, OutOfVocabularyIsRangeError) {
  EXPECT_THROW(detokenize({258}), RangeError);
  EXPECT_EQ(detokenize({ByteTokenizer::kBos, 65, ByteTokenizer::kEos}), "A");
}

TEST(Forward, Deterministic) {
  const auto m = small_model(2);
  const auto toks = testutil::random_tokens(3, 20);
  EXPECT_EQ(forward(m, toks).logits, forward(m, toks).logits);
}

TEST(Forward, PrefixPropertyHolds) {
  const auto m = small_model(2);
  const auto toks = testutil::random_tokens(3, 40);
  const auto full = forward(m, toks).logits;
  for (std::size_t k : {1u, 7u, 25u}) {
    const auto part = forward(m, TokenSequence(toks.begin(), toks.begin() + k)).logits;
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t v = 0; v < m.dims.vocab_size; ++v) ASSERT_NEAR(part(t, v), full(t, v), 1e-6);
  }
}

TEST(Forward, LengthErrors) {
  const auto m = small_model();
  EXPECT_THROW(forward(m, {}), LengthError);
  EXPECT_THROW(forward(m, TokenSequence(m.dims.max_ctx + 1, 1)), LengthError);
  EXPECT_NO_THROW(forward(m, TokenSequence(m.dims.max_ctx, 1)));
}

TEST(Forward, MatchesIndependentReference) {
  for (auto act : {Activation::silu, Activation::relu, Activation::gelu}) {
    const auto m = gen_random_model(5, small_dims(2, 16, 32), act);
    const auto toks = testutil::random_tokens(6, 12);
    const auto got = forward(m, toks).logits;
    const auto ref = oracle::logits(m, toks);
    for (std::size_t t = 0; t < toks.size(); ++t)
      EXPECT_LT(testutil::rel_err(ref[t], got.row(t)), 1e-5) << to_string(act) << " t=" << t;
  }
}

// d_model = 2, d_h = 2, one layer. Attention output is zeroed (wo = 0), so
// the residual after attention is the embedding e = (1, 1). rmsnorm(e) = k e
// with k = 1/sqrt(1 + 1e-5). With relu, W_in = I, V_in = diag(2, -1):
//   h = (relu(k) * 2k, relu(k) * -k) = (2k^2, -k^2)
// and W_out = diag(1, 2) gives MLP = (2k^2, -2k^2). The final residual is
// (1 + 2k^2, 1 - 2k^2); lm_head = I maps its rmsnorm straight to logits.
TEST(Forward, TwoByTwoHandOracle) {
  ModelDims d;
  d.n_layers = 1;
  d.d_model = 2;
  d.d_h = 2;
  d.n_heads = 1;
  d.vocab_size = 2;
  d.max_ctx = 4;
  auto m = ModelWeights::zeros(d, Activation::relu);
  m.token_embedding(0, 0) = 1;
  m.token_embedding(0, 1) = 1;
  auto& lw = m.layers[0];
  lw.wv(0, 0) = lw.wv(1, 1) = 1;
  lw.w_in(0, 0) = lw.w_in(1, 1) = 1;
  lw.v_in(0, 0) = 2;
  lw.v_in(1, 1) = -1;
  lw.w_out_cols(0, 0) = 1;  // W_out column 0 = (1, 0)
  lw.w_out_cols(1, 1) = 2;  // W_out column 1 = (0, 2)
  m.lm_head(0, 0) = m.lm_head(1, 1) = 1;

  const double k2 = 1.0 / (1.0 + 1e-5);
  const double r0 = 1 + 2 * k2, r1 = 1 - 2 * k2;
  const double inv = 1.0 / std::sqrt((r0 * r0 + r1 * r1) / 2 + 1e-5);
  const auto logits = forward(m, {0}).logits;
  EXPECT_NEAR(logits(0, 0), r0 * inv, 1e-6);
  EXPECT_NEAR(logits(0, 1), r1 * inv, 1e-6);

  TraceConfig cfg;
  const auto tr = forward(m, {0}, cfg).trace.at(0, 0);
  EXPECT_NEAR(tr.mlp_output[0], 2 * k2, 1e-6);
  EXPECT_NEAR(tr.mlp_output[1], -2 * k2, 1e-6);
}

TEST(ForwardMasked, AllTrueIsBitIdentical) {
  const auto m = small_model(3);
  const auto toks = testutil::random_tokens(4, 30);
  EXPECT_EQ(forward_masked(m, toks, full_masks(m.dims)), forward(m, toks).logits);
}

TEST(ForwardMasked, AllFalseEqualsZeroMlpModel) {
  const auto m = small_model(3);
  auto zeroed = m;
  for (auto& l : zeroed.layers) std::fill(l.w_out_cols.data.begin(), l.w_out_cols.data.end(), 0.0f);
  const auto toks = testutil::random_tokens(4, 30);
  const LayerMasks off(m.dims.n_layers, NeuronMask(m.dims.d_h, 0));
  EXPECT_EQ(forward_masked(m, toks, off), forward(zeroed, toks).logits);
}

TEST(ForwardMasked, MaskingPlantedNeuronsMatchesDense) {
  const auto p = plant_dead_neurons(small_model(3), 1, 0.5, 2);
  auto masks = full_masks(p.model.dims);
  for (auto j : p.planted) masks[1][j] = 0;
  const auto toks = testutil::random_tokens(4, 30);
  const auto dense = forward(p.model, toks).logits;
  const auto sparse = forward_masked(p.model, toks, masks);
  for (std::size_t i = 0; i < dense.size(); ++i) ASSERT_NEAR(sparse.data[i], dense.data[i], 1e-6);
}

TEST(ForwardMasked, MaskShapeMismatchIsDimensionError) {
  const auto m = small_model();
  LayerMasks masks = full_masks(m.dims);
  masks[0].pop_back();
  EXPECT_THROW(forward_masked(m, {1, 2}, masks), DimensionError);
  EXPECT_THROW(forward_masked(m, {1, 2}, LayerMasks(1, NeuronMask(m.dims.d_h, 1))), DimensionError);
}

TEST(ForwardMasked, MlpCostProportionalToActiveNeurons) {
  const auto m = small_model(3);
  const auto toks = testutil::random_tokens(4, 10);
  Rng rng(8);
  for (double keep : {0.0, 0.25, 0.5, 1.0}) {
    LayerMasks masks(m.dims.n_layers, NeuronMask(m.dims.d_h, 0));
    std::size_t active = 0;
    for (auto& mk : masks)
      for (auto& b : mk) active += (b = rng.uniform() < keep ? 1 : 0);
    std::uint64_t mults = 0;
    forward_masked(m, toks, masks, &mults);
    EXPECT_EQ(mults, active * toks.size() * 3 * m.dims.d_model);
  }
}

TEST(Reconstruction, ContributionsSumToMlpOutput) {
  const auto m = small_model(12);
  TraceConfig cfg;
  cfg.retain_contributions = true;
  const auto res = forward(m, testutil::random_tokens(2, 16), cfg);
  for (const auto& r : res.trace.records) {
    std::vector<double> sum(m.dims.d_model, 0.0);
    for (std::size_t j = 0; j < m.dims.d_h; ++j) {
      double nn = 0;
      for (std::size_t i = 0; i < m.dims.d_model; ++i) {
        sum[i] += r.contributions(j, i);
        nn += static_cast<double>(r.contributions(j, i)) * r.contributions(j, i);
      }
      ASSERT_NEAR(r.magnitudes[j], std::sqrt(nn), 1e-6 * std::max(1.0, std::sqrt(nn)));
    }
    EXPECT_LT(testutil::rel_err(sum, r.mlp_output), 1e-5);
  }
}

TEST(Trace, RespectsLayerAndPositionSelection) {
  const auto m = small_model();
  TraceConfig cfg;
  cfg.layers = std::vector<std::size_t>{1};
  cfg.positions = std::vector<std::size_t>{0, 3};
  const auto res = forward(m, testutil::random_tokens(1, 5), cfg);
  ASSERT_EQ(res.trace.records.size(), 2u);
  EXPECT_NO_THROW(res.trace.at(1, 3));
  EXPECT_THROW(res.trace.at(0, 3), IndexError);
  EXPECT_TRUE(res.trace.at(1, 0).contributions.data.empty());
  EXPECT_TRUE(forward(m, {1, 2}, TraceConfig::none()).trace.records.empty());
}
