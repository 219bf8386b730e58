#include <gtest/gtest.h>

#include "oracles.hpp"
#include "panel_gen.hpp"
#include "test_util.hpp"

using namespace clada;

namespace {

PanelObservation ob(std::string id, double y, std::map<std::string, double> x) {
  return {std::move(id), "", y, std::move(x)};
}

std::vector<PanelObservation> random_panel(std::uint64_t seed, std::size_t G, std::size_t T) {
  Rng rng(seed);
  std::vector<PanelObservation> out;
  for (std::size_t i = 0; i < G; ++i) {
    const double fe = rng.normal() * 4;
    const double lvl = rng.normal();
    for (std::size_t t = 0; t < T; ++t) {
      const double a = lvl + rng.normal(), b = rng.uniform(0, 3), c = rng.normal() * 0.1;
      out.push_back(ob("g" + std::to_string(i), fe + 1.5 * a - 2 * b + 7 * c + rng.normal(), {{"a", a}, {"b", b}, {"c", c}}));
    }
  }
  return out;
}

}  // namespace

TEST(WithinTransform, SingleIndividual) {
  const auto r = within_transform({ob("x", 1, {{"v", 5}}), ob("x", 3, {{"v", 5}})});
  ASSERT_EQ(r.demeaned.size(), 2u);
  EXPECT_EQ(r.demeaned[0].response, -1.0);
  EXPECT_EQ(r.demeaned[1].response, 1.0);
  EXPECT_EQ(r.demeaned[0].covariates.at("v"), 0.0);
  EXPECT_EQ(r.group_means.at("x").response, 2.0);
  EXPECT_EQ(r.n_individuals, 1u);
}

TEST(WithinTransform, SingletonsDropped) {
  const auto r = within_transform({ob("x", 1, {}), ob("y", 2, {}), ob("x", 3, {})});
  EXPECT_EQ(r.dropped_singletons, 1u);
  EXPECT_EQ(r.demeaned.size(), 2u);
}

TEST(WithinTransform, GroupMeansVanish) {
  const auto panel = random_panel(1, 30, 5);
  const auto r = within_transform(panel);
  std::map<std::string, std::pair<double, double>> sums;
  for (const auto& o : r.demeaned) {
    sums[o.individual_id].first += o.response;
    sums[o.individual_id].second += o.covariates.at("a");
  }
  for (const auto& [id, s] : sums) {
    EXPECT_NEAR(s.first, 0.0, 1e-10);
    EXPECT_NEAR(s.second, 0.0, 1e-10);
  }
}

TEST(WithinTransform, ValidatesInput) {
  EXPECT_THROW(within_transform({}), EmptyInputError);
  EXPECT_THROW(within_transform({ob("", 1, {})}), FormatError);
  EXPECT_THROW(within_transform({ob("x", NAN, {})}), RangeError);
  EXPECT_THROW(within_transform({ob("x", 1, {{"a", 1}}), ob("x", 1, {{"b", 1}})}), FormatError);
}

TEST(FitFe, MatchesExplicitDummyOls) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto panel = random_panel(seed, 10 + 20 * (seed - 1), 3 + seed);
    const auto fit = fit_fe(panel);
    const auto ref = oracle::dummy_ols(panel, {"a", "b", "c"});
    for (std::size_t c = 0; c < 3; ++c) {
      const auto& co = fit.coefficients[c];
      EXPECT_NEAR(co.estimate, ref.beta[c], 1e-8) << co.name;
      EXPECT_NEAR(co.std_error, ref.se[c], 1e-8 * std::max(1.0, ref.se[c])) << co.name;
    }
    EXPECT_EQ(fit.dof, static_cast<double>(panel.size() - fit.n_individuals - 3));
  }
}

TEST(FitFe, NoiselessRecoversExactly) {
  panelgen::Spec s;
  s.individuals = 40;
  s.noiseless = true;
  const auto fit = fit_fe(panelgen::make(s));
  EXPECT_NEAR(fit.adj_r2, 1.0, 1e-9);
  EXPECT_NEAR(fit.at("prefix_len").estimate, 4.12, 1e-9);
  EXPECT_NEAR(fit.at("surprisal").estimate, -0.80, 1e-9);
  EXPECT_NEAR(fit.at("entropy").estimate, -0.12, 1e-9);
}

TEST(FitFe, ConstantCovariateDroppedWithReason) {
  panelgen::Spec s;
  s.individuals = 50;
  const auto fit = fit_fe(panelgen::make(s));
  ASSERT_EQ(fit.dropped.size(), 1u);
  EXPECT_EQ(fit.dropped[0].name, "token_len");
  EXPECT_EQ(fit.dropped[0].reason, "zero within-variance");
  EXPECT_THROW(fit.at("token_len"), IndexError);
  EXPECT_EQ(fit.coefficients.size(), 3u);
}

TEST(FitFe, PlantedPanelWithinSampling) {
  panelgen::Spec s;
  s.individuals = 500;
  s.seed = 7;
  const auto fit = fit_fe(panelgen::make(s));
  for (auto [name, truth] : {std::pair{"prefix_len", 4.12}, {"surprisal", -0.80}, {"entropy", -0.12}}) {
    const auto& c = fit.at(name);
    EXPECT_LT(std::fabs(c.estimate - truth), 4 * c.std_error) << name;
  }
  EXPECT_NEAR(fit.adj_r2, 0.17, 0.05);
}

TEST(FitFe, ResponseShiftWithinIndividualAbsorbed) {
  auto panel = random_panel(4, 20, 4);
  const auto base = fit_fe(panel);
  for (auto& o : panel)
    if (o.individual_id == "g3") o.response += 123.0;
  const auto shifted = fit_fe(panel);
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(shifted.coefficients[c].estimate, base.coefficients[c].estimate, 1e-9);
}

TEST(FitFe, CovariateRescaling) {
  auto panel = random_panel(5, 20, 4);
  const auto base = fit_fe(panel);
  for (auto& o : panel) o.covariates["b"] *= 8.0;
  const auto scaled = fit_fe(panel);
  EXPECT_NEAR(scaled.at("b").estimate, base.at("b").estimate / 8.0, 1e-10);
  EXPECT_NEAR(scaled.at("b").t_stat, base.at("b").t_stat, 1e-8);
  EXPECT_NEAR(scaled.at("a").estimate, base.at("a").estimate, 1e-9);
}

TEST(FitFe, PValuesAndClusterOption) {
  const auto panel = random_panel(6, 40, 5);
  const auto fit = fit_fe(panel);
  for (const auto& c : fit.coefficients) {
    EXPECT_GE(c.p_value, 0.0);
    EXPECT_LE(c.p_value, 1.0);
  }
  EXPECT_LT(fit.at("a").p_value, 1e-6);
  FitOptions opt;
  opt.cluster_by_individual = true;
  const auto cl = fit_fe(panel, opt);
  EXPECT_EQ(cl.se_type, "cluster(individual)");
  EXPECT_EQ(cl.at("a").estimate, fit.at("a").estimate);
  EXPECT_NE(cl.at("a").std_error, fit.at("a").std_error);
}

TEST(FitFe, CovariateSubsetAndErrors) {
  const auto panel = random_panel(7, 10, 4);
  FitOptions opt;
  opt.covariates = {"b"};
  const auto fit = fit_fe(panel, opt);
  ASSERT_EQ(fit.coefficients.size(), 1u);
  opt.covariates = {"zzz"};
  EXPECT_THROW(fit_fe(panel, opt), IndexError);
  // 4 observations cannot identify 2 slopes plus 2 fixed effects.
  EXPECT_THROW(fit_fe({ob("x", 1, {{"a", 1}, {"b", 0}}), ob("x", 2, {{"a", 3}, {"b", 1}}),
                       ob("y", 0, {{"a", 0}, {"b", 2}}), ob("y", 1, {{"a", 5}, {"b", 7}})},
                      {{"a", "b"}, false}),
               InsufficientDataError);
}

TEST(FitFe, CollinearColumnsNamed) {
  auto panel = random_panel(8, 20, 4);
  for (auto& o : panel) o.covariates["d"] = 2 * o.covariates["a"] - o.covariates["b"];
  try {
    fit_fe(panel);
    FAIL();
  } catch (const CollinearityError& e) {
    EXPECT_NE(std::string(e.what()).find("collinear columns: a, b, d"), std::string::npos) << e.what();
  }
}

TEST(Report, Stars) {
  EXPECT_EQ(stars(0.003), "***");
  EXPECT_EQ(stars(0.03), "**");
  EXPECT_EQ(stars(0.07), "*");
  EXPECT_EQ(stars(0.2), "");
}

TEST(Report, TwoFitsAlignedByName) {
  const auto panel = random_panel(9, 30, 4);
  FitOptions one;
  one.covariates = {"a"};
  const auto f1 = fit_fe(panel, one);
  const auto f2 = fit_fe(panel);
  const auto table = report_table({f1, f2});
  EXPECT_NE(table.find("(1)"), std::string::npos);
  EXPECT_NE(table.find("(2)"), std::string::npos);
  EXPECT_NE(table.find("Individual FE"), std::string::npos);
  EXPECT_NE(table.find("t-statistics in parentheses"), std::string::npos);
  const auto csv = report_csv({f1, f2});
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "term,stat,(1),(2)");
  std::getline(is, line);
  EXPECT_EQ(line.substr(0, 7), "a,coef,");
  // b appears only in the second column.
  EXPECT_NE(csv.find("\nb,coef,,"), std::string::npos);
  const auto j = to_json(f2);
  EXPECT_EQ(j["coefficients"].size(), 3u);
  EXPECT_EQ(j["n_obs"], 120);
}

TEST(PanelFromRows, Mapping) {
  PanelRow r;
  r.pair_id = 3;
  r.group = "RTS";
  r.metric = "cka";
  r.alpha = 0.3;
  r.prefix_len = 77;
  r.token_len = 256;
  r.delta_sim = 0.5;
  PanelRow other = r;
  other.metric = "cos";
  const auto obs = panel_from_rows({r, other}, "cka");
  ASSERT_EQ(obs.size(), 1u);
  EXPECT_EQ(obs[0].individual_id, "RTS:3");
  EXPECT_EQ(obs[0].occasion, "0.30");
  EXPECT_EQ(obs[0].covariates.at("prefix_len"), 77.0);
  EXPECT_TRUE(panel_from_rows({r}, "cka", "NLS").empty());
}
