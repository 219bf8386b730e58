#pragma once

// Synthetic panels with planted coefficients, shaped like the flocking
// experiment: individuals observed at six alpha cells, prefix length
// ceil(2048 * alpha), per-observation surprisal and entropy covariates.

#include <cmath>
#include <string>
#include <vector>

#include "clada/panel.hpp"
#include "clada/random.hpp"

namespace panelgen {

struct Spec {
  std::size_t individuals = 2000;
  double beta = 4.12;
  double gamma1 = -0.80;
  double gamma2 = -0.12;
  /// Target within-R^2; each covariate explains an equal share of it.
  double r2 = 0.17;
  bool noiseless = false;
  bool constant_token_len = true;
  std::uint64_t seed = 42;
};

inline std::vector<clada::PanelObservation> make(const Spec& s) {
  const std::vector<double> alphas = {0.25, 0.30, 0.35, 0.40, 0.45, 0.50};
  std::vector<double> ell;
  for (double a : alphas) ell.push_back(std::ceil(2048 * a - 1e-9));
  double mean = 0, var = 0;
  for (double v : ell) mean += v / 6;
  for (double v : ell) var += (v - mean) * (v - mean) / 6;
  // Each term contributes share * sigma^2 of within variance, with
  // share = r2 / (3 (1 - r2)) so the three together hit r2.
  const double share = s.r2 / (3.0 * (1.0 - s.r2));
  const double sigma = std::fabs(s.beta) * std::sqrt(var / share);
  // iid covariates lose 1/6 of their variance to demeaning over 6 cells.
  const double sd_s = std::sqrt(share) * sigma / std::fabs(s.gamma1) / std::sqrt(5.0 / 6.0);
  const double sd_h = std::sqrt(share) * sigma / std::fabs(s.gamma2) / std::sqrt(5.0 / 6.0);

  clada::Rng rng(s.seed);
  std::vector<clada::PanelObservation> out;
  for (std::size_t i = 0; i < s.individuals; ++i) {
    // Individual levels correlate with the fixed effect, so pooled OLS
    // would be biased while the within estimator is not.
    const double level_s = rng.normal() * sd_s, level_h = rng.normal() * sd_h;
    const double fe = 3.0 * sigma * rng.normal() + 2.0 * level_s - 5.0 * level_h;
    for (std::size_t j = 0; j < alphas.size(); ++j) {
      const double sv = level_s + sd_s * rng.normal();
      const double hv = level_h + sd_h * rng.normal();
      const double noise = s.noiseless ? 0.0 : sigma * rng.normal();
      clada::PanelObservation o;
      o.individual_id = "ind" + std::to_string(i);
      o.occasion = std::to_string(alphas[j]);
      o.response = fe + s.beta * ell[j] + s.gamma1 * sv + s.gamma2 * hv + noise;
      o.covariates = {{"prefix_len", ell[j]}, {"surprisal", sv}, {"entropy", hv}};
      if (s.constant_token_len) o.covariates["token_len"] = 2048.0;
      out.push_back(std::move(o));
    }
  }
  return out;
}

}  // namespace panelgen
