#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"

#include "clada/error.hpp"
#include "clada/similarity.hpp"

namespace clada {

struct PanelObservation {
  std::string individual_id;
  std::string occasion;
  double response = 0.0;
  std::map<std::string, double> covariates;
};

struct WithinResult {
  std::vector<PanelObservation> demeaned;
  /// Per individual: mean response and covariates, keyed by individual_id.
  std::map<std::string, PanelObservation> group_means;
  std::size_t n_individuals = 0;
  std::size_t dropped_singletons = 0;
};

namespace detail {

inline void check_observations(const std::vector<PanelObservation>& obs) {
  if (obs.empty()) throw EmptyInputError("panel has no observations");
  const auto& first = obs.front().covariates;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& o = obs[i];
    if (o.individual_id.empty()) throw FormatError("observation " + std::to_string(i) + " has an empty individual_id");
    if (!std::isfinite(o.response)) throw RangeError("observation " + std::to_string(i) + " has a non-finite response");
    if (o.covariates.size() != first.size())
      throw FormatError("observation " + std::to_string(i) + " has a different covariate set");
    for (const auto& [name, v] : o.covariates) {
      if (!first.count(name)) throw FormatError("observation " + std::to_string(i) + " has unexpected covariate " + name);
      if (!std::isfinite(v)) throw RangeError("observation " + std::to_string(i) + ": non-finite " + name);
    }
  }
}

}  // namespace detail

/// Subtracts each individual's mean from the response and every covariate.
/// Individuals with a single observation are dropped and counted.
inline WithinResult within_transform(const std::vector<PanelObservation>& obs) {
  detail::check_observations(obs);
  std::unordered_map<std::string, std::vector<std::size_t>> members;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    auto [it, fresh] = members.try_emplace(obs[i].individual_id);
    if (fresh) order.push_back(obs[i].individual_id);
    it->second.push_back(i);
  }
  WithinResult r;
  std::vector<std::pair<std::size_t, PanelObservation>> out;
  for (const auto& id : order) {
    const auto& rows = members[id];
    if (rows.size() < 2) {
      ++r.dropped_singletons;
      continue;
    }
    ++r.n_individuals;
    PanelObservation mean{id, "", 0.0, obs[rows.front()].covariates};
    for (auto& [name, v] : mean.covariates) v = 0.0;
    for (std::size_t i : rows) {
      mean.response += obs[i].response;
      for (const auto& [name, v] : obs[i].covariates) mean.covariates[name] += v;
    }
    const double n = static_cast<double>(rows.size());
    mean.response /= n;
    for (auto& [name, v] : mean.covariates) v /= n;
    for (std::size_t i : rows) {
      PanelObservation d = obs[i];
      d.response -= mean.response;
      for (auto& [name, v] : d.covariates) v -= mean.covariates.at(name);
      out.emplace_back(i, std::move(d));
    }
    r.group_means.emplace(id, std::move(mean));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [i, d] : out) r.demeaned.push_back(std::move(d));
  return r;
}

struct Coefficient {
  std::string name;
  double estimate = 0.0;
  double std_error = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
};

struct DroppedCovariate {
  std::string name;
  std::string reason;
};

struct FitResult {
  std::vector<Coefficient> coefficients;
  double adj_r2 = 0.0;
  double r2_within = 0.0;
  std::size_t n_obs = 0;
  std::size_t n_individuals = 0;
  std::size_t dropped_singletons = 0;
  double dof = 0.0;
  std::string se_type = "classical";
  std::vector<DroppedCovariate> dropped;

  const Coefficient& at(const std::string& name) const {
    for (const auto& c : coefficients)
      if (c.name == name) return c;
    throw IndexError("no coefficient named '" + name + "'");
  }
};

struct FitOptions {
  std::vector<std::string> covariates;  // empty: every covariate, in name order
  bool cluster_by_individual = false;
};

namespace detail {

inline double two_sided_p(double t, double dof) {
  if (std::isnan(t)) return 1.0;
  if (std::isinf(t)) return 0.0;
  boost::math::students_t dist(dof);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
}

}  // namespace detail

/// Within (fixed-effects) OLS. No intercept is reported: the individual
/// effects absorb it.
inline FitResult fit_fe(const std::vector<PanelObservation>& obs, const FitOptions& opt = {}) {
  const WithinResult w = within_transform(obs);
  if (w.demeaned.empty()) throw InsufficientDataError("no individual has 2 or more observations");

  std::vector<std::string> names = opt.covariates;
  if (names.empty())
    for (const auto& [name, v] : obs.front().covariates) names.push_back(name);
  for (const auto& name : names)
    if (!obs.front().covariates.count(name)) throw IndexError("unknown covariate '" + name + "'");

  FitResult fit;
  fit.n_obs = w.demeaned.size();
  fit.n_individuals = w.n_individuals;
  fit.dropped_singletons = w.dropped_singletons;

  // Zero within-variance columns carry no identifying variation.
  std::vector<std::string> kept;
  for (const auto& name : names) {
    double scale = 1.0, spread = 0.0;
    for (const auto& o : obs) scale = std::max(scale, std::abs(o.covariates.at(name)));
    for (const auto& d : w.demeaned) spread = std::max(spread, std::abs(d.covariates.at(name)));
    if (spread <= 1e-12 * scale)
      fit.dropped.push_back({name, "zero within-variance"});
    else
      kept.push_back(name);
  }
  if (kept.empty()) throw InsufficientDataError("no covariate has within-individual variation");

  const auto n = static_cast<Eigen::Index>(fit.n_obs);
  const auto k = static_cast<Eigen::Index>(kept.size());
  const double G = static_cast<double>(fit.n_individuals);
  if (static_cast<double>(n) <= G + static_cast<double>(k))
    throw InsufficientDataError("not identifiable: n_obs " + std::to_string(n) + " <= individuals " +
                                std::to_string(fit.n_individuals) + " + covariates " + std::to_string(k));

  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& d = w.demeaned[static_cast<std::size_t>(i)];
    y(i) = d.response;
    for (Eigen::Index j = 0; j < k; ++j) X(i, j) = d.covariates.at(kept[static_cast<std::size_t>(j)]);
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < k) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(X);
    lu.setThreshold(1e-10);
    const Eigen::MatrixXd ker = lu.kernel();
    std::string cols;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (ker.row(j).cwiseAbs().maxCoeff() > 1e-8) {
        if (!cols.empty()) cols += ", ";
        cols += kept[static_cast<std::size_t>(j)];
      }
    }
    throw CollinearityError("rank-deficient design after within transform; collinear columns: " + cols);
  }
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::VectorXd resid = y - X * beta;
  const double ssr = resid.squaredNorm();
  const double sst = y.squaredNorm();
  const double dof = static_cast<double>(n) - G - static_cast<double>(k);

  const Eigen::MatrixXd xtx_inv = (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  Eigen::MatrixXd cov;
  double t_dof = dof;
  if (opt.cluster_by_individual) {
    if (fit.n_individuals < 2) throw InsufficientDataError("cluster-robust SE needs >= 2 individuals");
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
    std::unordered_map<std::string, Eigen::VectorXd> score;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto [it, fresh] = score.try_emplace(w.demeaned[static_cast<std::size_t>(i)].individual_id, Eigen::VectorXd::Zero(k));
      it->second += X.row(i).transpose() * resid(i);
    }
    for (const auto& [id, s] : score) meat += s * s.transpose();
    const double c = G / (G - 1.0) * (static_cast<double>(n) - 1.0) / (static_cast<double>(n) - static_cast<double>(k));
    cov = c * xtx_inv * meat * xtx_inv;
    t_dof = G - 1.0;
    fit.se_type = "cluster(individual)";
  } else {
    cov = (ssr / dof) * xtx_inv;
  }

  fit.dof = t_dof;
  for (Eigen::Index j = 0; j < k; ++j) {
    Coefficient c;
    c.name = kept[static_cast<std::size_t>(j)];
    c.estimate = beta(j);
    c.std_error = std::sqrt(std::max(0.0, cov(j, j)));
    if (c.std_error > 0.0)
      c.t_stat = c.estimate / c.std_error;
    else
      c.t_stat = c.estimate == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), c.estimate);
    c.p_value = detail::two_sided_p(c.t_stat, t_dof);
    fit.coefficients.push_back(std::move(c));
  }
  if (sst > 0.0) {
    fit.r2_within = 1.0 - ssr / sst;
    fit.adj_r2 = 1.0 - (ssr / dof) / (sst / (static_cast<double>(n) - G));
  } else {
    fit.r2_within = fit.adj_r2 = std::numeric_limits<double>::quiet_NaN();
  }
  return fit;
}

inline std::string stars(double p) {
  if (p < 0.01) return "***";
  if (p < 0.05) return "**";
  if (p < 0.1) return "*";
  return "";
}

inline nlohmann::json to_json(const FitResult& f) {
  nlohmann::json j;
  j["coefficients"] = nlohmann::json::array();
  for (const auto& c : f.coefficients)
    j["coefficients"].push_back(
        {{"name", c.name}, {"estimate", c.estimate}, {"std_error", c.std_error}, {"t_stat", c.t_stat}, {"p_value", c.p_value}});
  j["adj_r2"] = f.adj_r2;
  j["r2_within"] = f.r2_within;
  j["n_obs"] = f.n_obs;
  j["n_individuals"] = f.n_individuals;
  j["dropped_singletons"] = f.dropped_singletons;
  j["dof"] = f.dof;
  j["se_type"] = f.se_type;
  j["individual_fe"] = true;
  j["dropped"] = nlohmann::json::array();
  for (const auto& d : f.dropped) j["dropped"].push_back({{"name", d.name}, {"reason", d.reason}});
  return j;
}

namespace detail {

inline std::vector<std::string> term_order(const std::vector<FitResult>& fits) {
  std::vector<std::string> terms;
  for (const auto& f : fits)
    for (const auto& c : f.coefficients)
      if (std::find(terms.begin(), terms.end(), c.name) == terms.end()) terms.push_back(c.name);
  return terms;
}

inline const Coefficient* find_term(const FitResult& f, const std::string& name) {
  for (const auto& c : f.coefficients)
    if (c.name == name) return &c;
  return nullptr;
}

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace detail

/// Columns are fits, rows are covariates: estimate with stars, then the
/// t-statistic in parentheses. Footer rows: Obs, Adj. R2, Individual FE.
inline std::string report_table(const std::vector<FitResult>& fits) {
  const auto terms = detail::term_order(fits);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{""};
  for (std::size_t i = 0; i < fits.size(); ++i) head.push_back("(" + std::to_string(i + 1) + ")");
  rows.push_back(head);
  for (const auto& t : terms) {
    std::vector<std::string> est{t}, ts{""};
    for (const auto& f : fits) {
      const auto* c = detail::find_term(f, t);
      est.push_back(c ? detail::fmt("%.4f", c->estimate) + stars(c->p_value) : "");
      ts.push_back(c ? "(" + detail::fmt("%.2f", c->t_stat) + ")" : "");
    }
    rows.push_back(est);
    rows.push_back(ts);
  }
  std::vector<std::string> obs{"Obs"}, r2{"Adj. R2"}, fe{"Individual FE"};
  for (const auto& f : fits) {
    obs.push_back(std::to_string(f.n_obs));
    r2.push_back(detail::fmt("%.4f", f.adj_r2));
    fe.push_back("YES");
  }
  rows.push_back(obs);
  rows.push_back(r2);
  rows.push_back(fe);

  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  const std::size_t total = std::accumulate(width.begin(), width.end(), std::size_t{0}) + 2 * (width.size() - 1);
  const std::string rule(total, '-');
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i == 1 || i == rows.size() - 3) os << rule << '\n';
    const auto& r = rows[i];
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c == 0) {
        os << r[c] << std::string(width[c] - r[c].size(), ' ');
      } else {
        os << "  " << std::string(width[c] - r[c].size(), ' ') << r[c];
      }
    }
    os << '\n';
  }
  os << rule << '\n' << "t-statistics in parentheses; * p<0.1; ** p<0.05; *** p<0.01\n";
  return os.str();
}

/// CSV form of report_table: term,stat,(1),(2),...
inline std::string report_csv(const std::vector<FitResult>& fits) {
  std::ostringstream os;
  os << "term,stat";
  for (std::size_t i = 0; i < fits.size(); ++i) os << ",(" << i + 1 << ")";
  os << '\n';
  for (const auto& t : detail::term_order(fits)) {
    os << t << ",coef";
    for (const auto& f : fits) {
      const auto* c = detail::find_term(f, t);
      os << ',' << (c ? detail::fmt("%.9g", c->estimate) + stars(c->p_value) : "");
    }
    os << '\n' << t << ",t";
    for (const auto& f : fits) {
      const auto* c = detail::find_term(f, t);
      os << ',' << (c ? detail::fmt("%.9g", c->t_stat) : "");
    }
    os << '\n';
  }
  os << "Obs,";
  for (const auto& f : fits) os << ',' << f.n_obs;
  os << "\nAdj. R2,";
  for (const auto& f : fits) os << ',' << detail::fmt("%.9g", f.adj_r2);
  os << "\nIndividual FE,";
  for (std::size_t i = 0; i < fits.size(); ++i) os << ",YES";
  os << '\n';
  return os.str();
}

/// Flocking panel rows to observations; the individual is (group, pair_id)
/// and the occasion is alpha. Empty filters keep everything.
inline std::vector<PanelObservation> panel_from_rows(const std::vector<PanelRow>& rows, const std::string& metric,
                                                     const std::string& group = {}) {
  std::vector<PanelObservation> obs;
  for (const auto& r : rows) {
    if (!metric.empty() && r.metric != metric) continue;
    if (!group.empty() && r.group != group) continue;
    PanelObservation o;
    o.individual_id = r.group + ":" + std::to_string(r.pair_id);
    o.occasion = detail::fmt("%.2f", r.alpha);
    o.response = r.delta_sim;
    o.covariates = {{"prefix_len", static_cast<double>(r.prefix_len)},
                    {"surprisal_mean_norm", r.surprisal_mean_norm},
                    {"entropy_mean_norm", r.entropy_mean_norm},
                    {"token_len", static_cast<double>(r.token_len)}};
    obs.push_back(std::move(o));
  }
  return obs;
}

}  // namespace clada
