#pragma once

// Evaluation of a trained model on a dataset split, and its JSON/CSV reports.

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccbm/data.hpp"
#include "ccbm/metrics.hpp"
#include "ccbm/model.hpp"
#include "ccbm/train.hpp"

namespace ccbm {

struct RhoStat {
  Correlation rho;
  std::optional<Interval> ci;  // absent when n <= 3 or |rho| = 1
};

struct EvalSummary {
  std::size_t n = 0;
  double accuracy = 0.0;
  RhoStat rho_epi_ale, rho_epi_err, rho_ale_h;
  std::optional<double> auroc_epi;      // U_epi as an error detector
  std::optional<double> auroc_entropy;  // predictive entropy as an error detector
  StratifiedAuroc strat_epi, strat_entropy;

  std::vector<Prediction> predictions;
  std::vector<int> errors;         // 1 where the task prediction is wrong
  std::vector<double> ambiguity;   // stratification variable per example
  std::vector<double> annotator_h; // mean annotator entropy per example
};

namespace detail {

inline RhoStat rho_stat(std::span<const double> a, std::span<const double> b) {
  RhoStat s;
  s.rho = spearman(a, b);
  if (!s.rho.degenerate && a.size() > 3 && std::abs(s.rho.value) < 1.0)
    s.ci = fisher_ci(s.rho.value, static_cast<long>(a.size()));
  return s;
}

inline std::optional<double> maybe_auroc(std::span<const double> s, std::span<const int> e) {
  const auto pos = std::count(e.begin(), e.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(e.size())) return std::nullopt;
  return auroc(s, e);
}

}  // namespace detail

inline EvalSummary evaluate_model(const Dataset& ds, const ModelParams& params, Range r) {
  if (r.size() < 3) fail(Errc::TooFewSamples, "evaluation needs at least 3 examples, got " + std::to_string(r.size()));
  if (params.dims.d != ds.d || params.dims.concepts != ds.C || params.dims.classes != ds.K || params.dims.tasks != ds.J)
    fail(Errc::DimMismatch, "model dims do not match the dataset");
  EvalSummary s;
  s.n = r.size();
  const auto hs = ds.embeddings_of(r);
  s.predictions = infer_all(params, hs);
  std::vector<double> ue, ua, ent;
  std::size_t correct = 0;
  for (std::size_t j = 0; j < s.n; ++j) {
    const std::size_t i = r.begin + j;
    const auto& p = s.predictions[j];
    const int err = p.y_hat != ds.task[i] ? 1 : 0;
    correct += 1 - err;
    s.errors.push_back(err);
    s.ambiguity.push_back(ds.ambiguity(i));
    s.annotator_h.push_back(ds.mean_entropy(i));
    ue.push_back(p.u_epi);
    ua.push_back(p.u_ale);
    ent.push_back(p.predictive_entropy);
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(s.n);
  std::vector<double> errd(s.errors.begin(), s.errors.end());
  s.rho_epi_ale = detail::rho_stat(ue, ua);
  s.rho_epi_err = detail::rho_stat(ue, errd);
  s.rho_ale_h = detail::rho_stat(ua, s.annotator_h);
  s.auroc_epi = detail::maybe_auroc(ue, s.errors);
  s.auroc_entropy = detail::maybe_auroc(ent, s.errors);
  s.strat_epi = stratified_auroc(ue, s.errors, s.ambiguity);
  s.strat_entropy = stratified_auroc(ent, s.errors, s.ambiguity);
  return s;
}

inline std::vector<int> correctness(const EvalSummary& s) {
  std::vector<int> c;
  for (int e : s.errors) c.push_back(1 - e);
  return c;
}

namespace detail {

inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json rho_json(const RhoStat& r) {
  nlohmann::ordered_json j;
  j["value"] = r.rho.value;
  j["degenerate"] = r.rho.degenerate;
  return j;
}

inline nlohmann::ordered_json ci_json(const RhoStat& r) {
  if (!r.ci) return nullptr;
  return nlohmann::ordered_json::array({r.ci->lo, r.ci->hi});
}

inline nlohmann::ordered_json strat_json(const StratifiedAuroc& st) {
  nlohmann::ordered_json j;
  for (const auto& b : st.bins) {
    nlohmann::ordered_json bj;
    bj["count"] = b.count;
    bj["auroc"] = opt_json(b.auroc);
    j[b.name] = bj;
  }
  j["delta_high_minus_low"] = opt_json(st.delta);
  return j;
}

inline std::string csv_value(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

}  // namespace detail

inline nlohmann::ordered_json report_json(const EvalSummary& s) {
  nlohmann::ordered_json j;
  j["n"] = s.n;
  j["rho_epi_ale"] = detail::rho_json(s.rho_epi_ale);
  j["rho_epi_err"] = detail::rho_json(s.rho_epi_err);
  j["rho_ale_h"] = detail::rho_json(s.rho_ale_h);
  nlohmann::ordered_json au;
  au["u_epi"] = detail::opt_json(s.auroc_epi);
  au["predictive_entropy"] = detail::opt_json(s.auroc_entropy);
  j["auroc"] = au;
  nlohmann::ordered_json st;
  st["u_epi"] = detail::strat_json(s.strat_epi);
  st["predictive_entropy"] = detail::strat_json(s.strat_entropy);
  j["stratified_auroc"] = st;
  nlohmann::ordered_json ci;
  ci["level"] = 0.95;
  ci["rho_epi_ale"] = detail::ci_json(s.rho_epi_ale);
  ci["rho_epi_err"] = detail::ci_json(s.rho_epi_err);
  ci["rho_ale_h"] = detail::ci_json(s.rho_ale_h);
  j["fisher_ci"] = ci;
  j["accuracy"] = s.accuracy;
  return j;
}

/// One row per metric: metric,value,ci_lo,ci_hi
inline void write_metrics_csv(const EvalSummary& s, std::ostream& os) {
  os << "metric,value,ci_lo,ci_hi\n";
  const auto rho_row = [&](const char* name, const RhoStat& r) {
    os << name << ',' << format_double(r.rho.value) << ',' << (r.ci ? format_double(r.ci->lo) : "NA") << ','
       << (r.ci ? format_double(r.ci->hi) : "NA") << '\n';
  };
  rho_row("rho_epi_ale", s.rho_epi_ale);
  rho_row("rho_epi_err", s.rho_epi_err);
  rho_row("rho_ale_h", s.rho_ale_h);
  os << "auroc_u_epi," << detail::csv_value(s.auroc_epi) << ",NA,NA\n";
  os << "auroc_predictive_entropy," << detail::csv_value(s.auroc_entropy) << ",NA,NA\n";
  os << "accuracy," << format_double(s.accuracy) << ",NA,NA\n";
  os << "n," << s.n << ",NA,NA\n";
}

/// scorer,bin,lo,hi,count,auroc
inline void write_stratified_csv(const StratifiedAuroc& st, const std::string& scorer, std::ostream& os) {
  os << "scorer,bin,lo,hi,count,auroc\n";
  for (const auto& b : st.bins)
    os << scorer << ',' << b.name << ',' << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << ','
       << detail::csv_value(b.auroc) << '\n';
  os << scorer << ",delta_high_minus_low,NA,NA,NA," << detail::csv_value(st.delta) << '\n';
}

/// action,count,accuracy then a balance row.
inline void write_quadrant_csv(const QuadrantTable& t, std::ostream& os) {
  os << "action,count,accuracy\n";
  for (const auto& r : t.rows) os << action_name(r.action) << ',' << r.count << ',' << detail::csv_value(r.accuracy) << '\n';
  os << "balance,NA," << format_double(t.balance) << '\n';
}

inline nlohmann::ordered_json quadrant_json(const QuadrantTable& t) {
  nlohmann::ordered_json j;
  j["t_epi"] = t.t_epi;
  j["t_ale"] = t.t_ale;
  j["total"] = t.total;
  j["degenerate_medians"] = t.degenerate_medians;
  for (const auto& r : t.rows) {
    nlohmann::ordered_json rj;
    rj["count"] = r.count;
    rj["accuracy"] = detail::opt_json(r.accuracy);
    j["quadrants"][std::string(action_name(r.action))] = rj;
  }
  j["balance"] = t.balance;
  return j;
}

}  // namespace ccbm
