#pragma once

// Inference readouts and evaluation statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "ccbm/credal.hpp"
#include "ccbm/error.hpp"
#include "ccbm/losses.hpp"
#include "ccbm/model.hpp"
#include "ccbm/parallel.hpp"

namespace ccbm {

struct Prediction {
  int y_hat = 0;
  double u_epi = 0.0;  // sum over concepts and axes of ln sigma_epi^2
  double u_ale = 0.0;  // mean over concepts of sigma_ale
  Vector u_epi_concept;  // per concept: sum over axes of ln sigma_epi^2
  Vector sigma_ale;      // per concept
  Matrix p_concepts;     // C x K
  double predictive_entropy = 0.0;  // mean over concepts of H[p^(c)]
};

/// Sum of floored log-variances of one concept's credal scales.
inline double log_det(const Eigen::Ref<const Eigen::RowVectorXd>& sigma) {
  double u = 0.0;
  for (Eigen::Index k = 0; k < sigma.size(); ++k) u += 2.0 * std::log(std::max(sigma[k], kSigmaFloor));
  return u;
}

inline Prediction prediction_from(const ForwardOutput& o) {
  Prediction p;
  o.task_logits.maxCoeff(&p.y_hat);
  const Eigen::Index C = o.sigma_epi.rows();
  p.u_epi_concept.resize(C);
  for (Eigen::Index c = 0; c < C; ++c) p.u_epi_concept[c] = log_det(o.sigma_epi.row(c));
  p.u_epi = p.u_epi_concept.sum();
  p.sigma_ale = o.sigma_ale;
  p.u_ale = o.sigma_ale.mean();
  p.p_concepts = o.p_concepts;
  double h = 0.0;
  for (Eigen::Index c = 0; c < C; ++c) h += entropy_values(o.p_concepts.row(c));
  p.predictive_entropy = h / static_cast<double>(C);
  return p;
}

/// Single forward pass; no labels or targets involved.
inline Prediction infer(const ModelParams& params, const Vector& h) { return prediction_from(forward(h, params)); }

inline std::vector<Prediction> infer_all(const ModelParams& params, std::span<const Vector> hs) {
  std::vector<Prediction> out(hs.size());
  parallel_for(hs.size(), [&](std::size_t i) { out[i] = infer(params, hs[i]); });
  return out;
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation (Pearson on average ranks). A constant input
/// yields 0 with the degenerate flag set.
inline Correlation spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(Errc::LengthMismatch, "spearman inputs differ in length");
  if (a.size() < 3) fail(Errc::TooFewSamples, "spearman needs at least 3 pairs, got " + std::to_string(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) fail(Errc::NaNDetected, "spearman input is not finite");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

struct Interval {
  double lo = 0.0, hi = 0.0;
};

/// Fisher z-transform confidence interval for a correlation from n pairs.
inline Interval fisher_ci(double rho, long n, double level = 0.95) {
  if (n <= 3) fail(Errc::DegenerateN, "Fisher interval needs n > 3, got " + std::to_string(n));
  if (!(std::abs(rho) < 1.0)) fail(Errc::BadBounds, "|rho| must be < 1");
  if (!(level >= 0.0 && level < 1.0)) fail(Errc::BadBounds, "level must lie in [0, 1)");
  const double z = std::atanh(rho);
  const double se = 1.0 / std::sqrt(static_cast<double>(n - 3));
  const double q = level == 0.0 ? 0.0 : boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
  return {std::tanh(z - q * se), std::tanh(z + q * se)};
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2.
/// labels: 1 = positive (e.g. an error), 0 = negative.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(Errc::LengthMismatch, "auroc inputs differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) fail(Errc::BadBounds, "auroc labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) fail(Errc::SingleClass, "auroc needs both classes present");
  const auto r = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (labels[i] == 1) rank_sum += r[i];
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

struct AurocBin {
  std::string name;
  double lo = 0.0, hi = 0.0;  // [lo, hi)
  std::size_t count = 0;
  std::optional<double> auroc;  // absent unless both classes occur
};

struct StratifiedAuroc {
  std::vector<AurocBin> bins;  // Low, Medium, High
  std::optional<double> delta;  // High - Low, when both are present
};

inline constexpr double kLowAmbiguity = 0.5;
inline constexpr double kHighAmbiguity = 1.5;

/// AUROC of `scores` for detecting `errors` within ambiguity bins
/// Low (H < 0.5), Medium (0.5 <= H < 1.5), High (H >= 1.5).
inline StratifiedAuroc stratified_auroc(std::span<const double> scores, std::span<const int> errors,
                                        std::span<const double> ambiguity, double low_edge = kLowAmbiguity,
                                        double high_edge = kHighAmbiguity) {
  if (scores.size() != errors.size() || scores.size() != ambiguity.size())
    fail(Errc::LengthMismatch, "stratified auroc inputs differ in length");
  StratifiedAuroc out;
  const double inf = std::numeric_limits<double>::infinity();
  out.bins = {{"low", -inf, low_edge, 0, std::nullopt},
              {"medium", low_edge, high_edge, 0, std::nullopt},
              {"high", high_edge, inf, 0, std::nullopt}};
  for (auto& bin : out.bins) {
    std::vector<double> s;
    std::vector<int> e;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (ambiguity[i] >= bin.lo && ambiguity[i] < bin.hi) {
        s.push_back(scores[i]);
        e.push_back(errors[i]);
      }
    bin.count = s.size();
    const auto pos = static_cast<std::size_t>(std::count(e.begin(), e.end(), 1));
    if (pos > 0 && pos < e.size()) bin.auroc = auroc(s, e);
  }
  if (out.bins[0].auroc && out.bins[2].auroc) out.delta = *out.bins[2].auroc - *out.bins[0].auroc;
  return out;
}

enum class Action { trust, data, review, abstain };

inline constexpr std::array<Action, 4> kActions{Action::trust, Action::data, Action::review, Action::abstain};

constexpr std::string_view action_name(Action a) noexcept {
  switch (a) {
    case Action::trust: return "TRUST";
    case Action::data: return "DATA";
    case Action::review: return "REVIEW";
    case Action::abstain: return "ABSTAIN";
  }
  return "?";
}

/// High means strictly above the threshold.
constexpr Action route(double u_epi, double u_ale, double t_epi, double t_ale) noexcept {
  const bool high_e = u_epi > t_epi, high_a = u_ale > t_ale;
  if (!high_e && !high_a) return Action::trust;
  if (high_e && !high_a) return Action::data;
  if (!high_e && high_a) return Action::review;
  return Action::abstain;
}

/// 1 - (sample standard deviation / mean) of the counts.
inline double balance(std::span<const std::size_t> counts) {
  if (counts.size() < 2) fail(Errc::TooFewSamples, "balance needs at least two counts");
  double mean = 0.0;
  for (auto c : counts) mean += static_cast<double>(c);
  mean /= static_cast<double>(counts.size());
  if (mean == 0.0) fail(Errc::DegenerateInput, "balance of all-zero counts");
  double ss = 0.0;
  for (auto c : counts) ss += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
  const double sd = std::sqrt(ss / static_cast<double>(counts.size() - 1));
  return 1.0 - sd / mean;
}

inline double median(std::vector<double> v) {
  if (v.empty()) fail(Errc::EmptyDataset, "median of nothing");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

struct QuadrantRow {
  Action action = Action::trust;
  std::size_t count = 0;
  std::optional<double> accuracy;  // absent for empty quadrants
};

struct QuadrantTable {
  std::array<QuadrantRow, 4> rows;
  double t_epi = 0.0, t_ale = 0.0;
  double balance = 0.0;
  bool degenerate_medians = false;  // more than half the values tie with a threshold
  std::size_t total = 0;

  const QuadrantRow& operator[](Action a) const { return rows[static_cast<std::size_t>(a)]; }
};

/// Routes each prediction into a quadrant. `correct[i]` marks task-correct
/// predictions (for per-quadrant accuracy); thresholds default to medians.
inline QuadrantTable quadrant_route(std::span<const Prediction> preds, std::span<const int> correct,
                                    std::optional<std::pair<double, double>> thresholds = std::nullopt) {
  if (preds.size() < 4) fail(Errc::DegenerateInput, "routing needs at least 4 predictions, got " + std::to_string(preds.size()));
  if (correct.size() != preds.size()) fail(Errc::LengthMismatch, "one correctness flag per prediction");
  QuadrantTable t;
  t.total = preds.size();
  std::vector<double> ue, ua;
  for (const auto& p : preds) {
    ue.push_back(p.u_epi);
    ua.push_back(p.u_ale);
  }
  if (thresholds) {
    t.t_epi = thresholds->first;
    t.t_ale = thresholds->second;
  } else {
    t.t_epi = median(ue);
    t.t_ale = median(ua);
    const auto ties = [](const std::vector<double>& v, double m) {
      return static_cast<std::size_t>(std::count(v.begin(), v.end(), m));
    };
    t.degenerate_medians = 2 * ties(ue, t.t_epi) > ue.size() || 2 * ties(ua, t.t_ale) > ua.size();
  }
  std::array<std::size_t, 4> hits{};
  for (std::size_t q = 0; q < 4; ++q) t.rows[q].action = kActions[q];
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto q = static_cast<std::size_t>(route(ue[i], ua[i], t.t_epi, t.t_ale));
    ++t.rows[q].count;
    hits[q] += correct[i] ? 1 : 0;
  }
  std::array<std::size_t, 4> counts{};
  for (std::size_t q = 0; q < 4; ++q) {
    counts[q] = t.rows[q].count;
    if (counts[q] > 0) t.rows[q].accuracy = static_cast<double>(hits[q]) / static_cast<double>(counts[q]);
  }
  t.balance = balance(counts);
  return t;
}

}  // namespace ccbm
