#pragma once

// Loss terms of the training objective and their exact reverse-mode gradients.
//
//   total = task + l_c concept + l_e (epi_err + beta epi_kl) + l_a ale
//         + l_o orth + l_d decorr
//
// Stop-gradient: the epistemic error target phi(1 - p_label) and the credal
// center used inside the Hausdorff KL are constants during differentiation,
// as are the annotator-entropy targets of the aleatoric term. Consequently
// phi_epi only ever receives gradient from the epistemic terms and phi_ale
// only from the aleatoric term, unless the decorrelation penalty is switched on.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ccbm/credal.hpp"
#include "ccbm/error.hpp"
#include "ccbm/model.hpp"
#include "ccbm/parallel.hpp"

namespace ccbm {

/// One training example as seen by the losses. `entropy` holds the per-concept
/// annotator entropies (targets only).
struct Sample {
  Vector h;
  int task = 0;
  std::vector<int> concepts;
  Vector entropy;
};

using Batch = std::span<const Sample>;

struct LossConfig {
  double lambda_concept = 1.0;
  double lambda_epi = 1.5;
  double lambda_ale = 2.0;
  double beta = 0.001;
  double lambda_orth = 0.1;
  double lambda_decorr = 0.0;
  double alpha = 1.45;  // sigma_max - sigma_min: maps e in [0,1] onto the full range
  double sigma_min = 0.05;
  double sigma_max = 1.5;
  double sigma_prior = 1.0;
  bool literal_orth = false;

  void validate() const {
    for (double w : {lambda_concept, lambda_epi, lambda_ale, beta, lambda_orth, lambda_decorr, alpha})
      if (!(w >= 0.0) || !std::isfinite(w)) fail(Errc::InvalidConfig, "loss weights must be finite and >= 0");
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max))
      fail(Errc::BadBounds, "require 0 < sigma_min < sigma_max");
    if (!(sigma_prior > 0.0)) fail(Errc::NonPositivePrior, "sigma_prior must be positive");
  }
};

/// Multiplier applied to each batch-mean term when forming the objective.
struct TermWeights {
  double task = 0, concept_ce = 0, epi_err = 0, epi_kl = 0, ale = 0, orth = 0, decorr = 0;

  static TermWeights from(const LossConfig& c) {
    return {1.0,
            c.lambda_concept,
            c.lambda_epi,
            c.lambda_epi * c.beta,
            c.lambda_ale,
            c.lambda_orth,
            c.lambda_decorr};
  }
};

struct LossBreakdown {
  double task = 0, concept_ce = 0, epi_err = 0, epi_kl = 0, ale = 0, orth = 0, decorr = 0;
  double total = 0;
  bool decorr_degenerate = false;
};

// ---------------------------------------------------------------------------
// Individual terms

inline double loss_task(const Vector& task_logits, int y) {
  if (y < 0 || y >= task_logits.size())
    fail(Errc::IndexOutOfRange, "task label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(task_logits.size()) + ")");
  // (max - z_y) + log1p(sum over non-max entries), exact for confident logits
  Eigen::Index top = 0;
  const double m = task_logits.maxCoeff(&top);
  double rest = 0.0;
  for (Eigen::Index k = 0; k < task_logits.size(); ++k)
    if (k != top) rest += std::exp(task_logits[k] - m);
  return (m - task_logits[y]) + std::log1p(rest);
}

/// Mean over concepts of -ln p_label. Rows of p are concepts.
inline double loss_concept(const Matrix& p_concepts, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != p_concepts.rows())
    fail(Errc::LengthMismatch, "expected one label per concept");
  double acc = 0.0;
  for (Eigen::Index c = 0; c < p_concepts.rows(); ++c) {
    const int l = labels[static_cast<std::size_t>(c)];
    if (l < 0 || l >= p_concepts.cols())
      fail(Errc::IndexOutOfRange, "concept label " + std::to_string(l) + " outside [0, " +
                                      std::to_string(p_concepts.cols()) + ")");
    acc -= std::log(p_concepts(c, l));
  }
  return acc / static_cast<double>(p_concepts.rows());
}

/// Affine error-to-scale map alpha e + sigma_min, clamped into [sigma_min, sigma_max].
inline double phi_scale(double e, double alpha, double sigma_min, double sigma_max) {
  if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) fail(Errc::BadBounds, "require 0 < sigma_min < sigma_max");
  if (std::isnan(e)) fail(Errc::NaNDetected, "error-to-scale input is NaN");
  if (!(e >= 0.0 && e <= 1.0)) fail(Errc::BadBounds, "error " + std::to_string(e) + " outside [0, 1]");
  return std::clamp(alpha * e + sigma_min, sigma_min, sigma_max);
}

inline double loss_ale(const Vector& sigma_ale, const Vector& targets) {
  if (sigma_ale.size() != targets.size())
    fail(Errc::LengthMismatch, "aleatoric head has " + std::to_string(sigma_ale.size()) + " outputs but " +
                                   std::to_string(targets.size()) + " targets");
  return (sigma_ale - targets).squaredNorm() / static_cast<double>(sigma_ale.size());
}

/// Per-concept prediction error 1 - p_label (a stop-gradient quantity).
inline Vector concept_errors(const Matrix& p_concepts, std::span<const int> labels) {
  Vector e(p_concepts.rows());
  for (Eigen::Index c = 0; c < p_concepts.rows(); ++c) {
    const int l = labels[static_cast<std::size_t>(c)];
    if (l < 0 || l >= p_concepts.cols()) fail(Errc::IndexOutOfRange, "concept label out of range");
    e[c] = std::clamp(1.0 - p_concepts(c, l), 0.0, 1.0);
  }
  return e;
}

struct EpiLoss {
  double err = 0;  // (1/C) sum_c (mean_k sigma_epi - phi(e_c))^2
  double kl = 0;   // (1/C) sum_c D_H(ellipsoid_c)
  double combined(double beta) const { return err + beta * kl; }
};

/// Epistemic loss from explicit inputs: scales (C x K), stop-gradient errors
/// (C) and credal centers (C x K).
inline EpiLoss loss_epi(const Matrix& sigma_epi, const Vector& errors, const Matrix& centers,
                        const LossConfig& cfg) {
  const Eigen::Index C = sigma_epi.rows();
  if (errors.size() != C || centers.rows() != C || centers.cols() != sigma_epi.cols())
    fail(Errc::LengthMismatch, "epistemic loss inputs disagree in shape");
  EpiLoss out;
  for (Eigen::Index c = 0; c < C; ++c) {
    const double target = phi_scale(errors[c], cfg.alpha, cfg.sigma_min, cfg.sigma_max);
    const double diff = sigma_epi.row(c).mean() - target;
    out.err += diff * diff;
    out.kl += hausdorff_kl(CredalEllipsoid(centers.row(c).transpose(), sigma_epi.row(c).transpose()),
                           cfg.sigma_prior);
  }
  out.err /= static_cast<double>(C);
  out.kl /= static_cast<double>(C);
  return out;
}

/// Convenience overload computing the errors from concept probabilities.
inline EpiLoss loss_epi(const Matrix& sigma_epi, const Matrix& p_concepts, std::span<const int> labels,
                        const Matrix& centers, const LossConfig& cfg) {
  return loss_epi(sigma_epi, concept_errors(p_concepts, labels), centers, cfg);
}

struct Correlation {
  double value = 0.0;
  bool degenerate = false;  // a constant input; value is defined as 0
};

/// Pearson correlation; constant inputs give 0 with the degenerate flag.
inline Correlation pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(Errc::LengthMismatch, "correlation inputs differ in length");
  const std::size_t n = a.size();
  if (n < 2) return {0.0, true};
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return {0.0, true};
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), false};
}

/// Squared batch Pearson correlation between the two uncertainty readouts.
inline Correlation loss_decorr(std::span<const double> u_epi, std::span<const double> u_ale) {
  if (u_epi.size() < 3) fail(Errc::TooFewSamples, "decorrelation needs a batch of at least 3");
  const Correlation r = pearson(u_epi, u_ale);
  return {r.value * r.value, r.degenerate};
}

namespace detail {

/// d(r^2)/da_i and d(r^2)/db_i for the Pearson correlation r(a, b).
inline void squared_pearson_grad(std::span<const double> a, std::span<const double> b, std::vector<double>& da,
                                 std::vector<double>& db) {
  const std::size_t n = a.size();
  da.assign(n, 0.0);
  db.assign(n, 0.0);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return;
  const double denom = std::sqrt(saa * sbb);
  const double r = sab / denom;
  for (std::size_t i = 0; i < n; ++i) {
    const double ac = a[i] - ma, bc = b[i] - mb;
    da[i] = 2.0 * r * (bc / denom - r * ac / saa);
    db[i] = 2.0 * r * (ac / denom - r * bc / sbb);
  }
}

inline double log_variance_sum(const Matrix& sigma) {
  double u = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) u += 2.0 * std::log(std::max(sigma.data()[i], kSigmaFloor));
  return u;
}

/// Stop-gradient values captured at a base point; lets finite differences
/// evaluate exactly the surrogate objective that backward differentiates.
struct FrozenTargets {
  std::vector<Vector> errors;   // per example, per concept
  std::vector<Matrix> centers;  // per example, C x K
};

struct EvalOptions {
  const std::vector<HeadMasks>* masks = nullptr;
  Wiring wiring = Wiring::standard;
  const FrozenTargets* frozen = nullptr;
  bool want_grad = true;
};

struct ExampleEval {
  ForwardOutput fwd;
  Vector errors;   // stop-gradient concept errors
  Matrix centers;  // stop-gradient credal centers
  double task = 0, concept_ce = 0, epi_err = 0, epi_kl = 0, ale = 0;
  double u_epi = 0, u_ale = 0;
};

inline void check_sample(const Sample& s, const ModelDims& d) {
  if (s.h.size() != d.d) fail(Errc::DimensionMismatch, "sample embedding width mismatch");
  if (static_cast<int>(s.concepts.size()) != d.concepts || s.entropy.size() != d.concepts)
    fail(Errc::LengthMismatch, "sample must carry one label and one entropy per concept");
  if (s.task < 0 || s.task >= d.tasks) fail(Errc::IndexOutOfRange, "task label out of range");
}

inline ExampleEval eval_example(const Sample& s, const ModelParams& p, const LossConfig& cfg,
                                const HeadMasks* masks, Wiring wiring, const Vector* frozen_err,
                                const Matrix* frozen_centers) {
  check_sample(s, p.dims);
  ExampleEval ev;
  ev.fwd = forward_impl(s.h, p, masks, wiring, &s.entropy);
  const auto& o = ev.fwd;
  ev.errors = frozen_err ? *frozen_err : concept_errors(o.p_concepts, s.concepts);
  ev.centers = frozen_centers ? *frozen_centers : o.mu;
  ev.task = loss_task(o.task_logits, s.task);
  ev.concept_ce = loss_concept(o.p_concepts, s.concepts);
  const EpiLoss epi = loss_epi(o.sigma_epi, ev.errors, ev.centers, cfg);
  ev.epi_err = epi.err;
  ev.epi_kl = epi.kl;
  ev.ale = loss_ale(o.sigma_ale, s.entropy);
  ev.u_epi = log_variance_sum(o.sigma_epi);
  ev.u_ale = o.sigma_ale.mean();
  return ev;
}

/// Backpropagates one example's weighted contributions into g. `scale` is
/// 1/B; d_u_epi and d_u_ale are this example's decorrelation upstream values.
inline void backward_example(const Sample& s, const ExampleEval& ev, const ModelParams& p, const LossConfig& cfg,
                             const TermWeights& w, double scale, double d_u_epi, double d_u_ale, Wiring wiring,
                             GradientSet& g) {
  const auto& o = ev.fwd;
  const int C = p.dims.concepts, K = p.dims.classes;
  const double invC = 1.0 / static_cast<double>(C);

  // Task head and concept probabilities.
  Matrix d_mu = Matrix::Zero(C, K);
  if (w.task != 0.0) {
    Vector d_logits = softmax_values(o.task_logits);
    d_logits[s.task] -= 1.0;
    d_logits *= w.task * scale;
    Vector flat(C * K);
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < K; ++k) flat[c * K + k] = o.p_concepts(c, k);
    g.psi_w.noalias() += d_logits * flat.transpose();
    g.psi_b += d_logits;
    const Vector d_flat = p.psi_w.transpose() * d_logits;
    for (int c = 0; c < C; ++c) {
      double inner = 0.0;
      for (int k = 0; k < K; ++k) inner += d_flat[c * K + k] * o.p_concepts(c, k);
      for (int k = 0; k < K; ++k) d_mu(c, k) += o.p_concepts(c, k) * (d_flat[c * K + k] - inner);
    }
  }
  if (w.concept_ce != 0.0) {
    const double f = w.concept_ce * scale * invC;
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < K; ++k)
        d_mu(c, k) += f * (o.p_concepts(c, k) - (k == s.concepts[static_cast<std::size_t>(c)] ? 1.0 : 0.0));
  }

  // Epistemic head.
  Matrix d_sigma_epi = Matrix::Zero(C, K);
  if (w.epi_err != 0.0) {
    for (int c = 0; c < C; ++c) {
      const double target = phi_scale(ev.errors[c], cfg.alpha, cfg.sigma_min, cfg.sigma_max);
      const double diff = o.sigma_epi.row(c).mean() - target;
      const double f = w.epi_err * scale * invC * 2.0 * diff / static_cast<double>(K);
      d_sigma_epi.row(c).array() += f;
    }
  }
  if (w.epi_kl != 0.0) {
    for (int c = 0; c < C; ++c) {
      const CredalEllipsoid ell(ev.centers.row(c).transpose(), o.sigma_epi.row(c).transpose());
      const HausdorffKl kl = hausdorff_kl_with_grad(ell, cfg.sigma_prior);
      d_sigma_epi.row(c) += (w.epi_kl * scale * invC) * kl.d_sigma.transpose();
    }
  }
  if (d_u_epi != 0.0) {
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < K; ++k)
        if (o.sigma_epi(c, k) >= kSigmaFloor) d_sigma_epi(c, k) += d_u_epi * 2.0 / o.sigma_epi(c, k);
  }

  // Aleatoric head.
  Vector d_sigma_ale = Vector::Zero(C);
  if (w.ale != 0.0) d_sigma_ale += (w.ale * scale * invC * 2.0) * (o.sigma_ale - s.entropy);
  if (d_u_ale != 0.0) d_sigma_ale.array() += d_u_ale * invC;
  if (wiring == Wiring::ale_into_concept_logits)
    for (int c = 0; c < C; ++c) d_sigma_ale[c] += d_mu.row(c).sum();

  Vector d_mu_out(C * K), d_epi_out(C * K);
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < K; ++k) {
      d_mu_out[c * K + k] = d_mu(c, k);
      d_epi_out[c * K + k] = d_sigma_epi(c, k) * sigmoid(o.epi_raw(c, k));
    }
  Vector d_ale_out(C);
  for (int c = 0; c < C; ++c) d_ale_out[c] = d_sigma_ale[c] * sigmoid(o.ale_raw[c]);

  const Vector d_h_mu = mlp_backward(p.phi_mu, p.layernorm, o.mu_trace, d_mu_out, g.phi_mu);
  const Vector d_h_epi = mlp_backward(p.phi_epi, p.layernorm, o.epi_trace, d_epi_out, g.phi_epi);
  const Vector d_h_ale = mlp_backward(p.phi_ale, p.layernorm, o.ale_trace, d_ale_out, g.phi_ale);
  g.w_mu.noalias() += d_h_mu * o.h.transpose();
  g.w_epi.noalias() += d_h_epi * o.h.transpose();
  g.w_ale.noalias() += d_h_ale * o.h.transpose();
}

inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) fail(Errc::NaNDetected, std::string("loss term '") + term + "' is not finite");
}

struct Evaluation {
  LossBreakdown loss;
  GradientSet grad;
  std::vector<ExampleEval> examples;
};

/// Shared engine for values and gradients under arbitrary term weights.
inline Evaluation evaluate(Batch batch, const ModelParams& p, const LossConfig& cfg, const TermWeights& w,
                           const EvalOptions& opt = {}) {
  if (batch.empty()) fail(Errc::EmptyDataset, "empty batch");
  const std::size_t B = batch.size();
  if (opt.masks && opt.masks->size() != B) fail(Errc::LengthMismatch, "need one dropout mask set per example");
  Evaluation out;
  out.examples.resize(B);
  parallel_for(B, [&](std::size_t i) {
    const HeadMasks* m = opt.masks ? &(*opt.masks)[i] : nullptr;
    const Vector* fe = opt.frozen ? &opt.frozen->errors[i] : nullptr;
    const Matrix* fc = opt.frozen ? &opt.frozen->centers[i] : nullptr;
    out.examples[i] = eval_example(batch[i], p, cfg, m, opt.wiring, fe, fc);
  });

  LossBreakdown& L = out.loss;
  std::vector<double> u_epi(B), u_ale(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& e = out.examples[i];
    L.task += e.task;
    L.concept_ce += e.concept_ce;
    L.epi_err += e.epi_err;
    L.epi_kl += e.epi_kl;
    L.ale += e.ale;
    u_epi[i] = e.u_epi;
    u_ale[i] = e.u_ale;
  }
  const double scale = 1.0 / static_cast<double>(B);
  L.task *= scale;
  L.concept_ce *= scale;
  L.epi_err *= scale;
  L.epi_kl *= scale;
  L.ale *= scale;
  L.orth = orth_penalty(p, cfg.literal_orth);
  if (B >= 3) {
    const Correlation dc = loss_decorr(u_epi, u_ale);
    L.decorr = dc.value;
    L.decorr_degenerate = dc.degenerate;
  } else {
    L.decorr = 0.0;
    L.decorr_degenerate = true;
  }
  check_finite(L.task, "task");
  check_finite(L.concept_ce, "concept_ce");
  check_finite(L.epi_err, "epi_err");
  check_finite(L.epi_kl, "epi_kl");
  check_finite(L.ale, "ale");
  check_finite(L.orth, "orth");
  check_finite(L.decorr, "decorr");
  L.total = w.task * L.task + w.concept_ce * L.concept_ce + w.epi_err * L.epi_err + w.epi_kl * L.epi_kl +
            w.ale * L.ale + w.orth * L.orth + w.decorr * L.decorr;

  if (!opt.want_grad) return out;

  std::vector<double> d_u_epi(B, 0.0), d_u_ale(B, 0.0);
  if (w.decorr != 0.0 && !L.decorr_degenerate) {
    squared_pearson_grad(u_epi, u_ale, d_u_epi, d_u_ale);
    for (std::size_t i = 0; i < B; ++i) {
      d_u_epi[i] *= w.decorr;
      d_u_ale[i] *= w.decorr;
    }
  }

  // Fixed-size blocks reduced in index order: bit-identical for any thread count.
  constexpr std::size_t kBlock = 8;
  const std::size_t blocks = (B + kBlock - 1) / kBlock;
  std::vector<GradientSet> partial(blocks, zeros_like(p));
  parallel_for(
      blocks,
      [&](std::size_t b) {
        for (std::size_t i = b * kBlock; i < std::min(B, (b + 1) * kBlock); ++i)
          backward_example(batch[i], out.examples[i], p, cfg, w, scale, d_u_epi[i], d_u_ale[i], opt.wiring,
                           partial[b]);
      },
      1);
  out.grad = std::move(partial[0]);
  for (std::size_t b = 1; b < blocks; ++b) out.grad += partial[b];
  orth_penalty_grad(p, cfg.literal_orth, w.orth, out.grad);

  visit_tensors(
      [](std::string_view name, const auto& t) {
        if (!t.allFinite()) fail(Errc::NaNDetected, "gradient of " + std::string(name) + " is not finite");
      },
      out.grad);
  return out;
}

}  // namespace detail

struct BackwardResult {
  LossBreakdown loss;
  GradientSet grad;
};

/// Loss breakdown and exact gradient of the configured objective.
inline BackwardResult backward(Batch batch, const ModelParams& p, const LossConfig& cfg,
                               const std::vector<HeadMasks>* masks = nullptr) {
  detail::EvalOptions opt;
  opt.masks = masks;
  auto ev = detail::evaluate(batch, p, cfg, TermWeights::from(cfg), opt);
  return {ev.loss, std::move(ev.grad)};
}

/// Gradient of an arbitrary weighting of the terms (e.g. a single term).
inline BackwardResult backward_terms(Batch batch, const ModelParams& p, const LossConfig& cfg,
                                     const TermWeights& w) {
  auto ev = detail::evaluate(batch, p, cfg, w);
  return {ev.loss, std::move(ev.grad)};
}

/// Objective value only.
inline LossBreakdown evaluate_loss(Batch batch, const ModelParams& p, const LossConfig& cfg) {
  detail::EvalOptions opt;
  opt.want_grad = false;
  return detail::evaluate(batch, p, cfg, TermWeights::from(cfg), opt).loss;
}

/// Captures the stop-gradient quantities at params.
inline detail::FrozenTargets freeze_targets(Batch batch, const ModelParams& p, const LossConfig& cfg,
                                           const std::vector<HeadMasks>* masks = nullptr) {
  detail::EvalOptions opt;
  opt.want_grad = false;
  opt.masks = masks;
  auto ev = detail::evaluate(batch, p, cfg, TermWeights::from(cfg), opt);
  detail::FrozenTargets f;
  for (auto& e : ev.examples) {
    f.errors.push_back(e.errors);
    f.centers.push_back(e.centers);
  }
  return f;
}

/// Objective value with the stop-gradient quantities held at `frozen`; the
/// function whose exact derivative backward() returns.
inline double surrogate_loss(Batch batch, const ModelParams& p, const LossConfig& cfg, const TermWeights& w,
                             const detail::FrozenTargets& frozen) {
  detail::EvalOptions opt;
  opt.want_grad = false;
  opt.frozen = &frozen;
  return detail::evaluate(batch, p, cfg, w, opt).loss.total;
}

}  // namespace ccbm
