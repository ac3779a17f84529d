#pragma once

// Mechanical checks on the gradient: head isolation and finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ccbm/losses.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

inline constexpr double kIsolationTolerance = 1e-10;

struct TermLeak {
  std::string term;
  std::string head;  // "phi_ale" or "phi_epi"
  double max_abs = 0.0;
};

struct IsolationReport {
  double dev_ale = 0.0;  // max |grad_phi_ale(total) - l_a grad_phi_ale(ale)|
  double dev_epi = 0.0;  // max |grad_phi_epi(total) - l_e grad_phi_epi(epi_err + beta kl)|
  std::vector<TermLeak> leaks;  // foreign-term gradients reaching a head
  double max_leak = 0.0;
  bool coupled = false;       // decorrelation penalty active
  bool reads_targets = false;  // forward output depended on the entropy targets

  double max_deviation() const { return std::max(dev_ale, dev_epi); }
  bool passed() const {
    if (reads_targets) return false;
    if (coupled) return true;
    return max_deviation() <= kIsolationTolerance && max_leak == 0.0;
  }
};

namespace detail {

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

inline double mlp_max_abs(const Mlp& m) {
  double v = 0.0;
  for (const Matrix* t : {&m.w1, &m.w2}) v = std::max(v, t->size() ? t->cwiseAbs().maxCoeff() : 0.0);
  for (const Vector* t : {&m.b1, &m.ln_gain, &m.ln_bias, &m.b2})
    v = std::max(v, t->size() ? t->cwiseAbs().maxCoeff() : 0.0);
  return v;
}

/// max |a - s b| over one head's tensors.
inline double mlp_deviation(const Mlp& a, const Mlp& b, double s) {
  double v = 0.0;
  v = std::max(v, max_abs_diff(a.w1, s * b.w1));
  v = std::max(v, max_abs_diff(a.b1, s * b.b1));
  v = std::max(v, max_abs_diff(a.ln_gain, s * b.ln_gain));
  v = std::max(v, max_abs_diff(a.ln_bias, s * b.ln_bias));
  v = std::max(v, max_abs_diff(a.w2, s * b.w2));
  v = std::max(v, max_abs_diff(a.b2, s * b.b2));
  return v;
}

inline GradientSet term_grad(Batch batch, const ModelParams& p, const LossConfig& cfg, const TermWeights& w,
                             Wiring wiring) {
  EvalOptions opt;
  opt.wiring = wiring;
  return evaluate(batch, p, cfg, w, opt).grad;
}

inline bool forward_reads_targets(Batch batch, const ModelParams& p, Wiring wiring) {
  const std::size_t B = batch.size();
  for (std::size_t i = 0; i < B; ++i) {
    // Substitute another example's targets (or a constant shift when alone).
    Vector other = B > 1 ? batch[(i + 1) % B].entropy : Vector(batch[i].entropy.array() + 0.5);
    if (other == batch[i].entropy) other.array() += 0.5;
    const ForwardOutput a = forward_impl(batch[i].h, p, nullptr, wiring, &batch[i].entropy);
    const ForwardOutput b = forward_impl(batch[i].h, p, nullptr, wiring, &other);
    if (a.mu != b.mu || a.sigma_epi != b.sigma_epi || a.sigma_ale != b.sigma_ale ||
        a.task_logits != b.task_logits)
      return true;
  }
  return false;
}

inline IsolationReport isolation_report_impl(Batch batch, const ModelParams& p, const LossConfig& cfg,
                                             Wiring wiring) {
  IsolationReport r;
  r.coupled = cfg.lambda_decorr > 0.0;

  const GradientSet total = term_grad(batch, p, cfg, TermWeights::from(cfg), wiring);
  TermWeights only_ale;
  only_ale.ale = 1.0;
  TermWeights only_epi;
  only_epi.epi_err = 1.0;
  only_epi.epi_kl = cfg.beta;
  const GradientSet g_ale = term_grad(batch, p, cfg, only_ale, wiring);
  const GradientSet g_epi = term_grad(batch, p, cfg, only_epi, wiring);
  r.dev_ale = mlp_deviation(total.phi_ale, g_ale.phi_ale, cfg.lambda_ale);
  r.dev_epi = mlp_deviation(total.phi_epi, g_epi.phi_epi, cfg.lambda_epi);

  struct Term {
    const char* name;
    TermWeights w;
    bool epi, ale;  // which head the term legitimately owns
  };
  std::vector<Term> terms;
  terms.push_back({"task", {1, 0, 0, 0, 0, 0, 0}, false, false});
  terms.push_back({"concept", {0, 1, 0, 0, 0, 0, 0}, false, false});
  terms.push_back({"epi_err", {0, 0, 1, 0, 0, 0, 0}, true, false});
  terms.push_back({"epi_kl", {0, 0, 0, 1, 0, 0, 0}, true, false});
  terms.push_back({"ale", {0, 0, 0, 0, 1, 0, 0}, false, true});
  terms.push_back({"orth", {0, 0, 0, 0, 0, 1, 0}, false, false});
  if (r.coupled) terms.push_back({"decorr", {0, 0, 0, 0, 0, 0, 1}, false, false});
  for (const auto& t : terms) {
    const GradientSet g = term_grad(batch, p, cfg, t.w, wiring);
    if (!t.ale) {
      const double v = mlp_max_abs(g.phi_ale);
      if (v != 0.0) r.leaks.push_back({t.name, "phi_ale", v});
      if (std::string(t.name) != "decorr") r.max_leak = std::max(r.max_leak, v);
    }
    if (!t.epi) {
      const double v = mlp_max_abs(g.phi_epi);
      if (v != 0.0) r.leaks.push_back({t.name, "phi_epi", v});
      if (std::string(t.name) != "decorr") r.max_leak = std::max(r.max_leak, v);
    }
  }
  r.reads_targets = forward_reads_targets(batch, p, wiring);
  return r;
}

}  // namespace detail

/// Builds the isolation report without judging it.
inline IsolationReport isolation_report(Batch batch, const ModelParams& p, const LossConfig& cfg) {
  return detail::isolation_report_impl(batch, p, cfg, detail::Wiring::standard);
}

inline std::string describe(const IsolationReport& r) {
  std::string s = "dev_ale=" + std::to_string(r.dev_ale) + " dev_epi=" + std::to_string(r.dev_epi) +
                  " max_leak=" + std::to_string(r.max_leak);
  if (r.reads_targets) s += " forward reads annotator targets";
  for (const auto& l : r.leaks) s += " [" + l.term + "->" + l.head + " " + std::to_string(l.max_abs) + "]";
  return s;
}

/// Throws IsolationViolated when the report fails; otherwise returns it.
inline IsolationReport grad_isolation_check(const ModelParams& p, Batch batch, const LossConfig& cfg,
                                            detail::Wiring wiring = detail::Wiring::standard) {
  IsolationReport r = detail::isolation_report_impl(batch, p, cfg, wiring);
  if (!r.passed()) fail(Errc::IsolationViolated, describe(r));
  return r;
}

struct FdReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_rel_err = 0.0;
  std::string worst;  // tensor[index] with the largest relative error
  bool passed() const { return failures == 0; }
};

/// Central differences of the stop-gradient surrogate objective against
/// backward(), on `per_tensor` random coordinates of every tensor.
inline FdReport finite_difference_check(Batch batch, const ModelParams& p, const LossConfig& cfg,
                                        std::size_t per_tensor = 20, double step = 1e-4, std::uint64_t seed = 0,
                                        double rel_tol = 1e-5, double abs_tol = 1e-8) {
  const TermWeights w = TermWeights::from(cfg);
  const GradientSet analytic = backward(batch, p, cfg).grad;
  const detail::FrozenTargets frozen = freeze_targets(batch, p, cfg);
  CounterRng rng(seed, "gradcheck/coords");
  FdReport rep;
  ModelParams probe = p;
  visit_tensors(
      [&](std::string_view name, auto& t, const auto& g) {
        if (t.size() == 0) return;
        if (!p.layernorm && name.find(".ln_") != std::string_view::npos) return;  // unused without layernorm
        for (std::size_t i = 0; i < per_tensor; ++i) {
          const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t.size())));
          double& x = t.data()[idx];
          const double x0 = x;
          x = x0 + step;
          const double up = surrogate_loss(batch, probe, cfg, w, frozen);
          x = x0 - step;
          const double down = surrogate_loss(batch, probe, cfg, w, frozen);
          x = x0;
          const double numeric = (up - down) / (2.0 * step);
          const double a = g.data()[idx];
          const double err = std::abs(a - numeric);
          const double scale = std::max(std::abs(a), std::abs(numeric));
          const double rel = scale > 0.0 ? err / scale : 0.0;
          ++rep.checked;
          const bool ok = err <= abs_tol || err <= rel_tol * scale;
          if (!ok) ++rep.failures;
          if (err > abs_tol && rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst = std::string(name) + "[" + std::to_string(idx) + "]";
          }
        }
      },
      probe, analytic);
  return rep;
}

}  // namespace ccbm
