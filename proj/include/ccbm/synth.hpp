#pragma once

// Synthetic multi-annotator data with two planted, uncorrelated factors.
//
// Per example: E ~ U(0,1) (epistemic difficulty) and Amb ~ U(0,1) (ambiguity),
// Amb residualized on E and rescaled so their sample correlation is zero.
// Per concept: a true class c0, p* = (1 - a) onehot(c0) + a / K with
// a = ambiguity_strength * Amb, and annotator_counts ~ Multinomial(A, p*).
//
// Embedding layout (d = concept block + 4 + 4):
//   concept block  C segments; each holds a mixture of class prototypes around
//                  the majority label, plus noise. With probability
//                  epistemic_noise * E the segment is corrupted: it shows only
//                  the majority and a random other class, the latter with
//                  weight kappa ~ U(corruption_min, corruption_max).
//   E block        4 noisy copies of E
//   Amb block      2 noisy copies of Amb and 2 of the ground-truth entropy
//
// Task label: plurality vote of (majority label_c mod J) over concepts, concept 0
// breaking ties. Additive in the concepts, so a linear head can represent it exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ccbm/credal.hpp"
#include "ccbm/data.hpp"
#include "ccbm/error.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

struct SynthConfig {
  int n = 2000;
  int d = 32;
  int C = 3;
  int K = 6;
  int J = 3;
  int A = 5;
  double ambiguity_strength = 0.8;
  double epistemic_noise = 0.5;
  std::uint64_t seed = 0;

  // generator shape (not part of the ambiguity/noise contract)
  double vote_blend = 0.35;    // weight of the vote shares in a clean segment
  double input_noise = 0.15;    // std of isotropic noise on the concept block
  double factor_noise = 0.05;  // std of noise on the factor blocks
  double corruption_min = 0.7;  // corrupted segments blend in kappa ~ U(corruption_min, corruption_max)
  double corruption_max = 1.0;

  static constexpr int kFactorWidth = 8;

  void validate() const {
    if (n < 1 || C < 1 || K < 2 || J < 1 || A < 1) fail(Errc::InvalidConfig, "n, C, J, A must be >= 1 and K >= 2");
    if (d % 2 != 0) fail(Errc::OddDimension, "d=" + std::to_string(d) + " must be even");
    if (d - kFactorWidth < C) fail(Errc::InvalidConfig, "d must leave at least one coordinate per concept after the 8 factor coordinates");
    if (!(ambiguity_strength >= 0.0 && ambiguity_strength <= 1.0))
      fail(Errc::InvalidConfig, "ambiguity_strength must lie in [0, 1]");
    if (!(epistemic_noise >= 0.0 && epistemic_noise <= 1.0)) fail(Errc::InvalidConfig, "epistemic_noise must lie in [0, 1]");
    if (!(vote_blend >= 0.0 && vote_blend <= 1.0)) fail(Errc::InvalidConfig, "vote_blend must lie in [0, 1]");
    if (!(input_noise >= 0.0) || !(factor_noise >= 0.0)) fail(Errc::InvalidConfig, "noise levels must be >= 0");
    if (!(corruption_min >= 0.0 && corruption_min <= corruption_max && corruption_max <= 1.0))
      fail(Errc::InvalidConfig, "need 0 <= corruption_min <= corruption_max <= 1");
  }
};

/// Planted factors kept alongside a generated dataset (for diagnostics and tests).
struct SynthFactors {
  std::vector<double> E, Amb;
  std::vector<int> corrupted;  // n x C, 1 where the segment was corrupted
};

namespace detail {

/// Residualizes b on a and min-max rescales into [0, 1]; exact zero sample correlation.
inline void decorrelate_unit(const std::vector<double>& a, std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n < 3) return;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
  }
  const double slope = saa > 0 ? sab / saa : 0.0;
  for (std::size_t i = 0; i < n; ++i) b[i] -= slope * (a[i] - ma);
  const auto [lo, hi] = std::minmax_element(b.begin(), b.end());
  const double l = *lo, span = *hi - *lo;
  for (auto& v : b) v = span > 0 ? (v - l) / span : 0.5;
}

/// Task scores of concept c taking class k: a vote for class k mod J, concept 0
/// weighted 1.5 so plurality ties resolve to it.
inline Vector task_vote(int c, int k, int J) {
  Vector v = Vector::Zero(J);
  v[k % J] = c == 0 ? 1.5 : 1.0;
  return v;
}

}  // namespace detail

/// Mean of H[p*] for the planted ambiguity level `a` with K classes.
inline double planted_entropy(double a, int K) {
  Vector p = Vector::Constant(K, a / K);
  p[0] += 1.0 - a;
  return entropy_values(p);
}

inline Dataset synth_generate(const SynthConfig& cfg, SynthFactors* factors = nullptr) {
  cfg.validate();
  const int n = cfg.n, C = cfg.C, K = cfg.K, d = cfg.d;
  const int concept_width = d - SynthConfig::kFactorWidth;
  // segment c spans [seg_begin(c), seg_begin(c+1))
  const auto seg_begin = [&](int c) { return c * concept_width / C; };

  Dataset ds;
  ds.n = n;
  ds.d = d;
  ds.C = C;
  ds.K = K;
  ds.J = cfg.J;
  ds.A = cfg.A;
  ds.embeddings.assign(static_cast<std::size_t>(n) * d, 0.0f);
  ds.task.assign(n, 0);
  ds.concepts.assign(static_cast<std::size_t>(n) * C, 0);
  ds.counts.assign(static_cast<std::size_t>(n) * C * K, 0);
  ds.true_entropy.assign(static_cast<std::size_t>(n) * C, 0.0);
  ds.splits = default_splits(static_cast<std::size_t>(n));

  // prototypes: C x K unit-variance vectors per segment
  CounterRng proto_rng(cfg.seed, "synth/prototypes");
  std::vector<std::vector<Vector>> proto(C, std::vector<Vector>(K));
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < K; ++k) {
      const int w = seg_begin(c + 1) - seg_begin(c);
      proto[c][k].resize(w);
      for (int j = 0; j < w; ++j) proto[c][k][j] = proto_rng.normal();
    }

  CounterRng factor_rng(cfg.seed, "synth/factors");
  std::vector<double> E(n), Amb(n);
  for (int i = 0; i < n; ++i) {
    E[i] = factor_rng.uniform();
    Amb[i] = factor_rng.uniform();
  }
  detail::decorrelate_unit(E, Amb);

  const CounterRng example_base(cfg.seed, "synth/examples");
  if (factors) {
    factors->E = E;
    factors->Amb = Amb;
    factors->corrupted.assign(static_cast<std::size_t>(n) * C, 0);
  }

  std::vector<double> p_star(K);
  std::vector<int> cnt(K);
  for (int i = 0; i < n; ++i) {
    CounterRng r = example_base.fork(static_cast<std::uint64_t>(i));
    const double a = cfg.ambiguity_strength * Amb[i];
    const double corrupt_p = cfg.epistemic_noise * E[i];
    float* row = ds.embeddings.data() + static_cast<std::size_t>(i) * d;
    Vector task_score = Vector::Zero(cfg.J);
    double h_star_mean = 0.0;
    for (int c = 0; c < C; ++c) {
      const int c0 = static_cast<int>(r.below(K));
      for (int k = 0; k < K; ++k) p_star[k] = a / K + (k == c0 ? 1.0 - a : 0.0);
      std::fill(cnt.begin(), cnt.end(), 0);
      for (int v = 0; v < cfg.A; ++v) {
        const double u = r.uniform();
        double acc = 0.0;
        int pick = K - 1;
        for (int k = 0; k < K; ++k) {
          acc += p_star[k];
          if (u < acc) {
            pick = k;
            break;
          }
        }
        ++cnt[pick];
      }
      const int maj = majority(cnt);
      const std::size_t base = static_cast<std::size_t>(i) * C + c;
      ds.concepts[base] = maj;
      for (int k = 0; k < K; ++k) ds.counts[base * K + k] = cnt[k];
      const double hs = entropy_values(Eigen::Map<const Vector>(p_star.data(), K));
      ds.true_entropy[base] = hs;
      h_star_mean += hs / C;
      task_score += detail::task_vote(c, maj, cfg.J);

      // mixture weights over the K prototypes, centred on the majority
      std::vector<double> w(K, 0.0);
      for (int k = 0; k < K; ++k) w[k] = cfg.vote_blend * cnt[k] / static_cast<double>(cfg.A);
      w[maj] += 1.0 - cfg.vote_blend;
      const bool corrupt = r.uniform() < corrupt_p;
      if (corrupt) {
        const int other = (maj + 1 + static_cast<int>(r.below(K - 1))) % K;
        const double kappa = r.uniform(cfg.corruption_min, cfg.corruption_max);
        std::fill(w.begin(), w.end(), 0.0);
        w[maj] = 1.0 - kappa;
        w[other] = kappa;
        if (factors) factors->corrupted[base] = 1;
      }
      for (int j = seg_begin(c); j < seg_begin(c + 1); ++j) {
        double v = 0.0;
        for (int k = 0; k < K; ++k) v += w[k] * proto[c][k][j - seg_begin(c)];
        row[j] = static_cast<float>(v + cfg.input_noise * r.normal());
      }
    }
    task_score.maxCoeff(&ds.task[i]);

    const double h_scale = std::log(static_cast<double>(K));
    float* f = row + concept_width;
    for (int j = 0; j < 4; ++j) f[j] = static_cast<float>(2.0 * E[i] - 1.0 + cfg.factor_noise * r.normal());
    for (int j = 4; j < 6; ++j) f[j] = static_cast<float>(2.0 * Amb[i] - 1.0 + cfg.factor_noise * r.normal());
    for (int j = 6; j < 8; ++j)
      f[j] = static_cast<float>(2.0 * h_star_mean / h_scale - 1.0 + cfg.factor_noise * r.normal());
  }
  detail::finalize(ds);
  return ds;
}

}  // namespace ccbm
