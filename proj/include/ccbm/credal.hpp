#pragma once

// Numerical primitives: simplex operations, entropy, activations and the
// diagonal ellipsoidal credal set with its closed-form Hausdorff KL.
//
// Entropies are in nats. Credal sets live in logit space: the set is
// { softmax(z) : sum_k (z_k - mu_k)^2 / sigma_k^2 <= 1 }.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "ccbm/error.hpp"

namespace ccbm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Scales below this are treated as this value wherever a log is taken.
inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kSimplexTolerance = 1e-9;

inline double softplus(double x) noexcept {
  // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

/// d softplus / dx.
inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double gelu(double x) noexcept {
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

inline double gelu_grad(double x) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Probability vector: nonnegative, sums to one within kSimplexTolerance.
class SimplexVector {
 public:
  explicit SimplexVector(Vector p) : p_(std::move(p)) {
    if (p_.size() == 0) fail(Errc::NotOnSimplex, "empty probability vector");
    double sum = 0.0;
    for (Eigen::Index k = 0; k < p_.size(); ++k) {
      if (!(p_[k] >= 0.0) || !std::isfinite(p_[k]))
        fail(Errc::NotOnSimplex, "entry " + std::to_string(k) + " is negative or not finite");
      sum += p_[k];
    }
    if (std::abs(sum - 1.0) > kSimplexTolerance)
      fail(Errc::NotOnSimplex, "entries sum to " + std::to_string(sum));
  }

  /// Skips validation; for values that are on the simplex by construction.
  static SimplexVector trusted(Vector p) noexcept {
    SimplexVector s;
    s.p_ = std::move(p);
    return s;
  }

  const Vector& values() const noexcept { return p_; }
  Eigen::Index size() const noexcept { return p_.size(); }
  double operator[](Eigen::Index k) const noexcept { return p_[k]; }

 private:
  SimplexVector() = default;
  Vector p_;
};

/// Max-subtracted softmax; invariant under additive shifts of z.
template <typename Derived>
Vector softmax_values(const Eigen::MatrixBase<Derived>& z) {
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).unaryExpr([](double v) { return std::exp(v); }).matrix();
  return e / e.sum();
}

template <typename Derived>
SimplexVector softmax(const Eigen::MatrixBase<Derived>& z) {
  return SimplexVector::trusted(softmax_values(z));
}

/// Shannon entropy in nats with 0 ln 0 = 0.
template <typename Derived>
double entropy_values(const Eigen::MatrixBase<Derived>& p) noexcept {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) h -= p[k] * std::log(p[k]);
  return h;
}

inline double entropy(const SimplexVector& p) noexcept { return entropy_values(p.values()); }

/// Diagonal ellipsoid in logit space: center mu, per-axis radii sigma.
class CredalEllipsoid {
 public:
  CredalEllipsoid(Vector mu, Vector sigma) : mu_(std::move(mu)), sigma_(std::move(sigma)) {
    if (mu_.size() != sigma_.size())
      fail(Errc::DimensionMismatch, "ellipsoid center has " + std::to_string(mu_.size()) +
                                        " axes but scales have " + std::to_string(sigma_.size()));
    for (Eigen::Index k = 0; k < mu_.size(); ++k) {
      if (!std::isfinite(mu_[k])) fail(Errc::NaNDetected, "ellipsoid center is not finite");
      if (!(sigma_[k] > 0.0) || !std::isfinite(sigma_[k]))
        fail(Errc::BadBounds, "ellipsoid scale " + std::to_string(k) + " must be positive and finite");
    }
  }

  const Vector& mu() const noexcept { return mu_; }
  const Vector& sigma() const noexcept { return sigma_; }
  Eigen::Index dim() const noexcept { return mu_.size(); }

 private:
  Vector mu_;
  Vector sigma_;
};

inline double sign0(double x) noexcept { return (x > 0.0) - (x < 0.0); }

/// Boundary point maximizing |mu|: mu_k + sign(mu_k) sigma_k, with sign(0) = 0.
inline Vector worst_case_mean(const CredalEllipsoid& ell) {
  Vector out(ell.dim());
  for (Eigen::Index k = 0; k < ell.dim(); ++k)
    out[k] = ell.mu()[k] + sign0(ell.mu()[k]) * ell.sigma()[k];
  return out;
}

struct HausdorffKl {
  double value = 0.0;
  Vector d_mu;     // partial derivatives w.r.t. the center
  Vector d_sigma;  // partial derivatives w.r.t. the scales
};

/// Closed-form supremum KL from the ellipsoid's members N(m, diag(sigma^2)) to
/// N(0, sigma_prior^2 I), together with its gradient. Scales are floored at
/// kSigmaFloor; below the floor the scale gradient is zero.
inline HausdorffKl hausdorff_kl_with_grad(const CredalEllipsoid& ell, double sigma_prior) {
  if (!(sigma_prior > 0.0) || !std::isfinite(sigma_prior))
    fail(Errc::NonPositivePrior, "sigma_prior must be positive, got " + std::to_string(sigma_prior));
  const double prior_var = sigma_prior * sigma_prior;
  const Eigen::Index n = ell.dim();
  HausdorffKl r;
  r.d_mu = Vector::Zero(n);
  r.d_sigma = Vector::Zero(n);
  double acc = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double raw = ell.sigma()[k];
    const bool floored = raw < kSigmaFloor;
    const double s = floored ? kSigmaFloor : raw;
    const double sg = sign0(ell.mu()[k]);
    const double m = ell.mu()[k] + sg * s;
    const double ratio = (s * s) / prior_var;
    acc += m * m / prior_var + ratio - 1.0 - std::log(ratio);
    r.d_mu[k] = m / prior_var;
    if (!floored) r.d_sigma[k] = sg * m / prior_var + s / prior_var - 1.0 / s;
  }
  r.value = std::max(0.0, 0.5 * acc);
  return r;
}

inline double hausdorff_kl(const CredalEllipsoid& ell, double sigma_prior) {
  return hausdorff_kl_with_grad(ell, sigma_prior).value;
}

}  // namespace ccbm
