#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "ccbm/credal.hpp"
#include "ccbm/rng.hpp"

using namespace ccbm;

namespace {

// ln(1 + e^x) for x << 0 via the alternating series in long double.
long double softplus_series(long double x) {
  const long double t = std::exp(x);
  long double sum = 0.0L, term = t;
  for (int n = 1; n < 60; ++n) {
    sum += (n % 2 ? 1.0L : -1.0L) * term / n;
    term *= t;
  }
  return sum;
}

double gaussian_kl(const Vector& m, const Vector& sigma, double prior) {
  const double pv = prior * prior;
  double acc = 0.0;
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    const double r = sigma[k] * sigma[k] / pv;
    acc += m[k] * m[k] / pv + r - 1.0 - std::log(r);
  }
  return 0.5 * acc;
}

// Max member KL with each mean coordinate free in [mu_k - sigma_k, mu_k + sigma_k]:
// enumerate all corners of the box (the KL is convex in the mean).
double box_corner_oracle(const Vector& mu, const Vector& sigma, double prior) {
  const Eigen::Index K = mu.size();
  double best = -std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << K); ++mask) {
    Vector m(K);
    for (Eigen::Index k = 0; k < K; ++k) m[k] = mu[k] + ((mask >> k) & 1u ? sigma[k] : -sigma[k]);
    best = std::max(best, gaussian_kl(m, sigma, prior));
  }
  return best;
}

}  // namespace

TEST(Softplus, Examples) {
  EXPECT_NEAR(softplus(0.0), 0.693147, 1e-6);
  EXPECT_NEAR(softplus(50.0), 50.0, 50.0 * 1e-12);
  const double oracle = static_cast<double>(softplus_series(-20.0L));
  EXPECT_NEAR(softplus(-20.0), oracle, 1e-15 * oracle);
  EXPECT_NEAR(softplus(-20.0), 2.0612e-9, 1e-13);
}

TEST(Softplus, StableAtExtremes) {
  EXPECT_DOUBLE_EQ(softplus(1000.0), 1000.0);
  EXPECT_GT(softplus(-700.0), 0.0);
  EXPECT_TRUE(std::isfinite(softplus(-1000.0)));
}

TEST(Softmax, Examples) {
  const auto u = softmax(Vector::Zero(3));
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(u[k], 1.0 / 3.0, 1e-15);

  Vector z(3);
  z << 0.0, std::log(2.0), std::log(3.0);
  const auto p = softmax(z);
  EXPECT_NEAR(p[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(p[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(p[2], 3.0 / 6.0, 1e-15);

  Vector big(2);
  big << 1000.0, 0.0;
  const auto q = softmax(big);
  EXPECT_EQ(q[0], 1.0);
  EXPECT_EQ(q[1], 0.0);
}

TEST(Softmax, ShiftInvariance) {
  CounterRng rng(3, "test/softmax");
  for (int trial = 0; trial < 200; ++trial) {
    Vector z(5);
    for (int k = 0; k < 5; ++k) z[k] = rng.uniform(-10, 10);
    const double c = rng.uniform(-100, 100);
    const Vector a = softmax_values(z);
    const Vector b = softmax_values(Vector(z.array() + c));
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    EXPECT_NEAR(a.sum(), 1.0, 1e-12);
  }
}

TEST(SimplexVector, RejectsInvalid) {
  Vector neg(2);
  neg << -0.1, 1.1;
  EXPECT_THROW(SimplexVector{neg}, Error);
  Vector off(2);
  off << 0.5, 0.6;
  EXPECT_THROW(SimplexVector{off}, Error);
  Vector ok(2);
  ok << 0.25, 0.75;
  EXPECT_NO_THROW(SimplexVector{ok});
}

TEST(Entropy, Examples) {
  Vector u = Vector::Constant(3, 1.0 / 3.0);
  u[2] = 1.0 - u[0] - u[1];
  EXPECT_NEAR(entropy(SimplexVector(u)), 1.098612, 1e-6);
  Vector p(3);
  p << 0.0, 0.6, 0.4;
  EXPECT_NEAR(entropy(SimplexVector(p)), 0.6730, 1e-4);
  Vector one(3);
  one << 1.0, 0.0, 0.0;
  EXPECT_EQ(entropy(SimplexVector(one)), 0.0);
}

TEST(Entropy, Bounds) {
  CounterRng rng(5, "test/entropy");
  for (int trial = 0; trial < 500; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(6));
    Vector z(K);
    for (int k = 0; k < K; ++k) z[k] = rng.uniform(-6, 6);
    const double h = entropy(softmax(z));
    EXPECT_GE(h, 0.0);
    EXPECT_LT(h, std::log(static_cast<double>(K)));
  }
  const Vector uniform = Vector::Constant(4, 0.25);
  EXPECT_NEAR(entropy(SimplexVector(uniform)), std::log(4.0), 1e-15);
}

TEST(WorstCaseMean, Examples) {
  Vector mu(2), s(2);
  mu << 1, -1;
  s << 0.5, 0.5;
  Vector w = worst_case_mean(CredalEllipsoid(mu, s));
  EXPECT_DOUBLE_EQ(w[0], 1.5);
  EXPECT_DOUBLE_EQ(w[1], -1.5);

  w = worst_case_mean(CredalEllipsoid(Vector::Zero(2), Vector::Ones(2)));
  EXPECT_EQ(w[0], 0.0);
  EXPECT_EQ(w[1], 0.0);

  Vector mu3(3), s3(3);
  mu3 << 2, -3, 0.1;
  s3 << 0.1, 0.2, 0.3;
  w = worst_case_mean(CredalEllipsoid(mu3, s3));
  EXPECT_NEAR(w[0], 2.1, 1e-15);
  EXPECT_NEAR(w[1], -3.2, 1e-15);
  EXPECT_NEAR(w[2], 0.4, 1e-15);
}

TEST(CredalEllipsoid, Validation) {
  EXPECT_THROW(CredalEllipsoid(Vector::Zero(2), Vector::Ones(3)), Error);
  Vector s(2);
  s << 1.0, 0.0;
  EXPECT_THROW(CredalEllipsoid(Vector::Zero(2), s), Error);
  s << 1.0, std::numeric_limits<double>::infinity();
  EXPECT_THROW(CredalEllipsoid(Vector::Zero(2), s), Error);
}

TEST(HausdorffKl, Examples) {
  EXPECT_EQ(hausdorff_kl(CredalEllipsoid(Vector::Zero(3), Vector::Ones(3)), 1.0), 0.0);

  Vector mu(2), s(2);
  mu << 1, -1;
  s << 0.5, 0.5;
  const double v = hausdorff_kl(CredalEllipsoid(mu, s), 1.0);
  EXPECT_NEAR(v, 2.886294, 1e-6);
  EXPECT_NEAR(v, box_corner_oracle(mu, s, 1.0), 1e-4 * v);

  const double w = hausdorff_kl(CredalEllipsoid(Vector::Zero(2), Vector::Constant(2, 2.0)), 1.0);
  EXPECT_NEAR(w, 2.0 * 0.5 * (4.0 - 1.0 - std::log(4.0)), 1e-12);
  EXPECT_NEAR(w, 1.613706, 1e-6);
}

TEST(HausdorffKl, RejectsNonPositivePrior) {
  const CredalEllipsoid e(Vector::Zero(2), Vector::Ones(2));
  try {
    hausdorff_kl(e, 0.0);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), Errc::NonPositivePrior);
  }
  EXPECT_THROW(hausdorff_kl(e, -1.0), Error);
}

TEST(HausdorffKl, SupremumOverSampledMembers) {
  CounterRng rng(11, "test/kl-sup");
  for (int trial = 0; trial < 50; ++trial) {
    const int K = 1 + static_cast<int>(rng.below(4));
    Vector mu(K), s(K);
    for (int k = 0; k < K; ++k) {
      mu[k] = rng.uniform(-3, 3);
      s[k] = rng.uniform(0.05, 2.5);
    }
    const double prior = rng.uniform(0.3, 2.0);
    const double closed = hausdorff_kl(CredalEllipsoid(mu, s), prior);
    for (int i = 0; i < 1000; ++i) {
      Vector m(K);
      for (int k = 0; k < K; ++k) m[k] = mu[k] + s[k] * rng.uniform(-1, 1);
      ASSERT_GE(closed + 1e-12, gaussian_kl(m, s, prior));
    }
    EXPECT_NEAR(closed, box_corner_oracle(mu, s, prior), 1e-4 * std::max(1.0, closed));
  }
}

TEST(HausdorffKl, MonotoneInAbsMean) {
  CounterRng rng(13, "test/kl-mono");
  for (int trial = 0; trial < 200; ++trial) {
    const int K = 1 + static_cast<int>(rng.below(4));
    Vector mu(K), s(K);
    for (int k = 0; k < K; ++k) {
      mu[k] = rng.uniform(-2, 2);
      s[k] = rng.uniform(0.1, 2.0);
    }
    const int k = static_cast<int>(rng.below(K));
    Vector bigger = mu;
    bigger[k] += (mu[k] >= 0 ? 1.0 : -1.0) * rng.uniform(0.0, 1.0);
    EXPECT_LE(hausdorff_kl(CredalEllipsoid(mu, s), 1.0), hausdorff_kl(CredalEllipsoid(bigger, s), 1.0));
  }
}

TEST(HausdorffKl, ZeroOnlyAtPrior) {
  EXPECT_EQ(hausdorff_kl(CredalEllipsoid(Vector::Zero(4), Vector::Constant(4, 0.7)), 0.7), 0.0);
  Vector mu = Vector::Zero(4);
  mu[2] = 1e-3;
  EXPECT_GT(hausdorff_kl(CredalEllipsoid(mu, Vector::Constant(4, 0.7)), 0.7), 0.0);
  Vector s = Vector::Constant(4, 0.7);
  s[1] = 0.71;
  EXPECT_GT(hausdorff_kl(CredalEllipsoid(Vector::Zero(4), s), 0.7), 0.0);
}

TEST(HausdorffKl, GradientMatchesCentralDifference) {
  CounterRng rng(17, "test/kl-grad");
  for (int trial = 0; trial < 50; ++trial) {
    const int K = 1 + static_cast<int>(rng.below(4));
    Vector mu(K), s(K);
    for (int k = 0; k < K; ++k) {
      mu[k] = rng.uniform(-2, 2);
      s[k] = rng.uniform(0.2, 2.0);
    }
    const HausdorffKl g = hausdorff_kl_with_grad(CredalEllipsoid(mu, s), 1.3);
    const double h = 1e-6;
    for (int k = 0; k < K; ++k) {
      Vector a = mu, b = mu;
      a[k] += h;
      b[k] -= h;
      const double dmu = (hausdorff_kl(CredalEllipsoid(a, s), 1.3) - hausdorff_kl(CredalEllipsoid(b, s), 1.3)) / (2 * h);
      EXPECT_NEAR(g.d_mu[k], dmu, 1e-6 * std::max(1.0, std::abs(dmu)));
      Vector c = s, d = s;
      c[k] += h;
      d[k] -= h;
      const double ds = (hausdorff_kl(CredalEllipsoid(mu, c), 1.3) - hausdorff_kl(CredalEllipsoid(mu, d), 1.3)) / (2 * h);
      EXPECT_NEAR(g.d_sigma[k], ds, 1e-6 * std::max(1.0, std::abs(ds)));
    }
  }
}

TEST(Gelu, DerivativeMatchesDifference) {
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
  EXPECT_EQ(gelu(0.0), 0.0);
}
