#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "ccbm/metrics.hpp"
#include "ccbm/rng.hpp"

using namespace ccbm;

namespace {

// Pairwise Mann-Whitney count over all positive/negative pairs.
double auroc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

// Average rank by counting: #smaller + (#equal + 1) / 2.
std::vector<long double> count_ranks(const std::vector<double>& v) {
  std::vector<long double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    long double less = 0, eq = 0;
    for (double w : v) {
      less += w < v[i];
      eq += w == v[i];
    }
    r[i] = less + (eq + 1) / 2;
  }
  return r;
}

double spearman_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = count_ranks(a), rb = count_ranks(b);
  const long double n = static_cast<long double>(a.size());
  long double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += ra[i];
    sb += rb[i];
    sab += ra[i] * rb[i];
    saa += ra[i] * ra[i];
    sbb += rb[i] * rb[i];
  }
  const long double cov = sab - sa * sb / n, va = saa - sa * sa / n, vb = sbb - sb * sb / n;
  return static_cast<double>(cov / std::sqrt(va * vb));
}

Prediction pred(double ue, double ua) {
  Prediction p;
  p.u_epi = ue;
  p.u_ale = ua;
  return p;
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{1, 1, 1, 1}, std::vector<int>{0, 1, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0, 1}, std::vector<int>{0, 1}), 1.0);
}

TEST(Auroc, SingleClassThrows) {
  try {
    auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingleClass);
  }
}

TEST(Auroc, MatchesPairwiseBruteForce) {
  CounterRng rng(11, "test/auroc");
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(49));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(8)) * 0.25;  // plenty of ties
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(auroc(s, y), auroc_pairs(s, y)) << "trial " << trial;
  }
}

TEST(Spearman, MatchesRankOracleWithTies) {
  CounterRng rng(12, "test/spearman");
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(48));
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.below(6));
      b[i] = a[i] + static_cast<double>(rng.below(4));
    }
    a[0] = -1.0;  // never constant
    b[1] = 100.0;
    const auto r = spearman(a, b);
    ASSERT_FALSE(r.degenerate);
    EXPECT_NEAR(r.value, spearman_oracle(a, b), 1e-12) << "trial " << trial;
  }
}

TEST(Spearman, RankInvariance) {
  CounterRng rng(13, "test/spearman-inv");
  std::vector<double> a(40), b(40), ea(40), fb(40);
  for (int i = 0; i < 40; ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + rng.normal();
    ea[i] = std::exp(a[i]);
    fb[i] = 3.0 * b[i] - 7.0;
  }
  EXPECT_NEAR(spearman(a, b).value, spearman(ea, fb).value, 1e-14);
}

TEST(Spearman, PerfectAndErrors) {
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{10, 20, 30, 40}).value, 1.0, 1e-15);
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}).value, -1.0, 1e-15);
  const auto flat = spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3});
  EXPECT_TRUE(flat.degenerate);
  EXPECT_EQ(flat.value, 0.0);
  try {
    spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TooFewSamples);
  }
}

TEST(FisherCi, Examples) {
  const auto a = fisher_ci(0.0, 403);
  EXPECT_NEAR(a.lo, -0.0977, 1e-4);
  EXPECT_NEAR(a.hi, 0.0977, 1e-4);
  const auto b = fisher_ci(0.5, 103);
  EXPECT_NEAR(b.lo, 0.3393, 1e-4);
  EXPECT_NEAR(b.hi, 0.6324, 1e-4);
  const auto z = fisher_ci(0.3, 50, 0.0);
  EXPECT_DOUBLE_EQ(z.lo, 0.3);
  EXPECT_DOUBLE_EQ(z.hi, 0.3);
}

TEST(FisherCi, Errors) {
  EXPECT_THROW(fisher_ci(0.1, 3), Error);
  EXPECT_THROW(fisher_ci(1.0, 100), Error);
  EXPECT_THROW(fisher_ci(0.1, 100, 1.0), Error);
  try {
    fisher_ci(0.1, 2);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateN);
  }
}

TEST(FisherCi, CoverageOfSpearmanOnBivariateNormal) {
  // population Spearman of a bivariate normal with correlation r is (6/pi) asin(r/2)
  const double r = 0.5, truth = 6.0 / std::numbers::pi * std::asin(r / 2.0);
  const int n = 80, sims = 1000;
  int covered = 0;
  for (int s = 0; s < sims; ++s) {
    CounterRng rng = CounterRng(14, "test/coverage").fork(static_cast<std::uint64_t>(s));
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = r * x[i] + std::sqrt(1.0 - r * r) * rng.normal();
    }
    const auto ci = fisher_ci(spearman(x, y).value, n);
    covered += ci.lo <= truth && truth <= ci.hi;
  }
  EXPECT_GE(covered, 930);
}

TEST(Stratified, BinsAndAbsence) {
  const std::vector<double> s{0.1, 0.9, 0.2, 0.8};
  const std::vector<int> e{0, 1, 0, 1};
  const std::vector<double> low{0.1, 0.2, 0.3, 0.4};
  const auto only_low = stratified_auroc(s, e, low);
  EXPECT_EQ(only_low.bins[0].count, 4u);
  ASSERT_TRUE(only_low.bins[0].auroc);
  EXPECT_DOUBLE_EQ(*only_low.bins[0].auroc, 1.0);
  EXPECT_FALSE(only_low.bins[1].auroc);
  EXPECT_FALSE(only_low.bins[2].auroc);
  EXPECT_FALSE(only_low.delta);

  // identical scores within each bin -> 0.5
  const std::vector<double> same{0.3, 0.3, 0.7, 0.7, 0.7, 0.7};
  const std::vector<int> err{0, 1, 1, 0, 0, 1};
  const std::vector<double> h{0.1, 0.2, 1.6, 1.7, 2.0, 1.5};
  const auto st = stratified_auroc(same, err, h);
  EXPECT_DOUBLE_EQ(*st.bins[0].auroc, 0.5);
  EXPECT_DOUBLE_EQ(*st.bins[2].auroc, 0.5);
  EXPECT_EQ(st.bins[1].count, 0u);
  ASSERT_TRUE(st.delta);
  EXPECT_DOUBLE_EQ(*st.delta, 0.0);
}

TEST(Stratified, EdgesAreHalfOpen) {
  const std::vector<double> s{0, 1, 0, 1, 0, 1};
  const std::vector<int> e{0, 1, 0, 1, 0, 1};
  const std::vector<double> h{0.5, 0.5, 1.5, 1.5, 0.49, 0.49};
  const auto st = stratified_auroc(s, e, h);
  EXPECT_EQ(st.bins[0].count, 2u);
  EXPECT_EQ(st.bins[1].count, 2u);
  EXPECT_EQ(st.bins[2].count, 2u);
}

TEST(Balance, Examples) {
  EXPECT_NEAR(balance(std::vector<std::size_t>{119, 136, 127, 118}), 0.933, 1e-3);
  EXPECT_DOUBLE_EQ(balance(std::vector<std::size_t>{5, 5, 5, 5}), 1.0);
  // uses the sample std, not the population std
  EXPECT_NEAR(balance(std::vector<std::size_t>{198, 52, 53, 197}), 0.33, 5e-3);
  EXPECT_LE(balance(std::vector<std::size_t>{100, 0, 0, 0}), 1.0);
}

TEST(Route, StrictThresholds) {
  EXPECT_EQ(route(0, 0, 0, 0), Action::trust);
  EXPECT_EQ(route(1, 0, 0, 0), Action::data);
  EXPECT_EQ(route(0, 1, 0, 0), Action::review);
  EXPECT_EQ(route(1, 1, 0, 0), Action::abstain);
}

TEST(Quadrant, PartitionAndAccuracy) {
  std::vector<Prediction> p;
  std::vector<int> ok;
  CounterRng rng(15, "test/quadrant");
  for (int i = 0; i < 101; ++i) {
    p.push_back(pred(rng.normal(), rng.normal()));
    ok.push_back(static_cast<int>(rng.below(2)));
  }
  const auto t = quadrant_route(p, ok);
  std::size_t total = 0;
  for (const auto& r : t.rows) total += r.count;
  EXPECT_EQ(total, p.size());
  EXPECT_EQ(t.total, p.size());
  EXPECT_LE(t.balance, 1.0);
  std::vector<double> ue;
  for (const auto& x : p) ue.push_back(x.u_epi);
  EXPECT_DOUBLE_EQ(t.t_epi, median(ue));
}

TEST(Quadrant, ExplicitThresholds) {
  std::vector<Prediction> p{pred(0, 0), pred(2, 0), pred(0, 2), pred(2, 2), pred(2, 2)};
  std::vector<int> ok{1, 1, 0, 1, 0};
  const auto t = quadrant_route(p, ok, std::make_pair(1.0, 1.0));
  EXPECT_EQ(t[Action::trust].count, 1u);
  EXPECT_EQ(t[Action::data].count, 1u);
  EXPECT_EQ(t[Action::review].count, 1u);
  EXPECT_EQ(t[Action::abstain].count, 2u);
  EXPECT_DOUBLE_EQ(*t[Action::abstain].accuracy, 0.5);
  EXPECT_DOUBLE_EQ(*t[Action::review].accuracy, 0.0);
  const auto hi = quadrant_route(p, ok, std::make_pair(10.0, 10.0));
  EXPECT_EQ(hi[Action::trust].count, 5u);
  EXPECT_FALSE(hi[Action::data].accuracy);
}

TEST(Quadrant, TooFewThrows) {
  std::vector<Prediction> p{pred(0, 0), pred(1, 1), pred(2, 2)};
  try {
    quadrant_route(p, std::vector<int>{1, 1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateInput);
  }
}

TEST(Quadrant, FlagsDegenerateMedians) {
  std::vector<Prediction> p;
  for (int i = 0; i < 8; ++i) p.push_back(pred(1.0, i));
  const auto t = quadrant_route(p, std::vector<int>(8, 1));
  EXPECT_TRUE(t.degenerate_medians);
}

TEST(Readout, LogDetAndEntropy) {
  ForwardOutput o;
  o.task_logits = Vector::Zero(2);
  o.task_logits[1] = 1.0;
  o.sigma_epi = Matrix::Constant(2, 3, 0.5);
  o.sigma_ale = Vector::Constant(2, 0.25);
  o.sigma_ale[1] = 0.75;
  o.p_concepts = Matrix::Constant(2, 3, 1.0 / 3.0);
  const auto p = prediction_from(o);
  EXPECT_EQ(p.y_hat, 1);
  EXPECT_NEAR(p.u_epi, 6 * 2 * std::log(0.5), 1e-14);
  EXPECT_NEAR(p.u_ale, 0.5, 1e-15);
  EXPECT_NEAR(p.predictive_entropy, std::log(3.0), 1e-14);
}

TEST(Readout, InferUsesOnlyTheEmbedding) {
  const ModelParams p = init_params(ModelDims{8, 2, 3, 2, 8}, 3, false);
  CounterRng rng(16, "test/infer");
  Vector h(8);
  for (int j = 0; j < 8; ++j) h[j] = rng.normal();
  const auto a = infer(p, h);
  const auto b = infer(p, h);
  EXPECT_EQ(a.u_epi, b.u_epi);
  EXPECT_EQ(a.u_ale, b.u_ale);
  EXPECT_EQ(a.y_hat, b.y_hat);
  const std::vector<Vector> hs{h, h};
  const auto all = infer_all(p, hs);
  EXPECT_EQ(all[1].u_epi, a.u_epi);
}
