#pragma once

// Parameter container and deterministic forward pass.
//
//   h_mu = W_mu h,  h_epi = W_epi h,  h_ale = W_ale h          (d/2 each)
//   mu        = g_mu(h_mu)                      -> C x K concept logits
//   sigma_epi = softplus(g_epi(h_epi))          -> C x K credal scales
//   sigma_ale = softplus(g_ale(h_ale))          -> C ambiguity estimates
//   task      = psi_w * vec(softmax_rows(mu)) + psi_b
//
// Each g is Linear -> [LayerNorm] -> GELU -> [dropout] -> Linear.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "ccbm/credal.hpp"
#include "ccbm/error.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

struct ModelDims {
  int d = 0;         // embedding width (even)
  int concepts = 0;  // C
  int classes = 0;   // K, classes per concept
  int tasks = 0;     // J, task classes
  int hidden = 0;    // MLP hidden width

  int half() const noexcept { return d / 2; }
  int concept_logits() const noexcept { return concepts * classes; }

  void validate() const {
    if (d <= 0 || concepts <= 0 || classes <= 0 || tasks <= 0 || hidden <= 0)
      fail(Errc::DimensionMismatch, "all model dimensions must be >= 1");
    if (d % 2 != 0) fail(Errc::OddDimension, "embedding width d=" + std::to_string(d) + " must be even");
  }

  bool operator==(const ModelDims&) const = default;
};

inline constexpr double kLayerNormEps = 1e-5;

struct Mlp {
  Matrix w1;      // hidden x in
  Vector b1;      // hidden
  Vector ln_gain; // hidden; only used with layernorm
  Vector ln_bias; // hidden; only used with layernorm
  Matrix w2;      // out x hidden
  Vector b2;      // out
};

struct ModelParams {
  ModelDims dims;
  bool layernorm = false;

  Matrix w_mu, w_epi, w_ale;  // (d/2) x d projections
  Mlp phi_mu, phi_epi, phi_ale;
  Matrix psi_w;  // J x (C*K)
  Vector psi_b;  // J
};

/// Same layout as ModelParams; holds derivatives.
struct GradientSet : ModelParams {};

/// Visits every tensor in declared (checkpoint) order as f(name, t0, t1, ...),
/// walking any number of same-layout parameter sets in lockstep.
template <typename F, typename... Ps>
void visit_tensors(F&& f, Ps&... ps) {
  f(std::string_view("w_mu"), ps.w_mu...);
  f(std::string_view("w_epi"), ps.w_epi...);
  f(std::string_view("w_ale"), ps.w_ale...);
  const auto mlp = [&](std::string_view prefix, auto&... ms) {
    const std::string s(prefix);
    f(std::string_view(s + ".w1"), ms.w1...);
    f(std::string_view(s + ".b1"), ms.b1...);
    f(std::string_view(s + ".ln_gain"), ms.ln_gain...);
    f(std::string_view(s + ".ln_bias"), ms.ln_bias...);
    f(std::string_view(s + ".w2"), ms.w2...);
    f(std::string_view(s + ".b2"), ms.b2...);
  };
  mlp("phi_mu", ps.phi_mu...);
  mlp("phi_epi", ps.phi_epi...);
  mlp("phi_ale", ps.phi_ale...);
  f(std::string_view("psi_w"), ps.psi_w...);
  f(std::string_view("psi_b"), ps.psi_b...);
}

inline GradientSet zeros_like(const ModelParams& p) {
  GradientSet g;
  static_cast<ModelParams&>(g) = p;
  visit_tensors([](std::string_view, auto& t) { t.setZero(); }, g);
  return g;
}

inline GradientSet& operator+=(GradientSet& a, const GradientSet& b) {
  visit_tensors(
      [](std::string_view name, auto& x, const auto& y) {
        if (x.rows() != y.rows() || x.cols() != y.cols())
          fail(Errc::ShapeMismatch, "gradient tensor " + std::string(name) + " differs in shape");
        x += y;
      },
      a, b);
  return a;
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  visit_tensors([&](std::string_view, const auto& t) { n += static_cast<std::size_t>(t.size()); }, p);
  return n;
}

namespace detail {

inline Mlp init_mlp(int in, int hidden, int out, CounterRng& rng) {
  Mlp m;
  m.w1.resize(hidden, in);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index j = 0; j < m.w1.cols(); ++j)
    for (Eigen::Index i = 0; i < m.w1.rows(); ++i) m.w1(i, j) = s1 * rng.normal();
  m.b1 = Vector::Zero(hidden);
  m.ln_gain = Vector::Ones(hidden);
  m.ln_bias = Vector::Zero(hidden);
  m.w2.resize(out, hidden);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Eigen::Index j = 0; j < m.w2.cols(); ++j)
    for (Eigen::Index i = 0; i < m.w2.rows(); ++i) m.w2(i, j) = s2 * rng.normal();
  m.b2 = Vector::Zero(out);
  return m;
}

/// d x d orthogonal matrix from the QR factorization of a Gaussian matrix,
/// sign-corrected so the distribution is Haar.
inline Matrix random_orthogonal(int d, CounterRng& rng) {
  Matrix g(d, d);
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index i = 0; i < d; ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(d, d);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < d; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

}  // namespace detail

/// Deterministic initialization. W_epi and W_ale take complementary halves of
/// one orthogonal basis (disjoint subspaces); W_mu comes from an independent
/// basis. Head weights are N(0, 1/fan_in), biases zero, LayerNorm gain one.
inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed, bool layernorm = false) {
  dims.validate();
  ModelParams p;
  p.dims = dims;
  p.layernorm = layernorm;
  const int half = dims.half();

  CounterRng proj_rng(seed, "init/projections");
  const Matrix q_mu = detail::random_orthogonal(dims.d, proj_rng);
  const Matrix q_split = detail::random_orthogonal(dims.d, proj_rng);
  p.w_mu = q_mu.leftCols(half).transpose();
  p.w_epi = q_split.leftCols(half).transpose();
  p.w_ale = q_split.rightCols(half).transpose();

  CounterRng mu_rng(seed, "init/phi_mu");
  CounterRng epi_rng(seed, "init/phi_epi");
  CounterRng ale_rng(seed, "init/phi_ale");
  CounterRng psi_rng(seed, "init/psi");
  p.phi_mu = detail::init_mlp(half, dims.hidden, dims.concept_logits(), mu_rng);
  p.phi_epi = detail::init_mlp(half, dims.hidden, dims.concept_logits(), epi_rng);
  p.phi_ale = detail::init_mlp(half, dims.hidden, dims.concepts, ale_rng);

  p.psi_w.resize(dims.tasks, dims.concept_logits());
  const double s = 1.0 / std::sqrt(static_cast<double>(dims.concept_logits()));
  for (Eigen::Index j = 0; j < p.psi_w.cols(); ++j)
    for (Eigen::Index i = 0; i < p.psi_w.rows(); ++i) p.psi_w(i, j) = s * psi_rng.normal();
  p.psi_b = Vector::Zero(dims.tasks);
  return p;
}

/// Checks shapes against dims and that every entry is finite.
inline void validate_params(const ModelParams& p) {
  p.dims.validate();
  const auto& d = p.dims;
  auto expect = [](const auto& t, Eigen::Index r, Eigen::Index c, std::string_view name) {
    if (t.rows() != r || t.cols() != c)
      fail(Errc::ShapeMismatch, std::string(name) + " has shape " + std::to_string(t.rows()) + "x" +
                                    std::to_string(t.cols()) + ", expected " + std::to_string(r) + "x" +
                                    std::to_string(c));
  };
  expect(p.w_mu, d.half(), d.d, "w_mu");
  expect(p.w_epi, d.half(), d.d, "w_epi");
  expect(p.w_ale, d.half(), d.d, "w_ale");
  auto mlp = [&](const Mlp& m, int out, std::string_view name) {
    const std::string s(name);
    expect(m.w1, d.hidden, d.half(), s + ".w1");
    expect(m.b1, d.hidden, 1, s + ".b1");
    expect(m.ln_gain, d.hidden, 1, s + ".ln_gain");
    expect(m.ln_bias, d.hidden, 1, s + ".ln_bias");
    expect(m.w2, out, d.hidden, s + ".w2");
    expect(m.b2, out, 1, s + ".b2");
  };
  mlp(p.phi_mu, d.concept_logits(), "phi_mu");
  mlp(p.phi_epi, d.concept_logits(), "phi_epi");
  mlp(p.phi_ale, d.concepts, "phi_ale");
  expect(p.psi_w, d.tasks, d.concept_logits(), "psi_w");
  expect(p.psi_b, d.tasks, 1, "psi_b");
  visit_tensors(
      [](std::string_view name, const auto& t) {
        if (!t.allFinite()) fail(Errc::NaNDetected, "parameter tensor " + std::string(name) + " is not finite");
      },
      p);
}

/// Per-head dropout multipliers (0 or 1/(1-rate)) over the hidden layer.
struct HeadMasks {
  Vector mu, epi, ale;
};

/// Everything one MLP evaluation needs for its backward pass.
struct MlpTrace {
  Vector input;
  Vector pre;      // w1 x + b1
  Vector xhat;     // normalized pre (layernorm only)
  Vector z;        // GELU input
  Vector act;      // GELU output after dropout
  Vector mask;     // empty when no dropout
  double ln_rstd = 1.0;
};

struct ForwardOutput {
  Matrix mu;         // C x K concept logits
  Matrix sigma_epi;  // C x K
  Vector sigma_ale;  // C
  Matrix p_concepts; // C x K, rows on the simplex
  Vector task_logits;

  // cached intermediates
  Vector h;
  Matrix epi_raw;  // C x K pre-softplus
  Vector ale_raw;  // C pre-softplus
  MlpTrace mu_trace, epi_trace, ale_trace;

  SimplexVector concept_probs(int c) const { return SimplexVector::trusted(p_concepts.row(c).transpose()); }
};

namespace detail {

/// Test hooks that deliberately break structural separation.
enum class Wiring {
  standard,
  entropy_into_ale_input,   // ale head input reads the annotator-entropy targets
  ale_into_concept_logits,  // sigma_ale is added onto the concept logits
};

inline Vector mlp_forward(const Mlp& m, bool layernorm, const Vector& x, const Vector* mask, MlpTrace& tr) {
  tr.input = x;
  tr.pre = m.w1 * x + m.b1;
  if (layernorm) {
    const double n = static_cast<double>(tr.pre.size());
    const double mean = tr.pre.sum() / n;
    const Vector centered = tr.pre.array() - mean;
    const double var = centered.squaredNorm() / n;
    tr.ln_rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    tr.xhat = centered * tr.ln_rstd;
    tr.z = tr.xhat.cwiseProduct(m.ln_gain) + m.ln_bias;
  } else {
    tr.xhat.resize(0);
    tr.ln_rstd = 1.0;
    tr.z = tr.pre;
  }
  tr.act = tr.z.unaryExpr([](double v) { return gelu(v); });
  if (mask && mask->size() > 0) {
    tr.mask = *mask;
    tr.act = tr.act.cwiseProduct(*mask);
  } else {
    tr.mask.resize(0);
  }
  return m.w2 * tr.act + m.b2;
}

/// Accumulates parameter gradients into g and returns d loss / d input.
inline Vector mlp_backward(const Mlp& m, bool layernorm, const MlpTrace& tr, const Vector& d_out, Mlp& g) {
  g.w2.noalias() += d_out * tr.act.transpose();
  g.b2 += d_out;
  Vector d_act = m.w2.transpose() * d_out;
  if (tr.mask.size() > 0) d_act = d_act.cwiseProduct(tr.mask);
  Vector d_z(d_act.size());
  for (Eigen::Index i = 0; i < d_z.size(); ++i) d_z[i] = d_act[i] * gelu_grad(tr.z[i]);
  Vector d_pre;
  if (layernorm) {
    g.ln_gain += d_z.cwiseProduct(tr.xhat);
    g.ln_bias += d_z;
    const Vector d_xhat = d_z.cwiseProduct(m.ln_gain);
    const double n = static_cast<double>(d_xhat.size());
    const double mean_d = d_xhat.sum() / n;
    const double mean_dx = d_xhat.dot(tr.xhat) / n;
    d_pre = tr.ln_rstd * (d_xhat.array() - mean_d - tr.xhat.array() * mean_dx).matrix();
  } else {
    d_pre = d_z;
  }
  g.w1.noalias() += d_pre * tr.input.transpose();
  g.b1 += d_pre;
  return m.w1.transpose() * d_pre;
}

inline ForwardOutput forward_impl(const Vector& h, const ModelParams& p, const HeadMasks* masks,
                                  Wiring wiring, const Vector* entropy_targets) {
  const auto& d = p.dims;
  if (h.size() != d.d)
    fail(Errc::DimensionMismatch,
         "embedding has length " + std::to_string(h.size()) + ", model expects " + std::to_string(d.d));
  ForwardOutput o;
  o.h = h;
  const int C = d.concepts, K = d.classes;

  const Vector h_mu = p.w_mu * h;
  const Vector h_epi = p.w_epi * h;
  Vector h_ale = p.w_ale * h;
  if (wiring == Wiring::entropy_into_ale_input && entropy_targets)
    h_ale.array() += entropy_targets->mean();

  const Vector mu_out = mlp_forward(p.phi_mu, p.layernorm, h_mu, masks ? &masks->mu : nullptr, o.mu_trace);
  const Vector epi_out = mlp_forward(p.phi_epi, p.layernorm, h_epi, masks ? &masks->epi : nullptr, o.epi_trace);
  o.ale_raw = mlp_forward(p.phi_ale, p.layernorm, h_ale, masks ? &masks->ale : nullptr, o.ale_trace);
  o.sigma_ale = o.ale_raw.unaryExpr([](double v) { return softplus(v); });

  o.mu.resize(C, K);
  o.epi_raw.resize(C, K);
  o.sigma_epi.resize(C, K);
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < K; ++k) {
      o.mu(c, k) = mu_out[c * K + k];
      o.epi_raw(c, k) = epi_out[c * K + k];
      o.sigma_epi(c, k) = softplus(epi_out[c * K + k]);
    }
  if (wiring == Wiring::ale_into_concept_logits)
    for (int c = 0; c < C; ++c) o.mu.row(c).array() += o.sigma_ale[c];

  o.p_concepts.resize(C, K);
  Vector flat(C * K);
  for (int c = 0; c < C; ++c) {
    o.p_concepts.row(c) = softmax_values(o.mu.row(c).transpose()).transpose();
    for (int k = 0; k < K; ++k) flat[c * K + k] = o.p_concepts(c, k);
  }
  o.task_logits = p.psi_w * flat + p.psi_b;
  return o;
}

}  // namespace detail

/// Pure forward pass. Takes only the embedding: annotator entropies and labels
/// cannot reach the heads through this interface.
inline ForwardOutput forward(const Vector& h, const ModelParams& p, const HeadMasks* masks = nullptr) {
  return detail::forward_impl(h, p, masks, detail::Wiring::standard, nullptr);
}

/// ||W_epi W_ale^T||_F^2 (row-space overlap), or the literal ||W_epi^T W_ale||_F^2.
inline double orth_penalty(const ModelParams& p, bool literal = false) {
  if (literal) return (p.w_epi.transpose() * p.w_ale).squaredNorm();
  return (p.w_epi * p.w_ale.transpose()).squaredNorm();
}

/// Adds scale * d orth_penalty / dW into g.
inline void orth_penalty_grad(const ModelParams& p, bool literal, double scale, GradientSet& g) {
  if (scale == 0.0) return;
  if (literal) {
    const Matrix n = p.w_epi.transpose() * p.w_ale;  // d x d
    g.w_epi.noalias() += (2.0 * scale) * (p.w_ale * n.transpose());
    g.w_ale.noalias() += (2.0 * scale) * (p.w_epi * n);
  } else {
    const Matrix m = p.w_epi * p.w_ale.transpose();  // d/2 x d/2
    g.w_epi.noalias() += (2.0 * scale) * (m * p.w_ale);
    g.w_ale.noalias() += (2.0 * scale) * (m.transpose() * p.w_epi);
  }
}

}  // namespace ccbm
