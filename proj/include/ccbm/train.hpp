#pragma once

// Mini-batch training: AdamW, linear warmup + cosine schedule, early stopping.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ccbm/data.hpp"
#include "ccbm/gradcheck.hpp"
#include "ccbm/losses.hpp"
#include "ccbm/metrics.hpp"
#include "ccbm/model.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

enum class EarlyStop { val_rho_ale, val_loss };

struct TrainConfig {
  LossConfig loss;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 32;
  int epochs = 50;
  double warmup_fraction = 0.1;
  int patience = 10;
  std::uint64_t seed = 0;
  int hidden = 64;
  double dropout = 0.0;
  EarlyStop early_stop = EarlyStop::val_rho_ale;
  bool check_isolation = true;  // run the head-isolation check every epoch

  // ablations
  bool disable_ale_supervision = false;
  bool literal_orth_penalty = false;
  bool enable_layernorm = false;
  bool enable_decorr = false;

  /// Loss weights after ablation switches are applied.
  LossConfig effective_loss() const {
    LossConfig l = loss;
    if (disable_ale_supervision) l.lambda_ale = 0.0;
    if (!enable_decorr) l.lambda_decorr = 0.0;
    l.literal_orth = literal_orth_penalty;
    return l;
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) fail(Errc::InvalidConfig, "lr must be positive");
    if (!(weight_decay >= 0.0)) fail(Errc::InvalidConfig, "weight_decay must be >= 0");
    if (batch_size < 1) fail(Errc::InvalidConfig, "batch_size must be >= 1");
    if (epochs < 1) fail(Errc::InvalidConfig, "epochs must be >= 1");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail(Errc::InvalidConfig, "warmup_fraction must lie in [0, 1)");
    if (patience < 1) fail(Errc::InvalidConfig, "patience must be >= 1");
    if (hidden < 1) fail(Errc::InvalidConfig, "hidden must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail(Errc::InvalidConfig, "dropout must lie in [0, 1)");
    loss.validate();
  }
};

/// Named hyperparameter sets. "heads-fast" is the default head-only regime.
inline TrainConfig preset(const std::string& name) {
  TrainConfig c;
  if (name == "heads-fast") return c;
  if (name == "paper-e1") {
    c.lr = 2e-5;
    c.batch_size = 16;
    c.epochs = 100;
    c.loss.lambda_decorr = 5.0;
    c.enable_decorr = true;
    c.hidden = 256;
    c.enable_layernorm = true;
    c.dropout = 0.1;
    return c;
  }
  if (name == "paper-g-cebab") {
    c.lr = 1e-3;
    c.batch_size = 32;
    c.epochs = 50;
    c.loss.beta = 0.1;
    c.loss.lambda_ale = 1.0;
    c.loss.lambda_decorr = 0.1;
    c.enable_decorr = true;
    c.dropout = 0.1;
    c.hidden = 256;
    c.early_stop = EarlyStop::val_loss;
    return c;
  }
  if (name == "paper-g-maqa") {
    c.lr = 5e-4;
    c.batch_size = 16;
    c.epochs = 100;
    c.loss.beta = 0.2;
    c.loss.lambda_ale = 0.5;
    c.loss.lambda_decorr = 0.1;
    c.enable_decorr = true;
    c.dropout = 0.2;
    c.hidden = 256;
    c.early_stop = EarlyStop::val_loss;
    return c;
  }
  fail(Errc::InvalidConfig, "unknown preset '" + name + "'");
}

inline long warmup_steps(long total_steps, double warmup_fraction) {
  return std::lround(warmup_fraction * static_cast<double>(total_steps));
}

/// Linear ramp 0 -> lr over the warmup steps, then cosine down to 0 at total_steps.
inline double lr_at(long step, long total_steps, double lr, double warmup_fraction) {
  if (total_steps <= 0 || step < 0 || step > total_steps) fail(Errc::BadBounds, "step outside [0, total_steps]");
  const long w = warmup_steps(total_steps, warmup_fraction);
  if (step < w) return lr * static_cast<double>(step) / static_cast<double>(w);
  if (total_steps == w) return lr;
  const double progress = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  return lr_at(step, total_steps, cfg.lr, cfg.warmup_fraction);
}

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamState {
  GradientSet m, v;
  long t = 0;
};

inline AdamState adam_init(const ModelParams& p) { return {zeros_like(p), zeros_like(p), 0}; }

/// Decoupled weight decay, then the bias-corrected Adam update.
inline void adamw_step(ModelParams& p, const GradientSet& g, AdamState& s, double lr, double weight_decay) {
  ++s.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(s.t));
  visit_tensors(
      [&](std::string_view name, auto& w, const auto& gr, auto& m, auto& v) {
        if (w.rows() != gr.rows() || w.cols() != gr.cols() || w.rows() != m.rows() || w.cols() != m.cols() ||
            w.rows() != v.rows() || w.cols() != v.cols())
          fail(Errc::ShapeMismatch, "optimizer tensor " + std::string(name) + " differs in shape");
        for (Eigen::Index i = 0; i < w.size(); ++i) {
          const double gi = gr.data()[i];
          double& mi = m.data()[i];
          double& vi = v.data()[i];
          mi = kAdamBeta1 * mi + (1.0 - kAdamBeta1) * gi;
          vi = kAdamBeta2 * vi + (1.0 - kAdamBeta2) * gi * gi;
          double& wi = w.data()[i];
          wi *= 1.0 - lr * weight_decay;
          wi -= lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEps);
        }
      },
      p, g, s.m, s.v);
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;  // rate used by the epoch's last step
  LossBreakdown train;  // example-weighted means over the epoch
  double val_loss = 0.0;
  double val_rho_ale_h = 0.0;
  double val_rho_epi_ale = 0.0;
  double val_rho_epi_err = 0.0;
  double val_accuracy = 0.0;
  double isolation_dev = 0.0;  // max head-isolation deviation (NaN when not checked)
  bool coupled = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

struct ValidationStats {
  double loss = 0, rho_ale_h = 0, rho_epi_ale = 0, rho_epi_err = 0, accuracy = 0;
};

inline ValidationStats validation_stats(std::span<const Sample> val, const ModelParams& p, const LossConfig& cfg) {
  ValidationStats s;
  s.loss = evaluate_loss(val, p, cfg).total;
  std::vector<Vector> hs;
  for (const auto& x : val) hs.push_back(x.h);
  const auto preds = infer_all(p, hs);
  std::vector<double> ue, ua, h, err;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    ue.push_back(preds[i].u_epi);
    ua.push_back(preds[i].u_ale);
    h.push_back(val[i].entropy.mean());
    const bool ok = preds[i].y_hat == val[i].task;
    err.push_back(ok ? 0.0 : 1.0);
    correct += ok;
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
  if (val.size() >= 3) {
    s.rho_ale_h = spearman(ua, h).value;
    s.rho_epi_ale = spearman(ue, ua).value;
    s.rho_epi_err = spearman(ue, err).value;
  }
  return s;
}

/// Dropout multipliers for one example at one optimizer step.
inline HeadMasks dropout_masks(const CounterRng& base, long step, std::size_t example, int hidden, double rate) {
  CounterRng r = base.fork(static_cast<std::uint64_t>(step)).fork(example);
  HeadMasks m;
  const double keep = 1.0 / (1.0 - rate);
  for (Vector* v : {&m.mu, &m.epi, &m.ale}) {
    v->resize(hidden);
    for (int j = 0; j < hidden; ++j) (*v)[j] = r.uniform() < rate ? 0.0 : keep;
  }
  return m;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from a seeded initialization and returns the best validation snapshot.
inline TrainResult train(std::span<const Sample> tr, std::span<const Sample> va, ModelDims dims, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (tr.empty()) fail(Errc::EmptyDataset, "training split is empty");
  if (va.empty()) fail(Errc::EmptyDataset, "validation split is empty");
  dims.hidden = cfg.hidden;
  dims.validate();
  for (const auto& s : tr) detail::check_sample(s, dims);
  for (const auto& s : va) detail::check_sample(s, dims);

  const LossConfig lc = cfg.effective_loss();
  ModelParams params = init_params(dims, cfg.seed, cfg.enable_layernorm);
  AdamState opt = adam_init(params);

  const std::size_t n = tr.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total = per_epoch * cfg.epochs;
  const CounterRng shuffle_base(cfg.seed, "train/shuffle");
  const CounterRng dropout_base(cfg.seed, "train/dropout");
  const std::vector<Sample> probe(tr.begin(), tr.begin() + static_cast<std::ptrdiff_t>(std::min(n, std::max<std::size_t>(bs, 3))));

  TrainResult result;
  result.params = params;
  double best = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  long step = 0;
  std::vector<std::size_t> order(n);
  std::vector<Sample> batch;
  std::vector<HeadMasks> masks;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng sh = shuffle_base.fork(static_cast<std::uint64_t>(epoch));
    shuffle_indices(order.data(), n, sh);

    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < n; b += bs) {
      const std::size_t e = std::min(n, b + bs);
      batch.clear();
      for (std::size_t i = b; i < e; ++i) batch.push_back(tr[order[i]]);
      const std::vector<HeadMasks>* mp = nullptr;
      if (cfg.dropout > 0.0) {
        masks.clear();
        for (std::size_t i = 0; i < batch.size(); ++i)
          masks.push_back(dropout_masks(dropout_base, step, i, dims.hidden, cfg.dropout));
        mp = &masks;
      }
      BackwardResult r;
      try {
        r = backward(batch, params, lc, mp);
      } catch (const Error& err) {
        if (err.code() == Errc::NaNDetected)
          fail(Errc::NaNDetected, "epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + err.what());
        throw;
      }
      const double rate = lr_at(step + 1, total, cfg);
      adamw_step(params, r.grad, opt, rate, cfg.weight_decay);
      ++step;
      rec.lr = rate;
      const double wgt = static_cast<double>(batch.size());
      rec.train.task += wgt * r.loss.task;
      rec.train.concept_ce += wgt * r.loss.concept_ce;
      rec.train.epi_err += wgt * r.loss.epi_err;
      rec.train.epi_kl += wgt * r.loss.epi_kl;
      rec.train.ale += wgt * r.loss.ale;
      rec.train.orth += wgt * r.loss.orth;
      rec.train.decorr += wgt * r.loss.decorr;
      rec.train.total += wgt * r.loss.total;
    }
    for (double* v : {&rec.train.task, &rec.train.concept_ce, &rec.train.epi_err, &rec.train.epi_kl, &rec.train.ale,
                      &rec.train.orth, &rec.train.decorr, &rec.train.total})
      *v /= static_cast<double>(n);

    const ValidationStats vs = validation_stats(va, params, lc);
    rec.val_loss = vs.loss;
    rec.val_rho_ale_h = vs.rho_ale_h;
    rec.val_rho_epi_ale = vs.rho_epi_ale;
    rec.val_rho_epi_err = vs.rho_epi_err;
    rec.val_accuracy = vs.accuracy;
    rec.coupled = lc.lambda_decorr > 0.0;
    rec.isolation_dev = std::numeric_limits<double>::quiet_NaN();
    if (cfg.check_isolation) rec.isolation_dev = grad_isolation_check(params, probe, lc).max_deviation();

    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const double score = cfg.early_stop == EarlyStop::val_rho_ale ? vs.rho_ale_h : -vs.loss;
    if (score > best) {
      best = score;
      since_best = 0;
      result.params = params;
      result.history.best_epoch = epoch;
    } else if (++since_best >= cfg.patience) {
      result.history.stopped_early = true;
      break;
    }
  }
  return result;
}

/// Trains on the dataset's train split and early-stops on its val split.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  const auto tr = ds.samples(ds.splits.train);
  const auto va = ds.samples(ds.splits.val);
  return train(tr, va, ModelDims{ds.d, ds.C, ds.K, ds.J, cfg.hidden}, cfg, on_epoch);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void write_history_csv(const TrainHistory& h, std::ostream& os) {
  os << "epoch,lr,loss_total,loss_task,loss_concept,loss_epi_err,loss_epi_kl,loss_ale,loss_orth,loss_decorr,"
        "val_loss,val_rho_ale_h,val_rho_epi_ale,val_rho_epi_err,val_accuracy,isolation_dev,coupled\n";
  for (const auto& r : h.epochs) {
    os << r.epoch;
    for (double v : {r.lr, r.train.total, r.train.task, r.train.concept_ce, r.train.epi_err, r.train.epi_kl,
                     r.train.ale, r.train.orth, r.train.decorr, r.val_loss, r.val_rho_ale_h, r.val_rho_epi_ale,
                     r.val_rho_epi_err, r.val_accuracy, r.isolation_dev})
      os << ',' << format_double(v);
    os << ',' << (r.coupled ? 1 : 0) << '\n';
  }
}

}  // namespace ccbm
