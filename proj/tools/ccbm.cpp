// ccbm: synth, train, eval, gradcheck, route, kl.
// Exit codes: 0 success, 1 validation error, 2 runtime or numerical error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ccbm/ccbm.hpp"

using namespace ccbm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

template <typename T>
void apply(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

Range split_range(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.splits.train;
  if (name == "val") return ds.splits.val;
  if (name == "test") return ds.splits.test;
  if (name == "all") return ds.all();
  fail(Errc::InvalidConfig, "split must be train, val, test or all; got \"" + name + "\"");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(Errc::Io, "cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) fail(Errc::Io, "cannot write " + p.string());
  return f;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

// ---- synth ----

struct SynthOpts {
  std::string config, out;
  std::optional<int> n, d, C, K, J, A;
  std::optional<double> ambiguity, noise;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthOpts& o) {
  SynthConfig c = o.config.empty() ? SynthConfig{} : synth_config_from_json(load_json_file(o.config));
  apply(o.n, c.n);
  apply(o.d, c.d);
  apply(o.C, c.C);
  apply(o.K, c.K);
  apply(o.J, c.J);
  apply(o.A, c.A);
  apply(o.ambiguity, c.ambiguity_strength);
  apply(o.noise, c.epistemic_noise);
  apply(o.seed, c.seed);
  c.validate();
  SynthFactors f;
  const Dataset ds = synth_generate(c, &f);
  const fs::path manifest = write_dataset(ds, o.out);
  double mean_h = 0.0;
  for (double h : ds.entropy) mean_h += h;
  mean_h /= static_cast<double>(ds.entropy.size());
  std::cout << "wrote " << manifest.string() << '\n'
            << "n=" << ds.n << " d=" << ds.d << " C=" << ds.C << " K=" << ds.K << " J=" << ds.J << " A=" << ds.A << '\n'
            << "mean_H=" << format_double(mean_h) << '\n'
            << "factor_corr=" << format_double(pearson(f.E, f.Amb)) << '\n';
  return 0;
}

// ---- train ----

struct TrainOpts {
  std::string config, preset, data, out;
  std::optional<double> lr, weight_decay, warmup, dropout, lambda_ale, lambda_epi, lambda_d, beta;
  std::optional<int> epochs, batch_size, patience, hidden;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> early_stop;
  bool disable_ale = false, literal_orth = false, layernorm = false, no_isolation_check = false;
};

TrainConfig build_train_config(const TrainOpts& o) {
  nlohmann::json j = o.config.empty() ? nlohmann::json::object() : load_json_file(o.config);
  if (!o.preset.empty()) {
    if (!j.is_object()) fail(Errc::InvalidConfig, "train config must be a JSON object");
    j["preset"] = o.preset;
  }
  TrainConfig c = train_config_from_json(j);
  apply(o.lr, c.lr);
  apply(o.weight_decay, c.weight_decay);
  apply(o.warmup, c.warmup_fraction);
  apply(o.dropout, c.dropout);
  apply(o.lambda_ale, c.loss.lambda_ale);
  apply(o.lambda_epi, c.loss.lambda_epi);
  apply(o.beta, c.loss.beta);
  if (o.lambda_d) {
    c.loss.lambda_decorr = *o.lambda_d;
    c.enable_decorr = *o.lambda_d > 0.0;
  }
  apply(o.epochs, c.epochs);
  apply(o.batch_size, c.batch_size);
  apply(o.patience, c.patience);
  apply(o.hidden, c.hidden);
  apply(o.seed, c.seed);
  if (o.early_stop) c.early_stop = parse_early_stop(*o.early_stop);
  if (o.disable_ale) c.disable_ale_supervision = true;
  if (o.literal_orth) c.literal_orth_penalty = true;
  if (o.layernorm) c.enable_layernorm = true;
  if (o.no_isolation_check) c.check_isolation = false;
  c.validate();
  return c;
}

nlohmann::ordered_json config_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["warmup_fraction"] = c.warmup_fraction;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["hidden"] = c.hidden;
  j["dropout"] = c.dropout;
  j["early_stop"] = c.early_stop == EarlyStop::val_loss ? "val_loss" : "val_rho_ale";
  j["check_isolation"] = c.check_isolation;
  j["disable_ale_supervision"] = c.disable_ale_supervision;
  j["literal_orth_penalty"] = c.literal_orth_penalty;
  j["enable_layernorm"] = c.enable_layernorm;
  j["enable_decorr"] = c.enable_decorr;
  j["loss"] = {{"lambda_concept", c.loss.lambda_concept}, {"lambda_epi", c.loss.lambda_epi},
               {"lambda_ale", c.loss.lambda_ale},         {"beta", c.loss.beta},
               {"lambda_orth", c.loss.lambda_orth},       {"lambda_decorr", c.loss.lambda_decorr},
               {"alpha", c.loss.alpha},                   {"sigma_min", c.loss.sigma_min},
               {"sigma_max", c.loss.sigma_max},           {"sigma_prior", c.loss.sigma_prior}};
  return j;
}

int cmd_train(const TrainOpts& o) {
  const TrainConfig cfg = build_train_config(o);
  const Dataset ds = load_dataset(o.data);
  ensure_dir(o.out);
  const auto log = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " lr=" << format_double(r.lr) << " loss=" << format_double(r.train.total)
              << " val_loss=" << format_double(r.val_loss) << " val_rho_ale_h=" << format_double(r.val_rho_ale_h)
              << " val_rho_epi_ale=" << format_double(r.val_rho_epi_ale)
              << " val_acc=" << format_double(r.val_accuracy);
    if (std::isnan(r.isolation_dev))
      std::cout << " isolation=unchecked";
    else
      std::cout << " isolation_dev=" << format_double(r.isolation_dev) << (r.coupled ? " (heads coupled)" : "");
    std::cout << std::endl;
  };
  const TrainResult res = train(ds, cfg, log);
  const fs::path ckpt = fs::path(o.out) / "model.ckpt";
  save_checkpoint(res.params, ckpt);
  {
    auto f = open_out(fs::path(o.out) / "history.csv");
    write_history_csv(res.history, f);
  }
  {
    auto f = open_out(fs::path(o.out) / "train_config.json");
    f << config_json(cfg).dump(2) << '\n';
  }
  std::cout << "best_epoch=" << res.history.best_epoch << " epochs_run=" << res.history.epochs.size()
            << " stopped_early=" << (res.history.stopped_early ? "true" : "false") << '\n'
            << "wrote " << ckpt.string() << '\n';
  return 0;
}

// ---- eval / route ----

struct EvalOpts {
  std::string data, model, split = "test", out;
  std::optional<double> eu_threshold, au_threshold;
};

int cmd_eval(const EvalOpts& o) {
  const Dataset ds = load_dataset(o.data);
  const ModelParams p = load_checkpoint(o.model, ds.d, ds.C, ds.K, ds.J);
  const EvalSummary s = evaluate_model(ds, p, split_range(ds, o.split));
  const auto report = report_json(s);
  if (!o.out.empty()) {
    ensure_dir(o.out);
    {
      auto f = open_out(fs::path(o.out) / "report.json");
      f << report.dump(2) << '\n';
    }
    {
      auto f = open_out(fs::path(o.out) / "metrics.csv");
      write_metrics_csv(s, f);
    }
    {
      auto f = open_out(fs::path(o.out) / "stratified.csv");
      write_stratified_csv(s.strat_epi, "u_epi", f);
      std::ostringstream rest;
      write_stratified_csv(s.strat_entropy, "predictive_entropy", rest);
      const std::string r = rest.str();
      f << r.substr(r.find('\n') + 1);  // single header
    }
  }
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_route(const EvalOpts& o) {
  if (o.eu_threshold.has_value() != o.au_threshold.has_value())
    fail(Errc::InvalidConfig, "--eu-threshold and --au-threshold go together");
  const Dataset ds = load_dataset(o.data);
  const ModelParams p = load_checkpoint(o.model, ds.d, ds.C, ds.K, ds.J);
  const Range r = split_range(ds, o.split);
  const auto preds = infer_all(p, ds.embeddings_of(r));
  std::vector<int> correct;
  for (std::size_t j = 0; j < preds.size(); ++j) correct.push_back(preds[j].y_hat == ds.task[r.begin + j] ? 1 : 0);
  std::optional<std::pair<double, double>> th;
  if (o.eu_threshold) th = std::make_pair(*o.eu_threshold, *o.au_threshold);
  const QuadrantTable t = quadrant_route(preds, correct, th);
  std::cout << "t_epi=" << format_double(t.t_epi) << " t_ale=" << format_double(t.t_ale)
            << (th ? " (explicit)" : " (medians)") << '\n';
  for (const auto& row : t.rows)
    std::cout << action_name(row.action) << " count=" << row.count
              << " accuracy=" << (row.accuracy ? format_double(*row.accuracy) : std::string("NA")) << '\n';
  std::cout << "balance=" << format_double(t.balance) << '\n';
  if (t.degenerate_medians) std::cout << "warning: more than half the values tie with a median threshold\n";
  if (!o.out.empty()) {
    ensure_dir(o.out);
    {
      auto f = open_out(fs::path(o.out) / "quadrants.csv");
      write_quadrant_csv(t, f);
    }
    auto f = open_out(fs::path(o.out) / "quadrants.json");
    f << quadrant_json(t).dump(2) << '\n';
  }
  return 0;
}

// ---- gradcheck ----

struct GradOpts {
  std::string data, model;
  std::uint64_t seed = 0;
  int batch = 16;
  int hidden = 16;
  std::optional<double> lambda_d;
  bool inject_fault = false;
  std::size_t fd_coords = 10;
};

int cmd_gradcheck(const GradOpts& o) {
  if (o.batch < 1) fail(Errc::InvalidConfig, "--batch must be >= 1");
  Dataset ds;
  if (o.data.empty()) {
    SynthConfig sc;
    sc.n = o.batch;
    sc.d = 16;
    sc.seed = o.seed;
    ds = synth_generate(sc);
  } else {
    ds = load_dataset(o.data);
  }
  const ModelParams p = o.model.empty() ? init_params(ModelDims{ds.d, ds.C, ds.K, ds.J, o.hidden}, o.seed)
                                        : load_checkpoint(o.model, ds.d, ds.C, ds.K, ds.J);
  const auto batch = ds.samples(Range{0, std::min<std::size_t>(static_cast<std::size_t>(o.batch), ds.n)});
  LossConfig cfg;
  if (o.lambda_d) cfg.lambda_decorr = *o.lambda_d;
  cfg.validate();

  const auto wiring = o.inject_fault ? detail::Wiring::entropy_into_ale_input : detail::Wiring::standard;
  if (o.inject_fault) std::cout << "fault injected: annotator entropy wired into the ale head input\n";
  const IsolationReport iso = detail::isolation_report_impl(batch, p, cfg, wiring);
  std::cout << "isolation dev_ale=" << format_double(iso.dev_ale) << " dev_epi=" << format_double(iso.dev_epi)
            << " max_leak=" << format_double(iso.max_leak) << '\n';
  if (iso.coupled)
    std::cout << "heads intentionally coupled (lambda_d=" << format_double(cfg.lambda_decorr)
              << "); isolation not required\n";
  if (!iso.passed()) fail(Errc::IsolationViolated, describe(iso));

  const FdReport fd = finite_difference_check(batch, p, cfg, o.fd_coords, 1e-4, o.seed);
  std::cout << "finite_difference checked=" << fd.checked << " failures=" << fd.failures
            << " max_rel_err=" << format_double(fd.max_rel_err) << (fd.worst.empty() ? "" : " worst=" + fd.worst)
            << '\n';
  if (!fd.passed()) {
    std::cout << "FAIL: analytic gradient disagrees with finite differences\n";
    return kExitRuntime;
  }
  std::cout << "PASS\n";
  return 0;
}

// ---- kl ----

struct KlOpts {
  std::string file, inline_json;
};

int cmd_kl(const KlOpts& o) {
  if (o.file.empty() == o.inline_json.empty()) fail(Errc::InvalidConfig, "give exactly one of --ellipsoid or --json");
  nlohmann::json j;
  if (!o.file.empty()) {
    j = load_json_file(o.file);
  } else {
    try {
      j = nlohmann::json::parse(o.inline_json);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::InvalidConfig, std::string("--json: ") + e.what());
    }
  }
  if (!j.is_object()) fail(Errc::InvalidConfig, "ellipsoid must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "mu" && k != "sigma" && k != "sigma_prior") fail(Errc::InvalidConfig, "unknown key \"" + k + "\"");
  const auto vec = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_array()) fail(Errc::InvalidConfig, std::string("\"") + key + "\" must be an array");
    Vector v(static_cast<Eigen::Index>(j.at(key).size()));
    for (std::size_t i = 0; i < j.at(key).size(); ++i) {
      if (!j.at(key)[i].is_number()) fail(Errc::InvalidConfig, std::string("\"") + key + "\" must hold numbers");
      v[static_cast<Eigen::Index>(i)] = j.at(key)[i].get<double>();
    }
    return v;
  };
  double prior = 1.0;
  if (j.contains("sigma_prior")) {
    if (!j.at("sigma_prior").is_number()) fail(Errc::InvalidConfig, "\"sigma_prior\" must be a number");
    prior = j.at("sigma_prior").get<double>();
  }
  const CredalEllipsoid ell(vec("mu"), vec("sigma"));
  const HausdorffKl r = hausdorff_kl_with_grad(ell, prior);
  std::cout << "hausdorff_kl=" << format_double(r.value) << '\n';
  std::cout << "d_mu=";
  for (Eigen::Index k = 0; k < r.d_mu.size(); ++k) std::cout << (k ? "," : "") << format_double(r.d_mu[k]);
  std::cout << "\nd_sigma=";
  for (Eigen::Index k = 0; k < r.d_sigma.size(); ++k) std::cout << (k ? "," : "") << format_double(r.d_sigma[k]);
  std::cout << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational credal concept bottleneck models"};
  app.require_subcommand(1);

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-annotator dataset");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--config", so.config, "JSON synth config");
  synth->add_option("--n", so.n);
  synth->add_option("--d", so.d, "embedding width (even)");
  synth->add_option("--C", so.C, "concepts");
  synth->add_option("--K", so.K, "classes per concept");
  synth->add_option("--J", so.J, "task classes");
  synth->add_option("--A", so.A, "annotators per concept");
  synth->add_option("--ambiguity", so.ambiguity, "ambiguity strength in [0, 1]");
  synth->add_option("--epistemic-noise", so.noise, "epistemic noise in [0, 1]");
  synth->add_option("--seed", so.seed);

  TrainOpts to;
  auto* tr = app.add_subcommand("train", "train a model on a dataset's train split");
  tr->add_option("--data", to.data, "dataset manifest.json")->required();
  tr->add_option("--out", to.out, "output directory")->required();
  tr->add_option("--config", to.config, "JSON train config");
  tr->add_option("--preset", to.preset, "heads-fast, paper-e1, paper-g-cebab, paper-g-maqa");
  tr->add_option("--lr", to.lr);
  tr->add_option("--weight-decay", to.weight_decay);
  tr->add_option("--warmup", to.warmup, "warmup fraction");
  tr->add_option("--dropout", to.dropout);
  tr->add_option("--epochs", to.epochs);
  tr->add_option("--batch-size", to.batch_size);
  tr->add_option("--patience", to.patience);
  tr->add_option("--hidden", to.hidden);
  tr->add_option("--seed", to.seed);
  tr->add_option("--lambda-ale", to.lambda_ale);
  tr->add_option("--lambda-epi", to.lambda_epi);
  tr->add_option("--lambda-d", to.lambda_d, "decorrelation weight; > 0 couples the heads");
  tr->add_option("--beta", to.beta);
  tr->add_option("--early-stop", to.early_stop, "val_rho_ale or val_loss");
  tr->add_flag("--disable-ale-supervision", to.disable_ale);
  tr->add_flag("--literal-orth", to.literal_orth);
  tr->add_flag("--layernorm", to.layernorm);
  tr->add_flag("--no-isolation-check", to.no_isolation_check);

  EvalOpts eo;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--data", eo.data)->required();
  ev->add_option("--model", eo.model)->required();
  ev->add_option("--split", eo.split, "train, val, test or all");
  ev->add_option("--out", eo.out, "directory for report.json, metrics.csv, stratified.csv");

  EvalOpts ro;
  auto* rt = app.add_subcommand("route", "quadrant routing table");
  rt->add_option("--data", ro.data)->required();
  rt->add_option("--model", ro.model)->required();
  rt->add_option("--split", ro.split, "train, val, test or all");
  rt->add_option("--eu-threshold", ro.eu_threshold);
  rt->add_option("--au-threshold", ro.au_threshold);
  rt->add_option("--out", ro.out, "directory for quadrants.csv and quadrants.json");

  GradOpts go;
  auto* gc = app.add_subcommand("gradcheck", "head isolation and finite-difference checks");
  gc->add_option("--data", go.data, "dataset manifest (default: a small synthetic batch)");
  gc->add_option("--model", go.model, "checkpoint (default: fresh initialization)");
  gc->add_option("--seed", go.seed);
  gc->add_option("--batch", go.batch);
  gc->add_option("--hidden", go.hidden, "hidden width for a fresh model");
  gc->add_option("--fd-coords", go.fd_coords, "finite-difference coordinates per tensor");
  gc->add_option("--lambda-d", go.lambda_d);
  gc->add_flag("--inject-fault", go.inject_fault, "test hook: wire annotator entropy into the ale head");

  KlOpts ko;
  auto* kl = app.add_subcommand("kl", "Hausdorff KL of a diagonal ellipsoid against N(0, sigma_prior^2 I)");
  kl->add_option("--ellipsoid", ko.file, "JSON file {mu, sigma, sigma_prior}");
  kl->add_option("--json", ko.inline_json, "inline JSON {mu, sigma, sigma_prior}");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*synth) return cmd_synth(so);
    if (*tr) return cmd_train(to);
    if (*ev) return cmd_eval(eo);
    if (*rt) return cmd_route(ro);
    if (*gc) return cmd_gradcheck(go);
    if (*kl) return cmd_kl(ko);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_validation_error(e.code()) ? kExitValidation : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}
