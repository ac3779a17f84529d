#include <cmath>
#include <functional>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "ccbm/config.hpp"
#include "ccbm/report.hpp"

using namespace ccbm;
using nlohmann::json;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Io;  // sentinel: nothing thrown
}

}  // namespace

TEST(Config, EmptyObjectIsDefaultPreset) {
  const TrainConfig c = train_config_from_json(json::object());
  const TrainConfig d = preset("heads-fast");
  EXPECT_EQ(c.lr, d.lr);
  EXPECT_EQ(c.epochs, d.epochs);
  EXPECT_EQ(c.early_stop, EarlyStop::val_rho_ale);
}

TEST(Config, PresetAppliesBeforeOverrides) {
  const TrainConfig c = train_config_from_json(json{{"lr", 0.01}, {"preset", "paper-g-cebab"}, {"loss", {{"beta", 0.3}}}});
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_EQ(c.loss.beta, 0.3);
  EXPECT_EQ(c.batch_size, 32);
  EXPECT_EQ(c.early_stop, EarlyStop::val_loss);
  EXPECT_TRUE(c.enable_decorr);
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_EQ(code_of([] { train_config_from_json(json{{"learning_rate", 1e-3}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { train_config_from_json(json{{"loss", {{"gamma", 1}}}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { train_config_from_json(json{{"epochs", "ten"}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { train_config_from_json(json{{"epochs", 2.5}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { train_config_from_json(json{{"early_stop", "val_acc"}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { train_config_from_json(json{{"preset", "nope"}}); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { train_config_from_json(json::array()); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { synth_config_from_json(json{{"N", 10}}); }), Errc::InvalidConfig);
  EXPECT_TRUE(is_validation_error(Errc::InvalidConfig));
}

TEST(Config, IntegersAcceptedForDoubles) {
  const TrainConfig c = train_config_from_json(json{{"loss", {{"lambda_ale", 2}}}});
  EXPECT_EQ(c.loss.lambda_ale, 2.0);
  const SynthConfig s = synth_config_from_json(json{{"n", 50}, {"ambiguity_strength", 1}, {"seed", 9}});
  EXPECT_EQ(s.n, 50);
  EXPECT_EQ(s.ambiguity_strength, 1.0);
  EXPECT_EQ(s.seed, 9u);
}

TEST(Config, MissingFileIsIo) {
  EXPECT_EQ(code_of([] { load_json_file("/nonexistent/cfg.json"); }), Errc::Io);
}

TEST(Report, KeysAndCsvLayout) {
  SynthConfig sc;
  sc.n = 400;
  sc.seed = 12;
  const Dataset ds = synth_generate(sc);
  const ModelParams p = init_params({ds.d, ds.C, ds.K, ds.J, 16}, 3);
  const EvalSummary s = evaluate_model(ds, p, ds.splits.test);
  const auto j = report_json(s);
  for (const char* k : {"n", "rho_epi_ale", "rho_epi_err", "rho_ale_h", "auroc", "stratified_auroc", "fisher_ci", "accuracy"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["n"], ds.splits.test.size());
  EXPECT_TRUE(j["stratified_auroc"]["u_epi"].contains("delta_high_minus_low"));

  std::ostringstream csv;
  write_metrics_csv(s, csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "metric,value,ci_lo,ci_hi");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 7);
}

TEST(Report, UntrainedModelIsNearChance) {
  SynthConfig sc;
  sc.n = 3000;
  sc.seed = 21;
  Dataset ds = synth_generate(sc);

  // structured embeddings: a random head reads the corruption factor with a random sign,
  // so only the average over initializations sits at chance
  double mean_auc = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const EvalSummary s = evaluate_model(ds, init_params({ds.d, ds.C, ds.K, ds.J, 32}, seed), ds.all());
    ASSERT_TRUE(s.auroc_epi.has_value());
    mean_auc += *s.auroc_epi / 10.0;
  }
  EXPECT_NEAR(mean_auc, 0.5, 0.1);

  CounterRng g(5, "test/noise-embeddings");
  for (auto& v : ds.embeddings) v = static_cast<float>(g.normal());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const EvalSummary s = evaluate_model(ds, init_params({ds.d, ds.C, ds.K, ds.J, 32}, seed), ds.all());
    EXPECT_NEAR(*s.auroc_epi, 0.5, 0.1) << seed;
    EXPECT_LT(std::abs(s.rho_epi_err.rho.value), 0.1) << seed;
    EXPECT_LT(std::abs(s.rho_ale_h.rho.value), 0.1) << seed;
  }
}
