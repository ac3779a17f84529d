#pragma once

// JSON run configuration with a strict schema: unknown keys and wrong types are
// InvalidConfig. Command-line flags are applied on top by the caller.
//
// train config keys
//   preset (applied first), lr, weight_decay, batch_size, epochs, warmup_fraction,
//   patience, seed, hidden, dropout, early_stop ("val_rho_ale" | "val_loss"),
//   check_isolation, disable_ale_supervision, literal_orth_penalty,
//   enable_layernorm, enable_decorr, and a "loss" object with lambda_concept,
//   lambda_epi, lambda_ale, beta, lambda_orth, lambda_decorr, alpha, sigma_min,
//   sigma_max, sigma_prior.
// synth config keys
//   n, d, C, K, J, A, ambiguity_strength, epistemic_noise, seed, vote_blend,
//   input_noise, factor_noise, corruption_min, corruption_max.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "ccbm/error.hpp"
#include "ccbm/synth.hpp"
#include "ccbm/train.hpp"

namespace ccbm {

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(Errc::Io, "cannot open config " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::InvalidConfig, path.string() + ": " + e.what());
  }
}

namespace detail {

class Fields {
 public:
  Fields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(Errc::InvalidConfig, where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      ok = v.is_number_unsigned() || (v.is_number_integer() && v.template get<long long>() >= 0);
    } else if constexpr (std::is_integral_v<T>) {
      ok = v.is_number_integer();
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else {
      ok = v.is_string();
    }
    if (!ok) fail(Errc::InvalidConfig, where_ + "." + key + " has the wrong type");
    out = v.get<T>();
  }

  const nlohmann::json* object(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(Errc::InvalidConfig, where_ + ": unknown key \"" + k + "\"");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline EarlyStop parse_early_stop(const std::string& s) {
  if (s == "val_rho_ale") return EarlyStop::val_rho_ale;
  if (s == "val_loss") return EarlyStop::val_loss;
  fail(Errc::InvalidConfig, "early_stop must be \"val_rho_ale\" or \"val_loss\", got \"" + s + "\"");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::Fields f(j, "train config");
  std::string name = "heads-fast";
  f.get("preset", name);
  TrainConfig c = preset(name);
  f.get("lr", c.lr);
  f.get("weight_decay", c.weight_decay);
  f.get("batch_size", c.batch_size);
  f.get("epochs", c.epochs);
  f.get("warmup_fraction", c.warmup_fraction);
  f.get("patience", c.patience);
  f.get("seed", c.seed);
  f.get("hidden", c.hidden);
  f.get("dropout", c.dropout);
  std::string es = c.early_stop == EarlyStop::val_loss ? "val_loss" : "val_rho_ale";
  f.get("early_stop", es);
  c.early_stop = parse_early_stop(es);
  f.get("check_isolation", c.check_isolation);
  f.get("disable_ale_supervision", c.disable_ale_supervision);
  f.get("literal_orth_penalty", c.literal_orth_penalty);
  f.get("enable_layernorm", c.enable_layernorm);
  f.get("enable_decorr", c.enable_decorr);
  if (const auto* l = f.object("loss")) {
    detail::Fields g(*l, "train config.loss");
    g.get("lambda_concept", c.loss.lambda_concept);
    g.get("lambda_epi", c.loss.lambda_epi);
    g.get("lambda_ale", c.loss.lambda_ale);
    g.get("beta", c.loss.beta);
    g.get("lambda_orth", c.loss.lambda_orth);
    g.get("lambda_decorr", c.loss.lambda_decorr);
    g.get("alpha", c.loss.alpha);
    g.get("sigma_min", c.loss.sigma_min);
    g.get("sigma_max", c.loss.sigma_max);
    g.get("sigma_prior", c.loss.sigma_prior);
    g.reject_unknown();
  }
  f.reject_unknown();
  return c;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  detail::Fields f(j, "synth config");
  SynthConfig c;
  f.get("n", c.n);
  f.get("d", c.d);
  f.get("C", c.C);
  f.get("K", c.K);
  f.get("J", c.J);
  f.get("A", c.A);
  f.get("ambiguity_strength", c.ambiguity_strength);
  f.get("epistemic_noise", c.epistemic_noise);
  f.get("seed", c.seed);
  f.get("vote_blend", c.vote_blend);
  f.get("input_noise", c.input_noise);
  f.get("factor_noise", c.factor_noise);
  f.get("corruption_min", c.corruption_min);
  f.get("corruption_max", c.corruption_max);
  f.reject_unknown();
  return c;
}

}  // namespace ccbm
