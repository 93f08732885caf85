#pragma once

// Run configuration: a flat JSON object. `problem` selects the benchmark and
// its defaults; every other key is optional and overrides one default.
// Unknown keys, and keys that belong to a different problem, are errors.

#include <cstdint>
#include <fstream>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mfcscore/problems.hpp"
#include "mfcscore/training.hpp"

namespace mfcscore {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string problem;
  std::size_t dim = 1;
  TrainConfig train;

  // Problem constants. Only those of the selected problem are accepted.
  double horizon = 0.5;
  double gamma = 0.1;  // entropy, lq
  double beta = 5.0;   // lq
  SystemicRiskProblem::Params systemic;

  std::string out;  // empty: chosen by the command
  bool plot = true;
  std::size_t seeds = 1;
  bool seeds_given = false;  // compare runs 5 seeds unless told otherwise

  std::unique_ptr<Problem> make_problem() const;
  nlohmann::json resolved() const;
};

namespace detail {

inline const std::set<std::string>& common_keys() {
  static const std::set<std::string> keys{
      "problem",    "T",          "lr",        "sigma_K",   "N",         "N_T",
      "k_end",      "width",      "seed",      "mode",      "score_detach", "validation_size",
      "adam_beta1", "adam_beta2", "adam_eps",  "out",       "plot",      "seeds"};
  return keys;
}

inline std::set<std::string> problem_keys(const std::string& id) {
  if (id == "entropy1d" || id == "entropy2d") return {"gamma"};
  if (id == "lq1d" || id == "lq2d") return {"beta", "gamma"};
  return {"sigma", "a", "q", "eps", "c", "rho0_mean", "rho0_std", "riccati_steps", "penalty"};
}

template <class T>
T get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: key '" + key + "' has the wrong type");
  }
}

inline double positive(const nlohmann::json& j, const std::string& key) {
  const double v = get_as<double>(j, key);
  if (!(v > 0.0)) throw ConfigError("config: '" + key + "' must be positive");
  return v;
}

inline std::size_t count(const nlohmann::json& j, const std::string& key, std::size_t min) {
  if (!j.at(key).is_number_integer() && !j.at(key).is_number_unsigned()) {
    throw ConfigError("config: '" + key + "' must be an integer");
  }
  const auto v = j.at(key).get<long long>();
  if (v < static_cast<long long>(min)) {
    throw ConfigError("config: '" + key + "' must be >= " + std::to_string(min));
  }
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Defaults for a problem id (the reference parameter table).
inline RunConfig default_config(const std::string& id) {
  RunConfig c;
  c.problem = id;
  c.train.steps = 200;
  c.train.intervals = 10;
  c.train.width = 30;
  if (id == "entropy1d") {
    c.train.lr = 0.02;
    c.train.bandwidth = 0.35;
    c.train.batch = 200;
  } else if (id == "entropy2d") {
    c.dim = 2;
    c.train.lr = 0.1;
    c.train.bandwidth = 0.4;
    c.train.batch = 1000;
  } else if (id == "lq1d") {
    c.train.lr = 0.1;
    c.train.bandwidth = 0.35;
    c.train.batch = 200;
  } else if (id == "lq2d") {
    c.dim = 2;
    c.train.lr = 0.1;
    c.train.bandwidth = 0.4;
    c.train.batch = 1000;
  } else if (id == "systemic") {
    c.horizon = 0.1;
    c.train.lr = 0.02;
    c.train.bandwidth = 0.3;
    c.train.batch = 400;
  } else {
    throw ConfigError("config: unknown problem '" + id +
                      "' (expected entropy1d, entropy2d, lq1d, lq2d or systemic)");
  }
  c.systemic.horizon = c.horizon;
  c.train.validation_size = 1000 * c.dim;
  return c;
}

inline RunConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  if (!j.contains("problem")) throw ConfigError("config: missing 'problem'");
  RunConfig c = default_config(detail::get_as<std::string>(j, "problem"));
  const auto extra = detail::problem_keys(c.problem);
  for (const auto& [key, value] : j.items()) {
    if (!detail::common_keys().contains(key) && !extra.contains(key)) {
      throw ConfigError("config: unknown key '" + key + "' for problem " + c.problem);
    }
  }
  auto has = [&](const char* k) { return j.contains(k); };
  using detail::count;
  using detail::get_as;
  using detail::positive;
  if (has("T")) c.horizon = positive(j, "T");
  if (has("lr")) c.train.lr = positive(j, "lr");
  if (has("sigma_K")) c.train.bandwidth = positive(j, "sigma_K");
  if (has("N")) c.train.batch = count(j, "N", 2);
  if (has("N_T")) c.train.intervals = count(j, "N_T", 1);
  if (has("k_end")) c.train.steps = count(j, "k_end", 0);
  if (has("width")) c.train.width = count(j, "width", 1);
  if (has("seed")) c.train.seed = static_cast<std::uint64_t>(count(j, "seed", 0));
  if (has("validation_size")) c.train.validation_size = count(j, "validation_size", 2);
  if (has("score_detach")) c.train.score_detach = get_as<bool>(j, "score_detach");
  if (has("adam_beta1")) c.train.adam.beta1 = get_as<double>(j, "adam_beta1");
  if (has("adam_beta2")) c.train.adam.beta2 = get_as<double>(j, "adam_beta2");
  if (has("adam_eps")) c.train.adam.eps = positive(j, "adam_eps");
  if (has("mode")) {
    try {
      c.train.mode = rollout_mode_from_string(get_as<std::string>(j, "mode"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (has("out")) c.out = get_as<std::string>(j, "out");
  if (has("plot")) c.plot = get_as<bool>(j, "plot");
  if (has("seeds")) {
    c.seeds = count(j, "seeds", 1);
    c.seeds_given = true;
  }
  if (has("gamma")) c.gamma = positive(j, "gamma");
  if (has("beta")) c.beta = positive(j, "beta");
  auto& s = c.systemic;
  s.horizon = c.horizon;
  if (has("sigma")) s.sigma = positive(j, "sigma");
  if (has("a")) s.a = get_as<double>(j, "a");
  if (has("q")) s.q = get_as<double>(j, "q");
  if (has("eps")) s.eps = get_as<double>(j, "eps");
  if (has("c")) s.c = get_as<double>(j, "c");
  if (has("rho0_mean")) s.initial_mean = get_as<double>(j, "rho0_mean");
  if (has("rho0_std")) s.initial_std = positive(j, "rho0_std");
  if (has("riccati_steps")) s.riccati_steps = count(j, "riccati_steps", 100);
  if (has("penalty")) {
    const auto p = get_as<std::string>(j, "penalty");
    if (p == "squared") s.penalty = PenaltyReading::squared;
    else if (p == "literal") s.penalty = PenaltyReading::literal;
    else throw ConfigError("config: 'penalty' must be squared or literal");
  }
  if (!(c.train.adam.beta1 >= 0.0 && c.train.adam.beta1 < 1.0 && c.train.adam.beta2 >= 0.0 &&
        c.train.adam.beta2 < 1.0)) {
    throw ConfigError("config: Adam betas must lie in [0, 1)");
  }
  // Surface problem-construction errors (e.g. a Riccati blow-up) as config errors.
  try {
    (void)c.make_problem();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

inline std::unique_ptr<Problem> RunConfig::make_problem() const {
  if (problem == "entropy1d" || problem == "entropy2d") {
    return std::make_unique<EntropyPotentialProblem>(EntropyPotentialProblem::Params{dim, horizon, gamma});
  }
  if (problem == "lq1d" || problem == "lq2d") {
    return std::make_unique<LQProblem>(LQProblem::Params{dim, horizon, beta, gamma});
  }
  auto s = systemic;
  s.horizon = horizon;
  return std::make_unique<SystemicRiskProblem>(s);
}

/// Every field after defaults, in the same flat-key form as the input.
inline nlohmann::json RunConfig::resolved() const {
  nlohmann::json j = to_json(train);
  j["problem"] = problem;
  j["T"] = horizon;
  j["plot"] = plot;
  j["seeds"] = seeds;
  if (!out.empty()) j["out"] = out;
  if (problem == "entropy1d" || problem == "entropy2d") {
    j["gamma"] = gamma;
  } else if (problem == "lq1d" || problem == "lq2d") {
    j["beta"] = beta;
    j["gamma"] = gamma;
  } else {
    j["sigma"] = systemic.sigma;
    j["a"] = systemic.a;
    j["q"] = systemic.q;
    j["eps"] = systemic.eps;
    j["c"] = systemic.c;
    j["rho0_mean"] = systemic.initial_mean;
    j["rho0_std"] = systemic.initial_std;
    j["riccati_steps"] = systemic.riccati_steps;
    j["penalty"] = systemic.penalty == PenaltyReading::squared ? "squared" : "literal";
  }
  return j;
}

}  // namespace mfcscore
