#pragma once

// Run configuration: a flat JSON object whose keys double as CLI flags.

#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pinnpi/errors.hpp"
#include "pinnpi/problems.hpp"

namespace pinnpi {

using Json = nlohmann::ordered_json;

struct RunConfig {
  // problem
  std::string problem = "lqr";  // lqr | lqr1d | pendulum | cartpole | constant
  int dim = 0;                  // lqr, constant; 0 selects the catalog default
  int action_dim = 0;           // lqr; 0 means square
  std::optional<std::uint64_t> problem_seed;
  std::optional<double> u_max;
  double sigma = 0.1;
  std::optional<double> lambda;
  double half_width = 3.0;  // lqr / lqr1d / constant domain [-w, w]^d
  double cost = 1.0;        // constant problem

  // network and policy evaluation
  std::vector<int> hidden;  // empty selects the default architecture
  int N = 2048;
  int steps = 5000;
  double lr = 1e-3;
  double lr_final = 1e-4;
  std::optional<double> p_target;
  int resample_every = 200;
  int probe_size = 8192;
  int probe_every = 100;

  // outer loop
  int max_outer = 30;
  double stop_eps = 1e-3;
  bool warm_start = true;

  // oracles; unset means "when available"
  std::optional<bool> riccati;
  std::optional<bool> grid;
  int grid_nodes = 0;  // per axis; 0 selects 401 (1D) / 161 (2D)
  int oracle_points = 8192;

  // rollouts
  int rollouts = 64;  // per iteration; 0 disables
  std::optional<double> T;
  double dt = 1e-2;

  // run
  std::uint64_t seed = 0;
  int threads = 0;  // 0 keeps the OpenMP default
  std::string out = "run";
  bool checkpoints = true;
  bool curves = true;
};

namespace detail {

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "problem",  "dim",         "action_dim",  "problem_seed",   "u_max",       "sigma",   "lambda",
      "half_width", "cost",      "hidden",      "N",              "steps",       "lr",      "lr_final",
      "p_target", "resample_every", "probe_size", "probe_every",   "max_outer",   "stop_eps", "warm_start",
      "riccati",  "grid",        "grid_nodes",  "oracle_points",  "rollouts",    "T",       "dt",
      "seed",     "threads",     "out",         "checkpoints",    "curves"};
  return keys;
}

template <class T>
void read_key(const Json& j, const char* key, T& dst) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <class T>
void read_key(const Json& j, const char* key, std::optional<T>& dst) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read_key(j, key, v);
  dst = v;
}

template <class T>
void write_key(Json& j, const char* key, const std::optional<T>& v) {
  j[key] = v ? Json(*v) : Json(nullptr);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  static const std::set<std::string> problems = {"lqr", "lqr1d", "pendulum", "cartpole", "constant"};
  if (!problems.count(c.problem)) throw ConfigError("unknown problem '" + c.problem + "'");
  auto positive = [](const char* key, double v) {
    if (!(v > 0)) throw ConfigError(std::string(key) + " must be > 0");
  };
  auto non_negative = [](const char* key, double v) {
    if (!(v >= 0)) throw ConfigError(std::string(key) + " must be >= 0");
  };
  non_negative("dim", c.dim);
  non_negative("action_dim", c.action_dim);
  if (c.dim > 20) throw ConfigError("dim must be <= 20");
  if (c.u_max) positive("u_max", *c.u_max);
  if (c.u_max && c.problem != "lqr" && c.problem != "lqr1d")
    throw ConfigError("u_max is fixed for problem '" + c.problem + "'");
  non_negative("sigma", c.sigma);
  if (c.lambda) positive("lambda", *c.lambda);
  positive("half_width", c.half_width);
  for (int w : c.hidden)
    if (w < 1) throw ConfigError("hidden widths must be >= 1");
  positive("N", c.N);
  non_negative("steps", c.steps);
  positive("lr", c.lr);
  positive("lr_final", c.lr_final);
  if (c.p_target) non_negative("p_target", *c.p_target);
  non_negative("resample_every", c.resample_every);
  positive("probe_size", c.probe_size);
  positive("probe_every", c.probe_every);
  positive("max_outer", c.max_outer);
  non_negative("stop_eps", c.stop_eps);
  non_negative("grid_nodes", c.grid_nodes);
  if (c.grid_nodes != 0 && c.grid_nodes < 3) throw ConfigError("grid_nodes must be >= 3");
  if (c.oracle_points < 1000) throw ConfigError("oracle_points must be >= 1000");
  non_negative("rollouts", c.rollouts);
  if (c.rollouts == 1) throw ConfigError("rollouts must be 0 or >= 2");
  if (c.T) positive("T", *c.T);
  positive("dt", c.dt);
  if (c.T && *c.T < c.dt) throw ConfigError("T must be >= dt");
  non_negative("threads", c.threads);
  if (c.out.empty()) throw ConfigError("out must not be empty");
}

inline RunConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& keys = detail::config_keys();
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown config key '" + k + "'");
  RunConfig c;
  using detail::read_key;
  read_key(j, "problem", c.problem);
  read_key(j, "dim", c.dim);
  read_key(j, "action_dim", c.action_dim);
  read_key(j, "problem_seed", c.problem_seed);
  read_key(j, "u_max", c.u_max);
  read_key(j, "sigma", c.sigma);
  read_key(j, "lambda", c.lambda);
  read_key(j, "half_width", c.half_width);
  read_key(j, "cost", c.cost);
  read_key(j, "hidden", c.hidden);
  read_key(j, "N", c.N);
  read_key(j, "steps", c.steps);
  read_key(j, "lr", c.lr);
  read_key(j, "lr_final", c.lr_final);
  read_key(j, "p_target", c.p_target);
  read_key(j, "resample_every", c.resample_every);
  read_key(j, "probe_size", c.probe_size);
  read_key(j, "probe_every", c.probe_every);
  read_key(j, "max_outer", c.max_outer);
  read_key(j, "stop_eps", c.stop_eps);
  read_key(j, "warm_start", c.warm_start);
  read_key(j, "riccati", c.riccati);
  read_key(j, "grid", c.grid);
  read_key(j, "grid_nodes", c.grid_nodes);
  read_key(j, "oracle_points", c.oracle_points);
  read_key(j, "rollouts", c.rollouts);
  read_key(j, "T", c.T);
  read_key(j, "dt", c.dt);
  read_key(j, "seed", c.seed);
  read_key(j, "threads", c.threads);
  read_key(j, "out", c.out);
  read_key(j, "checkpoints", c.checkpoints);
  read_key(j, "curves", c.curves);
  validate(c);
  return c;
}

inline Json config_to_json(const RunConfig& c) {
  Json j;
  j["problem"] = c.problem;
  j["dim"] = c.dim;
  j["action_dim"] = c.action_dim;
  detail::write_key(j, "problem_seed", c.problem_seed);
  detail::write_key(j, "u_max", c.u_max);
  j["sigma"] = c.sigma;
  detail::write_key(j, "lambda", c.lambda);
  j["half_width"] = c.half_width;
  j["cost"] = c.cost;
  j["hidden"] = c.hidden;
  j["N"] = c.N;
  j["steps"] = c.steps;
  j["lr"] = c.lr;
  j["lr_final"] = c.lr_final;
  detail::write_key(j, "p_target", c.p_target);
  j["resample_every"] = c.resample_every;
  j["probe_size"] = c.probe_size;
  j["probe_every"] = c.probe_every;
  j["max_outer"] = c.max_outer;
  j["stop_eps"] = c.stop_eps;
  j["warm_start"] = c.warm_start;
  detail::write_key(j, "riccati", c.riccati);
  detail::write_key(j, "grid", c.grid);
  j["grid_nodes"] = c.grid_nodes;
  j["oracle_points"] = c.oracle_points;
  j["rollouts"] = c.rollouts;
  detail::write_key(j, "T", c.T);
  j["dt"] = c.dt;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["out"] = c.out;
  j["checkpoints"] = c.checkpoints;
  j["curves"] = c.curves;
  return j;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  try {
    return Json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

/// Command-line override: the text is read as JSON when it parses (numbers,
/// booleans, arrays, null) and as a plain string otherwise.
inline void apply_override(Json& j, const std::string& key, const std::string& text) {
  const auto& keys = detail::config_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  Json v = Json::parse(text, nullptr, false);
  if (v.is_discarded()) {
    // bare comma lists such as 64,64,64
    v = Json::parse("[" + text + "]", nullptr, false);
    if (v.is_discarded() || key != "hidden") v = text;
  }
  j[key] = v;
}

/// Module seeds derived from the run seed by fixed offsets.
struct SeedPlan {
  std::uint64_t problem, net, train, probe, oracle, rollout;
};

inline SeedPlan seed_plan(const RunConfig& c) {
  return {c.problem_seed.value_or(c.seed), c.seed + 1, c.seed + 2, c.seed + 3, c.seed + 4, c.seed + 5};
}

inline ControlProblem build_problem(const RunConfig& c) {
  validate(c);
  if (c.problem == "lqr") {
    LqrOptions o;
    o.d = c.dim ? c.dim : 5;
    o.m = c.action_dim;
    o.seed = seed_plan(c).problem;
    o.u_max = c.u_max.value_or(10.0);
    o.sigma_scale = c.sigma;
    o.lambda = c.lambda.value_or(1.0);
    o.domain_half_width = c.half_width;
    return make_lqr(o);
  }
  if (c.problem == "lqr1d") {
    if (c.dim > 1) throw ConfigError("lqr1d is one-dimensional");
    return make_scalar_lqr(c.u_max.value_or(10.0), c.lambda.value_or(2.0), c.sigma, c.half_width);
  }
  if (c.problem == "constant") {
    const int d = c.dim ? c.dim : 1;
    return make_constant_cost(c.cost, c.lambda.value_or(1.0), d, c.sigma, Box::cube(d, -c.half_width, c.half_width));
  }
  if (c.dim != 0) throw ConfigError("dim is fixed for problem '" + c.problem + "'");
  if (c.problem == "pendulum") return make_pendulum(c.sigma, c.lambda.value_or(1.0));
  return make_cartpole(c.sigma, c.lambda.value_or(1.0));
}

}  // namespace pinnpi
