// pinnpi: command-line front end.
//
//   pinnpi solve --config configs/lqr1d.json --seed 3 --threads 1
//   pinnpi compare-oracle --config configs/lqr1d.json
//   pinnpi rollout-eval --config configs/lqr1d.json --x0 1.0
//   pinnpi validate-assumptions --config configs/lqr5d.json
//   pinnpi grid-solve --config configs/pendulum.json
//
// Every configuration key is also a flag (--N 1024, --hidden 32,32) and
// overrides the config file.

#include <CLI11.hpp>
#include <iostream>
#include <map>

#include "pinnpi/driver.hpp"

using namespace pinnpi;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kNumerical = 3, kOracle = 4, kAssumption = 5 };

struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
};

void add_config_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--config", ov.config_path, "JSON run configuration");
  for (const auto& key : detail::config_keys())
    cmd->add_option("--" + key, ov.values[key], "config key '" + key + "'");
}

RunConfig resolve(const Overrides& ov) {
  Json j = ov.config_path.empty() ? Json::object() : read_json_file(ov.config_path);
  for (const auto& [key, text] : ov.values)
    if (!text.empty()) apply_override(j, key, text);
  return config_from_json(j);
}

std::string latest_checkpoint(const RunConfig& cfg) {
  int best = -1;
  std::string path;
  if (fs::exists(cfg.out))
    for (const auto& e : fs::directory_iterator(cfg.out)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("ckpt_", 0) == 0 && std::stoi(name.substr(5)) > best) {
        best = std::stoi(name.substr(5));
        path = e.path().string();
      }
    }
  if (path.empty()) throw ConfigError("no checkpoints in " + cfg.out);
  return path;
}

Vec parse_point(const std::string& text, int d) {
  Vec x(d);
  std::stringstream ss(text);
  std::string tok;
  int i = 0;
  while (std::getline(ss, tok, ',')) {
    if (i >= d) throw ConfigError("--x0 has more than " + std::to_string(d) + " coordinates");
    x[i++] = std::stod(tok);
  }
  if (i != d) throw ConfigError("--x0 needs " + std::to_string(d) + " coordinates");
  return x;
}

int run(int argc, char** argv) {
  CLI::App app{"Physics-informed policy iteration for stochastic optimal control"};
  app.require_subcommand(1);

  Overrides solve_ov, cmp_ov, roll_ov, val_ov, grid_ov;
  auto* solve = app.add_subcommand("solve", "run PINN policy iteration");
  add_config_flags(solve, solve_ov);

  auto* cmp = app.add_subcommand("compare-oracle", "compare the checkpoints of a run against an oracle");
  add_config_flags(cmp, cmp_ov);
  std::string reference;
  cmp->add_option("--reference", reference, "compare against this checkpoint instead of an oracle");

  auto* roll = app.add_subcommand("rollout-eval", "Monte-Carlo return of the greedy policy of a checkpoint");
  add_config_flags(roll, roll_ov);
  std::string ckpt, x0_text;
  int n_rollouts = 1000;
  roll->add_option("--checkpoint", ckpt, "checkpoint (default: latest in the run directory)");
  roll->add_option("--x0", x0_text, "start state, comma separated (default: uniform over the domain)");
  roll->add_option("--n-rollouts", n_rollouts, "number of rollouts")->check(CLI::Range(2, 100000000));

  auto* val = app.add_subcommand("validate-assumptions", "estimate the structural constants of a problem");
  add_config_flags(val, val_ov);
  int samples = 100000;
  val->add_option("--samples", samples, "Monte-Carlo samples")->check(CLI::Range(1000, 100000000));

  auto* grid = app.add_subcommand("grid-solve", "exact Howard policy iteration on a grid (state_dim <= 2)");
  add_config_flags(grid, grid_ov);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*solve) {
      const RunConfig cfg = resolve(solve_ov);
      const RunResult res = run_pinn_pi(cfg);
      std::cout << res.summary.dump(2) << '\n';
    } else if (*cmp) {
      const RunConfig cfg = resolve(cmp_ov);
      set_num_threads(cfg.threads);
      const Json report =
          compare_oracle(cfg, reference.empty() ? std::nullopt : std::optional<std::string>(reference));
      std::ofstream(fs::path(cfg.out) / "compare.json") << report.dump(2) << '\n';
      std::cout << report.dump(2) << '\n';
    } else if (*roll) {
      const RunConfig cfg = resolve(roll_ov);
      set_num_threads(cfg.threads);
      const ControlProblem problem = build_problem(cfg);
      const std::string path = ckpt.empty() ? latest_checkpoint(cfg) : ckpt;
      auto net = std::make_shared<const ValueNet>(load_checkpoint(path).net);
      const PolicyHandle policy = PolicyHandle::greedy(problem, net);
      RolloutConfig rc;
      if (cfg.T) rc.T = *cfg.T;
      rc.dt = cfg.dt;
      const std::uint64_t seed = seed_plan(cfg).rollout;
      Json out{{"checkpoint", path}};
      MonteCarloEstimate est;
      if (x0_text.empty()) {
        est = mean_return_over_domain(problem, policy, n_rollouts, seed, rc);
        out["start"] = "uniform";
      } else {
        const Vec x0 = parse_point(x0_text, problem.state_dim());
        est = estimate_value_mc(problem, policy, x0, n_rollouts, seed, rc);
        out["start"] = std::vector<double>(x0.data(), x0.data() + x0.size());
        out["value_net"] = net->value(x0);
      }
      out["mean_return"] = est.mean;
      out["stderr"] = est.stderr_;
      out["rollouts"] = est.rollouts;
      out["blown_up"] = est.blown_up;
      std::cout << out.dump(2) << '\n';
    } else if (*val) {
      const RunConfig cfg = resolve(val_ov);
      const ControlProblem problem = build_problem(cfg);
      const TheoryConstants tc = validate_assumptions(problem, samples, seed_plan(cfg).oracle);
      auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
      const Json out{{"problem", problem.name()}, {"B_hat", tc.B_hat},     {"B_tilde", tc.B_tilde},
                     {"nu", tc.nu},               {"Lambda", tc.Lambda},   {"mu_a", tc.mu_a},
                     {"L_a", tc.L_a},             {"lambda_margin", tc.lambda_margin},
                     {"valid", tc.valid},         {"C_lambda", num(tc.C_lambda)},
                     {"theta", num(tc.theta)},    {"C_R", num(tc.C_R)},
                     {"kappa_tilde_bound", num(tc.kappa_tilde_bound)}};
      std::cout << out.dump(2) << '\n';
    } else if (*grid) {
      const RunConfig cfg = resolve(grid_ov);
      set_num_threads(cfg.threads);
      const ControlProblem problem = build_problem(cfg);
      const GridSolution sol = grid_howard_pi(problem, grid_config_for(cfg));
      fs::create_directories(cfg.out);
      save_grid_solution((fs::path(cfg.out) / "grid.txt").string(), sol);
      std::vector<double> deltas;
      for (std::size_t n = 1; n < sol.history.size(); ++n)
        deltas.push_back((sol.history[n] - sol.history[n - 1]).cwiseAbs().maxCoeff());
      const Json out{{"problem", problem.name()}, {"nodes", sol.grid.n},        {"sweeps", sol.sweeps},
                     {"converged", sol.converged}, {"monotone", sol.monotone}, {"refined", sol.refined},
                     {"sweep_changes", deltas}};
      std::ofstream(fs::path(cfg.out) / "grid_summary.json") << out.dump(2) << '\n';
      std::cout << out.dump(2) << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const AssumptionError& e) {
    std::cerr << "assumption violated: " << e.what() << '\n';
    return kAssumption;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const OracleError& e) {
    std::cerr << "oracle error: " << e.what() << '\n';
    return kOracle;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
