#pragma once

// The outer PINN-PI loop and the batch front-end operations built on it.
//
// Output layout of a run directory:
//   config.json        resolved configuration
//   trace.csv          one row per outer iteration (no wall-clock columns)
//   probe_points.csv   the fixed probe points, one row per point
//   probe_values.csv   v_n at the probe points, one row per iteration
//   timing.csv         wall-clock times per iteration
//   train_<n>.csv      training curve of iteration n
//   ckpt_<n>           value network after iteration n
//   summary.json       final metrics

#include <chrono>
#include <filesystem>
#include <fstream>

#include "pinnpi/config.hpp"
#include "pinnpi/evaluate.hpp"
#include "pinnpi/oracle.hpp"
#include "pinnpi/sim.hpp"

namespace pinnpi {

namespace fs = std::filesystem;

/// Reference solutions available for a run, tabulated on a fixed sample of
/// oracle points.
struct OracleSet {
  std::optional<RiccatiSolution> riccati;
  std::optional<GridSolution> grid;
  GridConfig grid_cfg;
  Mat points;        // uniform on the domain
  Vec reference;     // best available V at `points` (grid if present, else Riccati)
  std::string reference_name;
  std::vector<Eigen::Index> inactive;  // points where the Riccati control is inside the box
  Mat riccati_actions;                 // u*(x) at the points
  double riccati_policy_range = 0.0;

  bool has_reference() const { return reference.size() > 0; }
};

inline GridConfig grid_config_for(const RunConfig& cfg) {
  GridConfig g;
  if (cfg.grid_nodes > 0) g.nodes = {cfg.grid_nodes};
  return g;
}

inline OracleSet build_oracles(const ControlProblem& problem, const RunConfig& cfg) {
  OracleSet o;
  const bool lq = problem.linear_quadratic().has_value();
  const bool small = problem.state_dim() <= 2;
  if (cfg.riccati.value_or(false) && !lq)
    throw UnsupportedComparison("riccati oracle requested for non-LQ problem '" + problem.name() + "'");
  if (cfg.grid.value_or(false) && !small)
    throw UnsupportedComparison("grid oracle requested for state_dim " + std::to_string(problem.state_dim()));
  Rng rng(seed_plan(cfg).oracle);
  o.points = problem.domain().sample_uniform(cfg.oracle_points, rng);
  o.grid_cfg = grid_config_for(cfg);
  if (cfg.riccati.value_or(lq) && lq) {
    o.riccati = solve_riccati_discounted(problem);
    o.reference.resize(o.points.cols());
    o.riccati_actions.resize(problem.action_dim(), o.points.cols());
    const Box& box = problem.action_box();
    for (Eigen::Index i = 0; i < o.points.cols(); ++i) {
      const Vec x = o.points.col(i);
      o.reference[i] = o.riccati->value(x);
      const Vec u = o.riccati->policy(x);
      o.riccati_actions.col(i) = u;
      if (box.contains(u)) o.inactive.push_back(i);
    }
    o.reference_name = "riccati";
    if (!o.inactive.empty()) {
      Vec lo = Vec::Constant(problem.action_dim(), std::numeric_limits<double>::infinity()), hi = -lo;
      for (Eigen::Index i : o.inactive) {
        lo = lo.cwiseMin(o.riccati_actions.col(i));
        hi = hi.cwiseMax(o.riccati_actions.col(i));
      }
      o.riccati_policy_range = (hi - lo).maxCoeff();
    }
  }
  if (cfg.grid.value_or(small) && small) {
    o.grid = grid_howard_pi(problem, o.grid_cfg);
    o.reference = o.grid->interpolate_all(o.points);
    o.reference_name = "grid";
  }
  return o;
}

struct RunResult {
  IterationTrace trace;
  ValueNet net;
  std::string stop_reason;
  Json summary;
};

namespace detail {

inline std::string csv_num(double v) { return std::isnan(v) ? std::string() : format_double(v); }

inline void write_trace_csv(const fs::path& path, const IterationTrace& trace) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "n,residual_l2,residual_l2_stderr,train_steps,tolerance_met,policy_distance,improvement_fraction,"
        "oracle_gap,oracle_gap_stderr,frozen_gap,riccati_gap,riccati_policy_error,mean_return,"
        "mean_return_stderr\n";
  for (const auto& r : trace.records()) {
    os << r.n << ',' << csv_num(r.residual_l2) << ',' << csv_num(r.residual_l2_stderr) << ',' << r.train_steps
       << ',' << (r.tolerance_met ? 1 : 0) << ',' << csv_num(r.policy_distance) << ','
       << csv_num(r.improvement_fraction) << ',' << csv_num(r.oracle_gap) << ',' << csv_num(r.oracle_gap_stderr)
       << ',' << csv_num(r.frozen_gap) << ',' << csv_num(r.riccati_gap) << ','
       << csv_num(r.riccati_policy_error) << ',' << csv_num(r.mean_return) << ','
       << csv_num(r.mean_return_stderr) << '\n';
  }
}

inline void write_matrix_rows(const fs::path& path, const std::string& header, const std::vector<Vec>& rows,
                              bool index_column) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << header << '\n';
  for (std::size_t n = 0; n < rows.size(); ++n) {
    if (index_column) os << n << ',';
    for (Eigen::Index j = 0; j < rows[n].size(); ++j) os << (j ? "," : "") << format_double(rows[n][j]);
    os << '\n';
  }
}

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace detail

/// Per-iteration oracle comparisons for the value network `net` and the
/// greedy policy it induces.
inline void fill_oracle_columns(const ControlProblem& problem, const OracleSet& o, const ValueNet& net,
                                const PolicyHandle& next_policy, IterationRecord& rec) {
  if (!o.has_reference()) return;
  const Vec v = eval_batch(net, o.points, nullptr).values;
  const auto gap = l2_from_values(v, o.reference, problem.domain().volume());
  rec.oracle_gap = gap.value;
  rec.oracle_gap_stderr = gap.stderr_;
  if (o.riccati && !o.inactive.empty()) {
    double num = 0.0, den = 0.0;
    Mat pts(problem.state_dim(), static_cast<Eigen::Index>(o.inactive.size()));
    for (std::size_t k = 0; k < o.inactive.size(); ++k) {
      const Eigen::Index i = o.inactive[k];
      const double ref = o.riccati->value(o.points.col(i));
      num += std::pow(v[i] - ref, 2);
      den += ref * ref;
      pts.col(static_cast<Eigen::Index>(k)) = o.points.col(i);
    }
    rec.riccati_gap = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
    if (o.riccati_policy_range > 0.0) {
      const Mat a = next_policy.act(pts);
      double err = 0.0;
      for (std::size_t k = 0; k < o.inactive.size(); ++k)
        err += (a.col(static_cast<Eigen::Index>(k)) - o.riccati_actions.col(o.inactive[k])).cwiseAbs().mean();
      rec.riccati_policy_error = err / static_cast<double>(o.inactive.size()) / o.riccati_policy_range;
    }
  }
}

/// PINN policy iteration: alternate residual training of the frozen policy and greedy
/// improvement until the policy stops moving on the probe points.
inline RunResult run_pinn_pi(const RunConfig& cfg) {
  validate(cfg);
  const ControlProblem problem = build_problem(cfg);
  const SeedPlan seeds = seed_plan(cfg);
  set_num_threads(cfg.threads);
  const fs::path out(cfg.out);
  fs::create_directories(out);
  {
    std::ofstream os(out / "config.json");
    os << config_to_json(cfg).dump(2) << '\n';
  }

  const OracleSet oracles = build_oracles(problem, cfg);
  const Mat probe = halton_points(problem.domain(), 256);
  {
    std::vector<Vec> rows;
    for (Eigen::Index j = 0; j < probe.cols(); ++j) rows.push_back(probe.col(j));
    std::string header;
    for (int i = 0; i < problem.state_dim(); ++i) header += (i ? ",x" : "x") + std::to_string(i);
    detail::write_matrix_rows(out / "probe_points.csv", header, rows, false);
  }

  const std::vector<int> widths = [&] {
    if (cfg.hidden.empty()) {
      auto w = default_architecture(problem.state_dim());
      return w;
    }
    std::vector<int> w{problem.state_dim()};
    w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
    w.push_back(1);
    return w;
  }();
  PolicyHandle policy = PolicyHandle::box_center(problem);
  const double output_scale = value_scale(problem, policy, probe);
  auto fresh_network = [&](std::uint64_t seed) {
    ValueNet fresh = init_network(widths, seed);
    fresh.set_output_scale(output_scale);
    return fresh;
  };
  RunResult result{IterationTrace(probe), fresh_network(seeds.net), "max_outer", {}};
  ValueNet& net = result.net;

  TrainConfig tcfg;
  tcfg.N = cfg.N;
  tcfg.steps = cfg.steps;
  tcfg.adam.lr = cfg.lr;
  tcfg.adam.lr_final = cfg.lr_final;
  tcfg.p_target = cfg.p_target.value_or(default_p_target(problem));
  tcfg.resample_every = cfg.resample_every;
  tcfg.probe_size = cfg.probe_size;
  tcfg.probe_every = cfg.probe_every;

  RolloutConfig rcfg;
  if (cfg.T) rcfg.T = *cfg.T;
  rcfg.dt = cfg.dt;

  std::vector<Vec> snapshots;
  std::ofstream timing(out / "timing.csv");
  timing << "n,wall_time,train_time,train_steps\n";
  const std::string problem_json = config_to_json(cfg).dump();

  for (int n = 0; n < cfg.max_outer; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!cfg.warm_start && n > 0) net = fresh_network(derive_seed(seeds.net, n));
    tcfg.seed = derive_seed(seeds.train, n);
    std::ofstream curve;
    if (cfg.curves) {
      curve.open(out / ("train_" + std::to_string(n) + ".csv"));
      tcfg.curve = &curve;
    }
    TrainReport report;
    try {
      report = policy_evaluation_train(net, problem, policy, tcfg);
    } catch (const TrainingDiverged&) {
      detail::write_trace_csv(out / "trace.csv", result.trace);
      throw;
    }

    auto snapshot = std::make_shared<const ValueNet>(net);
    PolicyHandle next = PolicyHandle::greedy(problem, snapshot, {}, "greedy_" + std::to_string(n + 1));

    IterationRecord rec;
    rec.n = n;
    rec.residual_l2 = report.residual_l2_estimate;
    rec.residual_l2_stderr = report.residual_l2_stderr;
    rec.train_steps = report.steps_taken;
    rec.tolerance_met = report.tolerance_met;
    const BatchDerivatives bd = eval_batch(net, probe, nullptr);
    rec.probe_values = bd.values;
    const Mat new_actions = next.act(probe);
    const Mat old_actions = policy.act(probe);
    rec.policy_distance = (new_actions - old_actions).cwiseAbs().maxCoeff();
    rec.improvement_fraction = improvement_fraction(problem, probe, bd.grads, new_actions, old_actions);
    fill_oracle_columns(problem, oracles, net, next, rec);
    if (oracles.grid) {
      const GridSolution frozen = grid_policy_evaluation(problem, policy, oracles.grid_cfg);
      rec.frozen_gap = l2_from_values(eval_batch(net, oracles.points, nullptr).values,
                                      frozen.interpolate_all(oracles.points), problem.domain().volume())
                           .value;
    }
    if (cfg.rollouts > 0) {
      const auto mc = mean_return_over_domain(problem, policy, cfg.rollouts, seeds.rollout, rcfg);
      rec.mean_return = mc.mean;
      rec.mean_return_stderr = mc.stderr_;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    snapshots.push_back(rec.probe_values);
    result.trace.append(rec);

    if (cfg.checkpoints) {
      Metadata meta{{"config", problem_json},
                    {"iteration", std::to_string(n)},
                    {"residual_l2", detail::format_double(rec.residual_l2)}};
      save_checkpoint((out / ("ckpt_" + std::to_string(n))).string(), net, meta);
    }
    detail::write_trace_csv(out / "trace.csv", result.trace);
    detail::write_matrix_rows(out / "probe_values.csv", "values_at_probe_points", snapshots, true);
    timing << n << ',' << rec.wall_time << ',' << report.wall_time << ',' << report.steps_taken << std::endl;

    policy = next;
    if (rec.policy_distance < cfg.stop_eps) {
      result.stop_reason = "policy_converged";
      break;
    }
  }

  // summary
  const auto& recs = result.trace.records();
  const auto& last = recs.back();
  Json s;
  s["problem"] = problem.name();
  s["state_dim"] = problem.state_dim();
  s["action_dim"] = problem.action_dim();
  s["iterations"] = recs.size();
  s["output_scale"] = output_scale;
  s["stop_reason"] = result.stop_reason;
  s["final_residual_l2"] = detail::number_or_null(last.residual_l2);
  s["final_policy_distance"] = detail::number_or_null(last.policy_distance);
  s["oracle"] = oracles.has_reference() ? Json(oracles.reference_name) : Json(nullptr);
  s["final_oracle_gap"] = detail::number_or_null(last.oracle_gap);
  s["final_riccati_gap"] = detail::number_or_null(last.riccati_gap);
  s["final_riccati_policy_error"] = detail::number_or_null(last.riccati_policy_error);
  s["riccati_inactive_fraction"] =
      oracles.riccati ? Json(static_cast<double>(oracles.inactive.size()) / oracles.points.cols()) : Json(nullptr);
  s["monotonicity"] = recs.size() >= 2 ? Json(monotonicity_report(result.trace)) : Json(nullptr);
  double min_improvement = 1.0;
  for (const auto& r : recs) min_improvement = std::min(min_improvement, r.improvement_fraction);
  s["min_improvement_fraction"] = min_improvement;
  if (oracles.has_reference() && recs.size() >= 4) {
    std::vector<double> gaps;
    for (const auto& r : recs) gaps.push_back(r.oracle_gap);
    const auto fit = fit_convergence_rate(gaps, std::max(1, static_cast<int>(gaps.size()) / 3));
    s["kappa_hat"] = detail::number_or_null(fit.kappa_hat);
    s["gap_floor"] = fit.floor_estimate;
    s["contraction"] = fit.contraction;
  } else {
    s["kappa_hat"] = nullptr;
    s["gap_floor"] = nullptr;
    s["contraction"] = nullptr;
  }
  if (!problem.degenerate_diffusion()) {
    const TheoryConstants tc = validate_assumptions(problem, 1000, seeds.oracle);
    s["theory"] = {{"B_hat", tc.B_hat},
                   {"lambda_margin", tc.lambda_margin},
                   {"valid", tc.valid},
                   {"C_lambda", detail::number_or_null(tc.C_lambda)}};
  }
  result.summary = s;
  std::ofstream(out / "summary.json") << s.dump(2) << '\n';
  return result;
}

/// Recomputes oracle gaps for every checkpoint of a finished run. With
/// `reference_checkpoint` the comparison is against that network instead of
/// the built-in oracles.
inline Json compare_oracle(const RunConfig& cfg, const std::optional<std::string>& reference_checkpoint = {}) {
  const ControlProblem problem = build_problem(cfg);
  const fs::path out(cfg.out);
  std::vector<std::pair<int, fs::path>> ckpts;
  if (fs::exists(out))
    for (const auto& e : fs::directory_iterator(out)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("ckpt_", 0) == 0) ckpts.emplace_back(std::stoi(name.substr(5)), e.path());
    }
  if (ckpts.empty()) throw ConfigError("no checkpoints found in " + out.string());
  std::sort(ckpts.begin(), ckpts.end());

  Json report;
  std::vector<double> gaps;
  Mat points;
  Vec reference;
  OracleSet oracles;
  if (reference_checkpoint) {
    Rng rng(seed_plan(cfg).oracle);
    points = problem.domain().sample_uniform(cfg.oracle_points, rng);
    const ValueNet ref = load_checkpoint(*reference_checkpoint).net;
    reference = eval_batch(ref, points, nullptr).values;
    report["oracle"] = "checkpoint";
  } else {
    const bool lq = problem.linear_quadratic().has_value();
    if (!lq && problem.state_dim() > 2)
      throw UnsupportedComparison("no oracle for problem '" + problem.name() + "' in dimension " +
                                  std::to_string(problem.state_dim()));
    oracles = build_oracles(problem, cfg);
    points = oracles.points;
    reference = oracles.reference;
    report["oracle"] = oracles.reference_name;
  }
  Json series = Json::array();
  for (const auto& [n, path] : ckpts) {
    const ValueNet net = load_checkpoint(path.string()).net;
    const auto gap = l2_from_values(eval_batch(net, points, nullptr).values, reference, problem.domain().volume());
    Json row{{"n", n}, {"gap", gap.value}, {"gap_stderr", gap.stderr_}};
    if (!reference_checkpoint && oracles.riccati) {
      IterationRecord rec;
      const PolicyHandle greedy = PolicyHandle::greedy(problem, std::make_shared<const ValueNet>(net));
      fill_oracle_columns(problem, oracles, net, greedy, rec);
      row["interior_gap"] = detail::number_or_null(rec.riccati_gap);
      row["policy_error"] = detail::number_or_null(rec.riccati_policy_error);
    }
    series.push_back(row);
    gaps.push_back(gap.value);
  }
  report["series"] = series;
  report["final_gap"] = gaps.back();
  if (oracles.riccati)
    report["inactive_fraction"] = static_cast<double>(oracles.inactive.size()) / oracles.points.cols();
  if (gaps.size() >= 4) {
    const auto fit = fit_convergence_rate(gaps, std::max(1, static_cast<int>(gaps.size()) / 3));
    report["kappa_hat"] = fit.kappa_hat;
    report["gap_floor"] = fit.floor_estimate;
    report["contraction"] = fit.contraction;
  }
  return report;
}

}  // namespace pinnpi
