#pragma once

// Policy evaluation: fit the value network to the linear PDE of a frozen
// policy by minimizing the mean squared residual at collocation points.

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

#include "pinnpi/adam.hpp"
#include "pinnpi/improve.hpp"
#include "pinnpi/net.hpp"

namespace pinnpi {

struct CollocationBatch {
  Mat points;   // d x N, uniform on the domain
  Mat actions;  // m x N, the frozen policy at the points
  std::uint64_t seed = 0;
};

inline CollocationBatch sample_collocation(const ControlProblem& problem, const PolicyHandle& policy,
                                           Eigen::Index N, std::uint64_t seed) {
  if (N < 1) throw std::invalid_argument("sample_collocation: N must be >= 1");
  Rng rng(seed);
  CollocationBatch batch{problem.domain().sample_uniform(N, rng), Mat(), seed};
  batch.actions = policy.act(batch.points);
  return batch;
}

/// Monte-Carlo estimate of the L2(Omega) norm of a residual vector sampled
/// uniformly on a domain of volume `vol`.
inline double l2_from_samples(const Vec& r, double vol) {
  return std::sqrt(vol * r.squaredNorm() / static_cast<double>(r.size()));
}

/// sqrt(vol * mean r^2) over M fresh uniform points.
inline double residual_l2(const ValueNet& net, const ControlProblem& problem, const PolicyHandle& policy,
                          Eigen::Index M, std::uint64_t seed) {
  if (M < 1000) throw std::invalid_argument("residual_l2: M must be >= 1000");
  const CollocationBatch b = sample_collocation(problem, policy, M, seed);
  return l2_from_samples(residuals(net, problem, prepare_residual_data(problem, b.points, b.actions)),
                         problem.domain().volume());
}

/// Standard error of the residual_l2 estimate (delta method on the mean).
inline double residual_l2_stderr(const Vec& r, double vol) {
  const Eigen::Index n = r.size();
  const Vec sq = r.cwiseAbs2();
  const double mean = sq.mean();
  if (mean <= 0.0 || n < 2) return 0.0;
  const double var = (sq.array() - mean).square().sum() / static_cast<double>(n - 1);
  return 0.5 * std::sqrt(vol / mean) * std::sqrt(var / static_cast<double>(n));
}

struct TrainConfig {
  Eigen::Index N = 2048;
  int steps = 5000;
  AdamConfig adam{};
  /// Stop once the probe residual L2 falls to this; NaN selects 2e-3 sqrt(vol).
  double p_target = std::numeric_limits<double>::quiet_NaN();
  int resample_every = 200;  // 0 keeps one batch for the whole run
  std::uint64_t seed = 0;
  Eigen::Index probe_size = 8192;
  int probe_every = 100;
  double divergence_factor = 1e6;
  int divergence_patience = 100;
  /// Optional per-step CSV sink: step,loss,residual_l2 (blank off the probe cadence).
  std::ostream* curve = nullptr;
};

inline double default_p_target(const ControlProblem& problem) {
  return 2e-3 * std::sqrt(problem.domain().volume());
}

/// Order of magnitude of the value of `policy`: RMS of L(x, a(x)) / lambda
/// over `points`, never below 1. Used as the network's output scale.
inline double value_scale(const ControlProblem& problem, const PolicyHandle& policy, const Mat& points) {
  if (points.cols() == 0) throw std::invalid_argument("value_scale: no points");
  const Mat acts = policy.act(points);
  double sq = 0.0;
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const double l = cost_eval(problem, points.col(i), acts.col(i));
    sq += l * l;
  }
  return std::max(1.0, std::sqrt(sq / static_cast<double>(points.cols())) / problem.lambda());
}

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double residual_l2_estimate = 0.0;
  double residual_l2_stderr = 0.0;
  int steps_taken = 0;
  double wall_time = 0.0;  // seconds
  bool tolerance_met = false;
  double p_target = 0.0;
};

namespace detail {
// Seed streams derived from the run seed; kept apart so probe and training
// points never coincide.
inline constexpr std::uint64_t kProbeStream = 0x9e3779b97f4a7c15ULL;
}

/// Trains `net` in place on the residual PDE of the frozen `policy`.
inline TrainReport policy_evaluation_train(ValueNet& net, const ControlProblem& problem,
                                           const PolicyHandle& policy, const TrainConfig& cfg) {
  if (cfg.N < 1 || cfg.steps < 0 || cfg.probe_size < 1 || cfg.probe_every < 1 || cfg.resample_every < 0)
    throw std::invalid_argument("policy_evaluation_train: invalid configuration");
  if (net.input_dim() != problem.state_dim())
    throw std::invalid_argument("policy_evaluation_train: network does not match the problem");
  const auto t0 = std::chrono::steady_clock::now();
  const double vol = problem.domain().volume();

  TrainReport report;
  report.p_target = std::isnan(cfg.p_target) ? default_p_target(problem) : cfg.p_target;

  const CollocationBatch probe =
      sample_collocation(problem, policy, cfg.probe_size, derive_seed(cfg.seed, detail::kProbeStream));
  const ResidualData probe_data = prepare_residual_data(problem, probe.points, probe.actions);
  auto probe_estimate = [&] {
    const Vec r = residuals(net, problem, probe_data);
    if (!r.allFinite()) throw NumericalError("non-finite residual on the probe set");
    report.residual_l2_estimate = l2_from_samples(r, vol);
    report.residual_l2_stderr = residual_l2_stderr(r, vol);
    return report.residual_l2_estimate;
  };

  auto batch_at = [&](int step) {
    const std::uint64_t index = cfg.resample_every > 0 ? static_cast<std::uint64_t>(step / cfg.resample_every) : 0;
    const CollocationBatch b = sample_collocation(problem, policy, cfg.N, derive_seed(cfg.seed, index));
    return prepare_residual_data(problem, b.points, b.actions);
  };
  ResidualData data = batch_at(0);

  std::vector<double> trace;
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  auto eval_loss = [&]() {
    try {
      return loss_and_param_grad(net, problem, data);
    } catch (const NumericalError& e) {
      throw TrainingDiverged(e.what(), trace);
    }
  };

  if (cfg.curve) *cfg.curve << "step,loss,residual_l2\n";
  LossAndGradient lg = eval_loss();
  report.initial_loss = report.final_loss = lg.loss;
  const double res0 = probe_estimate();
  if (cfg.curve) *cfg.curve << 0 << ',' << detail::format_double(lg.loss) << ',' << detail::format_double(res0) << '\n';
  if (res0 <= report.p_target) {
    report.tolerance_met = true;
    report.wall_time = elapsed();
    return report;
  }

  Adam adam(net.param_count(), cfg.adam, std::max(cfg.steps, 1));
  int above = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    if (step > 0) {
      if (cfg.resample_every > 0 && step % cfg.resample_every == 0) data = batch_at(step);
      lg = eval_loss();
    }
    trace.push_back(lg.loss);
    if (lg.loss > cfg.divergence_factor * report.initial_loss) {
      if (++above >= cfg.divergence_patience)
        throw TrainingDiverged("training diverged at step " + std::to_string(step), trace);
    } else {
      above = 0;
    }
    adam.step(net.params(), lg.grad);
    report.steps_taken = step + 1;
    report.final_loss = lg.loss;

    const bool probe_now = (step + 1) % cfg.probe_every == 0 || step + 1 == cfg.steps;
    double res = std::numeric_limits<double>::quiet_NaN();
    if (probe_now) res = probe_estimate();
    if (cfg.curve) {
      *cfg.curve << step + 1 << ',' << detail::format_double(lg.loss) << ',';
      if (probe_now) *cfg.curve << detail::format_double(res);
      *cfg.curve << '\n';
    }
    if (probe_now && res <= report.p_target) {
      report.tolerance_met = true;
      break;
    }
  }
  report.wall_time = elapsed();
  return report;
}

}  // namespace pinnpi
