#pragma once

// Euler-Maruyama rollouts and the per-iteration diagnostics of PINN-PI:
// value snapshots, monotonicity and contraction-rate fits.

#include <cmath>
#include <limits>
#include <vector>

#include "pinnpi/improve.hpp"

namespace pinnpi {

struct RolloutResult {
  Mat trajectory;  // d x (steps + 1); empty unless requested
  double discounted_return = 0.0;
  int steps = 0;
  bool blew_up = false;
};

struct RolloutConfig {
  double T = std::numeric_limits<double>::quiet_NaN();  // NaN selects 20 / lambda
  double dt = 1e-2;
  bool keep_trajectory = false;
  double blowup_radius = 1e6;
};

namespace detail {

inline int step_count(const ControlProblem& problem, const RolloutConfig& cfg, double* T_out = nullptr) {
  const double T = std::isnan(cfg.T) ? 20.0 / problem.lambda() : cfg.T;
  if (!(cfg.dt > 0.0)) throw std::invalid_argument("rollout: dt must be > 0");
  if (!(T >= cfg.dt)) throw std::invalid_argument("rollout: horizon must be >= dt");
  if (T_out) *T_out = T;
  return static_cast<int>(std::llround(T / cfg.dt));
}

/// Lockstep simulation of the columns of X0. Noise for column j comes from
/// Rng(seeds[j]); when negate[j] is set the increments are mirrored, which
/// gives the antithetic partner of a rollout with the same seed.
inline std::vector<RolloutResult> simulate(const ControlProblem& problem, const PolicyHandle& policy,
                                           const Mat& X0, const std::vector<std::uint64_t>& seeds,
                                           const std::vector<bool>& negate, const RolloutConfig& cfg) {
  const int d = problem.state_dim();
  const Eigen::Index n = X0.cols();
  if (X0.rows() != d) throw std::invalid_argument("rollout: x0 dimension mismatch");
  const int steps = step_count(problem, cfg);
  const double lambda = problem.lambda();
  const double sqdt = std::sqrt(cfg.dt);
  const Mat& sigma = problem.sigma();

  std::vector<RolloutResult> out(n);
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (Eigen::Index j = 0; j < n; ++j) rngs.emplace_back(seeds[j]);
  std::vector<bool> alive(n, true);
  Mat X = X0;
  for (Eigen::Index j = 0; j < n; ++j)
    if (cfg.keep_trajectory) {
      out[j].trajectory.resize(d, steps + 1);
      out[j].trajectory.col(0) = X.col(j);
    }
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec xi(d);
  for (int k = 0; k < steps; ++k) {
    const Mat A = policy.act(X);
    // exact integral of e^{-lambda t} over [t_k, t_{k+1}]
    const double w = (std::exp(-lambda * k * cfg.dt) - std::exp(-lambda * (k + 1) * cfg.dt)) / lambda;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!alive[j]) continue;
      const Vec x = X.col(j);
      const Vec a = A.col(j);
      out[j].discounted_return += w * problem.cost_raw(x, a);
      for (int i = 0; i < d; ++i) xi[i] = normal(rngs[j]);
      if (negate[j]) xi = -xi;
      X.col(j) = x + problem.drift_raw(x, a) * cfg.dt + sigma * (sqdt * xi);
      out[j].steps = k + 1;
      if (cfg.keep_trajectory) out[j].trajectory.col(k + 1) = X.col(j);
      if (!X.col(j).allFinite() || X.col(j).norm() > cfg.blowup_radius) {
        alive[j] = false;
        out[j].blew_up = true;
        X.col(j) = x;  // keep the batch finite for the policy evaluation
        if (cfg.keep_trajectory) out[j].trajectory.conservativeResize(d, k + 2);
      }
    }
  }
  return out;
}

}  // namespace detail

/// One Euler-Maruyama trajectory with its discounted return.
inline RolloutResult rollout(const ControlProblem& problem, const PolicyHandle& policy, const Vec& x0,
                             std::uint64_t seed, const RolloutConfig& cfg = {}) {
  return detail::simulate(problem, policy, x0, {seed}, {false}, cfg).front();
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  int rollouts = 0;
  int blown_up = 0;
};

namespace detail {

// Antithetic pairs: rollout 2i and 2i+1 share seed derive_seed(seed, i) with
// mirrored noise; the standard error comes from the pair means.
inline MonteCarloEstimate pair_statistics(const std::vector<RolloutResult>& res) {
  MonteCarloEstimate est;
  const std::size_t pairs = res.size() / 2;
  Vec pm(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    pm[i] = 0.5 * (res[2 * i].discounted_return + res[2 * i + 1].discounted_return);
    est.blown_up += res[2 * i].blew_up + res[2 * i + 1].blew_up;
  }
  est.rollouts = static_cast<int>(2 * pairs);
  est.mean = pm.mean();
  if (pairs > 1)
    est.stderr_ = std::sqrt((pm.array() - est.mean).square().sum() / static_cast<double>(pairs - 1) /
                            static_cast<double>(pairs));
  return est;
}

}  // namespace detail

/// Mean discounted return from x0 over n_rollouts antithetic rollouts
/// (rounded up to an even count).
inline MonteCarloEstimate estimate_value_mc(const ControlProblem& problem, const PolicyHandle& policy,
                                            const Vec& x0, int n_rollouts, std::uint64_t seed,
                                            const RolloutConfig& cfg = {}) {
  if (n_rollouts < 2) throw std::invalid_argument("estimate_value_mc: need at least 2 rollouts");
  const int pairs = (n_rollouts + 1) / 2;
  Mat X0(problem.state_dim(), 2 * pairs);
  std::vector<std::uint64_t> seeds(2 * pairs);
  std::vector<bool> negate(2 * pairs);
  for (int i = 0; i < pairs; ++i) {
    X0.col(2 * i) = X0.col(2 * i + 1) = x0;
    seeds[2 * i] = seeds[2 * i + 1] = derive_seed(seed, i);
    negate[2 * i + 1] = true;
  }
  return detail::pair_statistics(detail::simulate(problem, policy, X0, seeds, negate, cfg));
}

/// Mean discounted return with start states drawn uniformly from the domain
/// (one start state per antithetic pair).
inline MonteCarloEstimate mean_return_over_domain(const ControlProblem& problem, const PolicyHandle& policy,
                                                  int n_rollouts, std::uint64_t seed,
                                                  const RolloutConfig& cfg = {}) {
  if (n_rollouts < 2) throw std::invalid_argument("mean_return_over_domain: need at least 2 rollouts");
  const int pairs = (n_rollouts + 1) / 2;
  Rng rng(derive_seed(seed, 0xD0D0));
  const Mat starts = problem.domain().sample_uniform(pairs, rng);
  Mat X0(problem.state_dim(), 2 * pairs);
  std::vector<std::uint64_t> seeds(2 * pairs);
  std::vector<bool> negate(2 * pairs);
  for (int i = 0; i < pairs; ++i) {
    X0.col(2 * i) = X0.col(2 * i + 1) = starts.col(i);
    seeds[2 * i] = seeds[2 * i + 1] = derive_seed(seed, i);
    negate[2 * i + 1] = true;
  }
  return detail::pair_statistics(detail::simulate(problem, policy, X0, seeds, negate, cfg));
}

// ---------------------------------------------------------------------------
// Iteration trace

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct IterationRecord {
  int n = 0;
  double residual_l2 = kNaN;  // p_n proxy (probe-set estimate)
  double residual_l2_stderr = kNaN;
  Vec probe_values;  // v_n at the fixed probe points
  double policy_distance = kNaN;  // sup distance a_n vs a_{n-1} on the probe points
  double improvement_fraction = kNaN;
  double oracle_gap = kNaN;  // |v_n - V_ref|_2 over the domain
  double oracle_gap_stderr = kNaN;
  double frozen_gap = kNaN;  // |v_n - exact solution for the same frozen policy|_2 (grid problems only)
  double riccati_gap = kNaN;  // relative L2 gap on the subregion where the constraint is inactive
  double riccati_policy_error = kNaN;  // mean abs greedy-vs-Riccati control error / Riccati control range
  double mean_return = kNaN;
  double mean_return_stderr = kNaN;
  int train_steps = 0;
  bool tolerance_met = false;
  double wall_time = kNaN;  // seconds; never written to the trace CSV
};

class IterationTrace {
 public:
  IterationTrace() = default;
  explicit IterationTrace(Mat probe_points) : probe_points_(std::move(probe_points)) {}

  void append(IterationRecord rec) {
    if (!records_.empty() && rec.n <= records_.back().n)
      throw std::invalid_argument("IterationTrace: iteration index must increase");
    if (rec.probe_values.size() != probe_points_.cols())
      throw std::invalid_argument("IterationTrace: probe snapshot has the wrong length");
    records_.push_back(std::move(rec));
  }

  const std::vector<IterationRecord>& records() const { return records_; }
  const Mat& probe_points() const { return probe_points_; }
  std::size_t size() const { return records_.size(); }

 private:
  Mat probe_points_;
  std::vector<IterationRecord> records_;
};

/// Fraction of (probe point, transition) pairs with
/// v_{n+1}(x_j) >= v_n(x_j) - slack_n. slacks has one entry per transition.
inline double monotonicity_fraction(const std::vector<Vec>& snapshots, const std::vector<double>& slacks) {
  if (snapshots.size() < 2) throw std::invalid_argument("monotonicity: need at least 2 iterations");
  if (slacks.size() != snapshots.size() - 1) throw std::invalid_argument("monotonicity: one slack per transition");
  std::size_t ok = 0, total = 0;
  for (std::size_t n = 0; n + 1 < snapshots.size(); ++n) {
    const Vec& a = snapshots[n];
    const Vec& b = snapshots[n + 1];
    if (a.size() != b.size()) throw std::invalid_argument("monotonicity: snapshot sizes differ");
    for (Eigen::Index j = 0; j < a.size(); ++j, ++total)
      if (b[j] >= a[j] - slacks[n]) ++ok;
  }
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 1.0;
}

/// Uniform slack for every transition.
inline double monotonicity_fraction(const std::vector<Vec>& snapshots, double slack) {
  return monotonicity_fraction(snapshots, std::vector<double>(snapshots.size() > 0 ? snapshots.size() - 1 : 0, slack));
}

/// Monotonicity of a PINN-PI trace. Without an explicit slack the transition
/// n -> n+1 is allowed 2 max(p_n, p_{n+1}), the residual level of both fits.
inline double monotonicity_report(const IterationTrace& trace, std::optional<double> slack = std::nullopt) {
  std::vector<Vec> snaps;
  for (const auto& r : trace.records()) snaps.push_back(r.probe_values);
  if (slack) return monotonicity_fraction(snaps, *slack);
  std::vector<double> slacks;
  const auto& rec = trace.records();
  for (std::size_t n = 0; n + 1 < rec.size(); ++n) {
    const double p = std::max(rec[n].residual_l2, rec[n + 1].residual_l2);
    slacks.push_back(std::isfinite(p) ? 2.0 * p : 0.0);
  }
  return monotonicity_fraction(snaps, slacks);
}

struct ConvergenceFit {
  double kappa_hat = kNaN;
  double floor_estimate = 0.0;
  int points_used = 0;
  bool contraction = false;  // kappa_hat < 1 on a valid pre-floor segment
};

/// Geometric-rate fit errors_n ~ C kappa^n + floor. The floor is the mean of
/// the last floor_window errors (0 disables it); the slope of
/// log(errors - floor) is fitted on the leading run of iterations that stay
/// clear of the floor.
inline ConvergenceFit fit_convergence_rate(const std::vector<double>& errors, int floor_window) {
  if (errors.size() < 4) throw std::invalid_argument("fit_convergence_rate: need at least 4 iterations");
  if (floor_window < 0 || floor_window > static_cast<int>(errors.size()))
    throw std::invalid_argument("fit_convergence_rate: bad floor window");
  ConvergenceFit fit;
  if (floor_window > 0) {
    double s = 0.0;
    for (std::size_t i = errors.size() - floor_window; i < errors.size(); ++i) s += errors[i];
    fit.floor_estimate = s / floor_window;
  }
  const double threshold = fit.floor_estimate > 0.0 ? 0.1 * fit.floor_estimate : 0.0;
  std::vector<double> xs, ys;
  for (std::size_t n = 0; n < errors.size(); ++n) {
    const double adj = errors[n] - fit.floor_estimate;
    if (!(adj > threshold)) break;
    xs.push_back(static_cast<double>(n));
    ys.push_back(std::log(adj));
  }
  bool fallback = false;
  if (xs.size() < 2) {
    // no usable pre-floor segment: fit the raw sequence
    fallback = true;
    xs.clear();
    ys.clear();
    for (std::size_t n = 0; n < errors.size(); ++n)
      if (errors[n] > 0.0) {
        xs.push_back(static_cast<double>(n));
        ys.push_back(std::log(errors[n]));
      }
    if (xs.size() < 2) {
      fit.kappa_hat = 1.0;
      return fit;
    }
  }
  const Eigen::Map<const Vec> X(xs.data(), static_cast<Eigen::Index>(xs.size()));
  const Eigen::Map<const Vec> Y(ys.data(), static_cast<Eigen::Index>(ys.size()));
  const double xm = X.mean(), ym = Y.mean();
  const double slope = ((X.array() - xm) * (Y.array() - ym)).sum() / (X.array() - xm).square().sum();
  fit.kappa_hat = std::exp(slope);
  fit.points_used = static_cast<int>(xs.size());
  fit.contraction = !fallback && fit.kappa_hat < 1.0;
  return fit;
}

}  // namespace pinnpi
