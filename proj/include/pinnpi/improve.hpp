#pragma once

// Policy improvement: a(x) = argmax_{a in A} { L(x, a) + b(x, a) . grad v(x) }.

#include <memory>
#include <string>
#include <utility>

#include "pinnpi/net.hpp"
#include "pinnpi/problems.hpp"

namespace pinnpi {

struct GreedyConfig {
  int max_iter = 100;
  double tol = 1e-8;
};

struct GreedyResult {
  Vec action;
  bool converged = true;
  int iterations = 0;
};

/// L(x, a) + b(x, a) . z
inline double greedy_objective(const ControlProblem& problem, const Vec& x, const Vec& a, const Vec& z) {
  return problem.cost_raw(x, a) + problem.drift_raw(x, a).dot(z);
}

/// Exact maximizer for affine drift, quadratic control cost and diagonal R:
/// the objective separates per coordinate, so clamping the unconstrained
/// maximizer 1/2 R^{-1} G^T z is optimal.
inline Vec greedy_action_closed_form(const ControlProblem& problem, const Vec& x, const Vec& grad_v) {
  if (problem.structure() != ControlStructure::kAffineQuadratic || !problem.r_diagonal())
    throw StructureError("closed-form greedy action needs affine-quadratic structure with diagonal R");
  const auto& parts = *problem.affine();
  const Vec unconstrained =
      0.5 * (parts.G(x).transpose() * grad_v).cwiseQuotient(parts.R.diagonal());
  return problem.action_box().clamp(unconstrained);
}

namespace detail {

inline Vec objective_gradient(const ControlProblem& p, const Vec& x, const Vec& a, const Vec& z) {
  if (p.affine()) return -2.0 * p.affine()->R * a + p.affine()->G(x).transpose() * z;
  return cost_action_gradient(p, x, a) + action_jacobian(p, x, a).transpose() * z;
}

inline double smoothness_estimate(const ControlProblem& p, const Vec& x, const Vec& a, const Vec& z) {
  if (p.affine()) return 2.0 * p.r_max_eig();
  const int m = p.action_dim();
  Mat H(m, m);
  for (int k = 0; k < m; ++k) {
    const double h = 1e-4 * (1.0 + std::abs(a[k]));
    Vec ap = a, am = a;
    ap[k] += h;
    am[k] -= h;
    H.col(k) = (objective_gradient(p, x, ap, z) - objective_gradient(p, x, am, z)) / (2.0 * h);
  }
  return std::max(0.5 * (H + H.transpose()).cwiseAbs().rowwise().sum().maxCoeff(), 1e-6);
}

}  // namespace detail

/// Accelerated projected gradient ascent over the action box, with
/// backtracking on the step and restarts whenever the objective drops.
/// Stops when the projected-gradient norm falls below cfg.tol.
inline GreedyResult greedy_action_projected(const ControlProblem& problem, const Vec& x, const Vec& grad_v,
                                            const GreedyConfig& cfg = {}) {
  const Box& box = problem.action_box();
  Vec a = box.center();
  if (problem.affine()) {
    const auto& parts = *problem.affine();
    a = box.clamp(0.5 * parts.R.ldlt().solve(parts.G(x).transpose() * grad_v));
  }
  double smooth = detail::smoothness_estimate(problem, x, a, grad_v);
  double f = greedy_objective(problem, x, a, grad_v);
  GreedyResult best{a, false, 0};
  double best_f = f;
  Vec y = a;
  double momentum = 1.0;
  for (int it = 0; it < cfg.max_iter; ++it) {
    best.iterations = it + 1;
    const Vec g_a = detail::objective_gradient(problem, x, a, grad_v);
    const double pg_norm = (box.clamp(a + g_a / smooth) - a).norm() * smooth;
    if (pg_norm < cfg.tol) {
      best.converged = true;
      break;
    }
    const Vec g_y = detail::objective_gradient(problem, x, y, grad_v);
    const double f_y = greedy_objective(problem, x, y, grad_v);
    Vec next = box.clamp(y + g_y / smooth);
    double f_next = greedy_objective(problem, x, next, grad_v);
    // sufficient-increase test of the quadratic model; tighten the step if it fails
    for (int bt = 0; bt < 40; ++bt) {
      const Vec step = next - y;
      if (f_next >= f_y + g_y.dot(step) - 0.5 * smooth * step.squaredNorm() - 1e-14 * std::abs(f_y)) break;
      smooth *= 2.0;
      next = box.clamp(y + g_y / smooth);
      f_next = greedy_objective(problem, x, next, grad_v);
    }
    if (f_next < f) {
      // a plain projected step that cannot increase f means the gain is
      // below rounding of the objective
      if (momentum == 1.0) {
        best.converged = true;
        break;
      }
      // restart from the last good iterate
      y = a;
      momentum = 1.0;
      continue;
    }
    const double next_momentum = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    y = next + ((momentum - 1.0) / next_momentum) * (next - a);
    momentum = next_momentum;
    a = std::move(next);
    f = f_next;
    if (f >= best_f) {
      best_f = f;
      best.action = a;
    }
  }
  if (best.converged) best.action = a;
  return best;
}

/// Closed form when exact, projected ascent otherwise.
inline Vec greedy_action(const ControlProblem& problem, const Vec& x, const Vec& grad_v,
                         const GreedyConfig& cfg = {}) {
  if (problem.structure() == ControlStructure::kAffineQuadratic && problem.r_diagonal())
    return greedy_action_closed_form(problem, x, grad_v);
  return greedy_action_projected(problem, x, grad_v, cfg).action;
}

/// A feedback policy x -> a inside the action box: either an explicit
/// function or the greedy selector induced by a value network.
class PolicyHandle {
 public:
  using Fn = std::function<Vec(const Vec&)>;

  static PolicyHandle explicit_policy(const ControlProblem& problem, Fn fn, std::string label) {
    PolicyHandle p(problem, std::move(label));
    p.fn_ = std::move(fn);
    return p;
  }

  static PolicyHandle constant(const ControlProblem& problem, Vec action, std::string label = "constant") {
    return explicit_policy(problem, [action](const Vec&) { return action; }, std::move(label));
  }

  /// The initial policy: center of the action box everywhere.
  static PolicyHandle box_center(const ControlProblem& problem) {
    return constant(problem, problem.action_box().center(), "a0");
  }

  static PolicyHandle greedy(const ControlProblem& problem, std::shared_ptr<const ValueNet> net,
                             GreedyConfig cfg = {}, std::string label = "greedy") {
    if (!net || net->input_dim() != problem.state_dim())
      throw std::invalid_argument("PolicyHandle::greedy: network does not match the problem");
    PolicyHandle p(problem, std::move(label));
    p.net_ = std::move(net);
    p.cfg_ = cfg;
    return p;
  }

  const std::string& label() const { return label_; }
  const std::shared_ptr<const ValueNet>& net() const { return net_; }
  bool is_greedy() const { return static_cast<bool>(net_); }

  Vec operator()(const Vec& x) const {
    if (net_) {
      const BatchDerivatives bd = eval_batch(*net_, x, nullptr);
      return problem_->action_box().clamp(greedy_action(*problem_, x, bd.grads.col(0), cfg_));
    }
    return problem_->action_box().clamp(fn_(x));
  }

  /// Actions at the columns of `points` (m x N).
  Mat act(const Mat& points) const {
    Mat out(problem_->action_dim(), points.cols());
    if (net_) {
      const BatchDerivatives bd = eval_batch(*net_, points, nullptr);
      for (Eigen::Index i = 0; i < points.cols(); ++i)
        out.col(i) = problem_->action_box().clamp(
            greedy_action(*problem_, points.col(i), bd.grads.col(i), cfg_));
    } else {
      for (Eigen::Index i = 0; i < points.cols(); ++i)
        out.col(i) = problem_->action_box().clamp(fn_(points.col(i)));
    }
    return out;
  }

 private:
  PolicyHandle(const ControlProblem& problem, std::string label)
      : problem_(std::make_shared<const ControlProblem>(problem)), label_(std::move(label)) {}

  std::shared_ptr<const ControlProblem> problem_;
  std::string label_;
  Fn fn_;
  std::shared_ptr<const ValueNet> net_;
  GreedyConfig cfg_;
};

/// max_i |p1(x_i) - p2(x_i)|_inf over the probe points (columns).
inline double policy_sup_distance(const PolicyHandle& p1, const PolicyHandle& p2, const Mat& probe_points) {
  if (probe_points.cols() == 0) throw std::invalid_argument("policy_sup_distance: no probe points");
  return (p1.act(probe_points) - p2.act(probe_points)).cwiseAbs().maxCoeff();
}

/// Fraction of points where the objective with gradient grads.col(i) at
/// new_actions is at least that at old_actions, up to `tol`.
inline double improvement_fraction(const ControlProblem& problem, const Mat& points, const Mat& grads,
                                   const Mat& new_actions, const Mat& old_actions, double tol = 1e-9) {
  Eigen::Index ok = 0;
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const Vec x = points.col(i), z = grads.col(i);
    if (greedy_objective(problem, x, new_actions.col(i), z) >=
        greedy_objective(problem, x, old_actions.col(i), z) - tol)
      ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(points.cols());
}

struct LipschitzProbe {
  double ratio = 0.0;  // max |a*(z) - a*(z')| / |z - z'|
  double affine_bound = std::numeric_limits<double>::quiet_NaN();  // |1/2 R^{-1} G^T|
  // |R^{-1/2}| |1/2 R^{-1/2} G^T|: bound valid for any SPD R (projection in the R metric)
  double metric_bound = std::numeric_limits<double>::quiet_NaN();
  double theta_bound = std::numeric_limits<double>::infinity();  // B~ / (mu_a - B~ M)
};

/// Empirical Lipschitz ratio of z -> a*(x, z) over the given pairs,
/// alongside the analytic bounds available for the problem's structure.
inline LipschitzProbe selector_lipschitz_probe(const ControlProblem& problem, const Vec& x,
                                               const std::vector<std::pair<Vec, Vec>>& z_pairs,
                                               const GreedyConfig& cfg = {}) {
  LipschitzProbe probe;
  double max_z = 0.0;
  for (const auto& [z1, z2] : z_pairs) {
    const double dz = (z1 - z2).norm();
    if (!(dz > 0.0)) throw std::invalid_argument("selector_lipschitz_probe: z and z' must differ");
    const Vec a1 = greedy_action(problem, x, z1, cfg);
    const Vec a2 = greedy_action(problem, x, z2, cfg);
    probe.ratio = std::max(probe.ratio, (a1 - a2).norm() / dz);
    max_z = std::max({max_z, z1.norm(), z2.norm()});
  }
  if (problem.affine()) {
    const auto& parts = *problem.affine();
    const Mat G = parts.G(x);
    probe.affine_bound = (0.5 * parts.R.ldlt().solve(G.transpose())).operatorNorm();
    Eigen::SelfAdjointEigenSolver<Mat> eig(parts.R);
    const Mat r_inv_sqrt = eig.operatorInverseSqrt();
    probe.metric_bound = r_inv_sqrt.operatorNorm() * (0.5 * r_inv_sqrt * G.transpose()).operatorNorm();
    const double b_tilde = G.operatorNorm();
    const double mu_a = 2.0 * problem.r_min_eig();
    // d_a b = G(x) does not vary with a, so |z| never erodes the concavity margin
    const double jacobian_lipschitz = 0.0;
    const double denom = mu_a - jacobian_lipschitz * max_z;
    probe.theta_bound = denom > 0.0 ? b_tilde / denom : std::numeric_limits<double>::infinity();
  }
  return probe;
}

}  // namespace pinnpi
