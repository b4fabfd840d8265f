#pragma once

// Control problem abstraction, benchmark catalog and assumption checks.
//
// Convention: the reward rate L(x, a) is maximized,
//   V(x) = sup_a E[ int_0^inf e^{-lambda t} L(X_t, a_t) dt ],
//   dX = b(X, a) dt + sigma dW,
// with a compact box of actions and a bounded box domain used for
// collocation and evaluation.

#include <Eigen/Eigenvalues>

#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>

#include "pinnpi/common.hpp"

namespace pinnpi {

using DriftFn = std::function<Vec(const Vec& x, const Vec& a)>;
using CostFn = std::function<double(const Vec& x, const Vec& a)>;
using DivergenceFn = std::function<double(const Vec& x, const Vec& a)>;

enum class ControlStructure { kAffineQuadratic, kGeneral };

/// Drift f(x) + G(x) a and reward s(x) - a^T R a.
struct AffineQuadraticParts {
  std::function<Vec(const Vec&)> f;
  std::function<Mat(const Vec&)> G;
  std::function<double(const Vec&)> state_reward;
  Mat R;
};

/// Matrices of a linear-quadratic problem, kept for the Riccati oracle.
struct LinearQuadraticData {
  Mat A, B, Q, R;
};

/// Everything needed to build a ControlProblem. `drift`/`cost` may be left
/// empty when `affine` is given; they are then synthesized from it.
struct ProblemDefinition {
  std::string name;
  int state_dim = 0;
  int action_dim = 0;
  DriftFn drift;
  CostFn cost;
  DivergenceFn divergence;  // optional analytic div_x b
  Mat sigma;
  double lambda = 1.0;
  Box action_box;
  Box domain;
  std::optional<AffineQuadraticParts> affine;
  std::optional<LinearQuadraticData> linear_quadratic;
};

class ControlProblem {
 public:
  explicit ControlProblem(ProblemDefinition def) : def_(std::move(def)) {
    auto& d = def_;
    if (d.state_dim < 1 || d.action_dim < 1)
      throw std::invalid_argument("ControlProblem: dimensions must be positive");
    if (d.action_box.dim() != d.action_dim)
      throw std::invalid_argument("ControlProblem: action box dimension mismatch");
    if (d.domain.dim() != d.state_dim)
      throw std::invalid_argument("ControlProblem: domain dimension mismatch");
    for (int i = 0; i < d.action_dim; ++i)
      if (!(d.action_box.lo[i] < d.action_box.hi[i]))
        throw AssumptionError("ControlProblem: action box needs lo < hi in every coordinate");
    for (int i = 0; i < d.state_dim; ++i)
      if (!(d.domain.lo[i] < d.domain.hi[i]))
        throw std::invalid_argument("ControlProblem: domain must have positive volume");
    if (d.sigma.rows() != d.state_dim || d.sigma.cols() != d.state_dim)
      throw std::invalid_argument("ControlProblem: sigma must be d x d");
    if (!(d.lambda > 0.0)) throw std::invalid_argument("ControlProblem: lambda must be positive");

    sigma_sq_ = d.sigma * d.sigma.transpose();
    Eigen::SelfAdjointEigenSolver<Mat> eig(sigma_sq_, Eigen::EigenvaluesOnly);
    nu_ = eig.eigenvalues().minCoeff();
    Lambda_ = eig.eigenvalues().maxCoeff();

    if (d.affine) {
      const Mat& R = d.affine->R;
      if (R.rows() != d.action_dim || R.cols() != d.action_dim)
        throw std::invalid_argument("ControlProblem: R must be m x m");
      if ((R - R.transpose()).norm() > 1e-12 * (1.0 + R.norm()))
        throw AssumptionError("ControlProblem: R must be symmetric");
      Eigen::SelfAdjointEigenSolver<Mat> reig(R, Eigen::EigenvaluesOnly);
      if (!(reig.eigenvalues().minCoeff() > 1e-12))
        throw AssumptionError("ControlProblem: R must be positive definite (strict concavity in a)");
      r_min_eig_ = reig.eigenvalues().minCoeff();
      r_max_eig_ = reig.eigenvalues().maxCoeff();
      Mat off = R;
      off.diagonal().setZero();
      r_diagonal_ = off.cwiseAbs().maxCoeff() == 0.0;
      if (!d.drift) {
        auto parts = *d.affine;
        d.drift = [parts](const Vec& x, const Vec& a) -> Vec { return parts.f(x) + parts.G(x) * a; };
      }
      if (!d.cost) {
        auto parts = *d.affine;
        d.cost = [parts](const Vec& x, const Vec& a) {
          return parts.state_reward(x) - a.dot(parts.R * a);
        };
      }
    }
    if (!d.drift || !d.cost) throw std::invalid_argument("ControlProblem: drift and cost are required");
  }

  const std::string& name() const { return def_.name; }
  int state_dim() const { return def_.state_dim; }
  int action_dim() const { return def_.action_dim; }
  const Mat& sigma() const { return def_.sigma; }
  const Mat& sigma_sq() const { return sigma_sq_; }
  double lambda() const { return def_.lambda; }
  const Box& action_box() const { return def_.action_box; }
  const Box& domain() const { return def_.domain; }

  ControlStructure structure() const {
    return def_.affine ? ControlStructure::kAffineQuadratic : ControlStructure::kGeneral;
  }
  const std::optional<AffineQuadraticParts>& affine() const { return def_.affine; }
  bool r_diagonal() const { return def_.affine && r_diagonal_; }
  double r_min_eig() const { return r_min_eig_; }
  double r_max_eig() const { return r_max_eig_; }
  const std::optional<LinearQuadraticData>& linear_quadratic() const { return def_.linear_quadratic; }

  /// Smallest / largest eigenvalue of sigma sigma^T.
  double nu() const { return nu_; }
  double Lambda() const { return Lambda_; }
  bool degenerate_diffusion() const { return !(nu_ > 0.0); }

  // Raw callbacks, no clamping or finiteness checks.
  Vec drift_raw(const Vec& x, const Vec& a) const { return def_.drift(x, a); }
  double cost_raw(const Vec& x, const Vec& a) const { return def_.cost(x, a); }
  const DivergenceFn& analytic_divergence() const { return def_.divergence; }

 private:
  ProblemDefinition def_;
  Mat sigma_sq_;
  double nu_ = 0.0;
  double Lambda_ = 0.0;
  double r_min_eig_ = 0.0;
  double r_max_eig_ = 0.0;
  bool r_diagonal_ = false;
};

namespace detail {

inline void check_dims(const ControlProblem& p, const Vec& x, const Vec& a) {
  if (x.size() != p.state_dim() || a.size() != p.action_dim())
    throw std::invalid_argument("state/action dimension mismatch for problem '" + p.name() + "'");
}

inline Vec clamp_action(const ControlProblem& p, const Vec& a) {
  if (p.action_box().contains(a)) return a;
  warn("action " + format_vec(a) + " outside the action box; clamped");
  return p.action_box().clamp(a);
}

}  // namespace detail

/// b(x, a). Out-of-box actions are clamped with a warning.
inline Vec drift_eval(const ControlProblem& problem, const Vec& x, const Vec& a) {
  detail::check_dims(problem, x, a);
  Vec b = problem.drift_raw(x, detail::clamp_action(problem, a));
  if (!b.allFinite())
    throw NumericalError("non-finite drift at x=" + format_vec(x) + ", a=" + format_vec(a));
  return b;
}

/// L(x, a), the reward rate being maximized.
inline double cost_eval(const ControlProblem& problem, const Vec& x, const Vec& a) {
  detail::check_dims(problem, x, a);
  const double c = problem.cost_raw(x, a);
  if (!std::isfinite(c))
    throw NumericalError("non-finite cost at x=" + format_vec(x) + ", a=" + format_vec(a));
  return c;
}

/// Central finite-difference divergence of the drift, step 1e-5 (1 + |x|).
inline double drift_divergence(const ControlProblem& problem, const Vec& x, const Vec& a) {
  if (problem.analytic_divergence()) return problem.analytic_divergence()(x, a);
  const double h = 1e-5 * (1.0 + x.norm());
  double div = 0.0;
  Vec xp = x, xm = x;
  for (int i = 0; i < problem.state_dim(); ++i) {
    xp[i] = x[i] + h;
    xm[i] = x[i] - h;
    div += (problem.drift_raw(xp, a)[i] - problem.drift_raw(xm, a)[i]) / (2.0 * h);
    xp[i] = xm[i] = x[i];
  }
  return div;
}

// ---------------------------------------------------------------------------
// Catalog

struct LqrOptions {
  int d = 5;
  int m = 0;  // 0 means m = d
  std::uint64_t seed = 0;
  double u_max = 10.0;
  double sigma_scale = 0.1;
  double lambda = 1.0;
  double domain_half_width = 3.0;
};

/// Linear dynamics Ax + Ba, reward -x^T Q x - a^T R a, box |a_i| <= u_max.
inline ControlProblem make_linear_quadratic(std::string name, Mat A, Mat B, Mat Q, Mat R, Mat sigma,
                                            double lambda, Box action_box, Box domain) {
  const int d = static_cast<int>(A.rows());
  const int m = static_cast<int>(B.cols());
  if (A.cols() != d || B.rows() != d || Q.rows() != d || Q.cols() != d || R.rows() != m ||
      R.cols() != m)
    throw std::invalid_argument("make_linear_quadratic: inconsistent matrix shapes");
  AffineQuadraticParts parts;
  parts.f = [A](const Vec& x) -> Vec { return A * x; };
  parts.G = [B](const Vec&) -> Mat { return B; };
  parts.state_reward = [Q](const Vec& x) { return -x.dot(Q * x); };
  parts.R = R;

  ProblemDefinition def;
  def.name = std::move(name);
  def.state_dim = d;
  def.action_dim = m;
  def.drift = [A, B](const Vec& x, const Vec& a) -> Vec { return A * x + B * a; };
  def.cost = [Q, R](const Vec& x, const Vec& a) { return -x.dot(Q * x) - a.dot(R * a); };
  const double trace_a = A.trace();
  def.divergence = [trace_a](const Vec&, const Vec&) { return trace_a; };
  def.sigma = std::move(sigma);
  def.lambda = lambda;
  def.action_box = std::move(action_box);
  def.domain = std::move(domain);
  def.affine = std::move(parts);
  def.linear_quadratic = LinearQuadraticData{std::move(A), std::move(B), std::move(Q), std::move(R)};
  return ControlProblem(std::move(def));
}

/// Random stable LQR with box controls, reproducible from the seed.
inline ControlProblem make_lqr(const LqrOptions& opt) {
  if (opt.d < 1 || opt.m < 0) throw std::invalid_argument("make_lqr: d, m must be >= 1");
  const int d = opt.d;
  const int m = opt.m == 0 ? opt.d : opt.m;
  Rng rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](int rows, int cols, double scale) {
    Mat M(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) M(i, j) = scale * normal(rng);
    return M;
  };

  Mat A = gaussian(d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  const double max_real = Eigen::EigenSolver<Mat>(A, false).eigenvalues().real().maxCoeff();
  if (max_real > -0.1) A -= (max_real + 0.1) * Mat::Identity(d, d);
  Mat B = gaussian(d, m, 1.0 / std::sqrt(static_cast<double>(m)));
  const Mat Gq = gaussian(d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  Mat Q = Gq.transpose() * Gq + 0.1 * Mat::Identity(d, d);
  // half-scale factor keeps R well conditioned (eigenvalues roughly in [0.1, 1.1])
  const Mat Gr = gaussian(m, m, 0.5 / std::sqrt(static_cast<double>(m)));
  Mat R = Gr.transpose() * Gr + 0.1 * Mat::Identity(m, m);
  Q = 0.5 * (Q + Q.transpose());
  R = 0.5 * (R + R.transpose());

  return make_linear_quadratic("lqr", std::move(A), std::move(B), std::move(Q), std::move(R),
                               opt.sigma_scale * Mat::Identity(d, d), opt.lambda,
                               Box::cube(m, -opt.u_max, opt.u_max),
                               Box::cube(d, -opt.domain_half_width, opt.domain_half_width));
}

/// Scalar fixture A = 0, B = Q = R = 1 (known discounted Riccati solution).
inline ControlProblem make_scalar_lqr(double u_max = 10.0, double lambda = 2.0, double sigma = 0.1,
                                      double domain_half_width = 3.0) {
  return make_linear_quadratic("lqr1d", Mat::Zero(1, 1), Mat::Ones(1, 1), Mat::Ones(1, 1),
                               Mat::Ones(1, 1), sigma * Mat::Identity(1, 1), lambda,
                               Box::cube(1, -u_max, u_max),
                               Box::cube(1, -domain_half_width, domain_half_width));
}

/// Wraps an angle to [-pi, pi].
inline double wrap_angle(double theta) { return std::remainder(theta, 2.0 * std::numbers::pi); }

/// Stochastic pendulum, state (theta, omega), theta = 0 upright, torque in [-2, 2].
inline ControlProblem make_pendulum(double sigma_scale = 0.1, double lambda = 1.0) {
  static constexpr double g = 10.0, mass = 1.0, length = 1.0;
  static constexpr double gravity_gain = 3.0 * g / (2.0 * length);
  static constexpr double torque_gain = 3.0 / (mass * length * length);

  AffineQuadraticParts parts;
  parts.f = [](const Vec& x) -> Vec {
    Vec f(2);
    f << x[1], gravity_gain * std::sin(x[0]);
    return f;
  };
  parts.G = [](const Vec&) -> Mat {
    Mat G(2, 1);
    G << 0.0, torque_gain;
    return G;
  };
  parts.state_reward = [](const Vec& x) {
    const double th = wrap_angle(x[0]);
    return -(th * th + 0.1 * x[1] * x[1]);
  };
  parts.R = 0.001 * Mat::Identity(1, 1);

  ProblemDefinition def;
  def.name = "pendulum";
  def.state_dim = 2;
  def.action_dim = 1;
  def.divergence = [](const Vec&, const Vec&) { return 0.0; };
  def.sigma = sigma_scale * Mat::Identity(2, 2);
  def.lambda = lambda;
  def.action_box = Box::cube(1, -2.0, 2.0);
  Vec lo(2), hi(2);
  lo << -std::numbers::pi, -8.0;
  hi << std::numbers::pi, 8.0;
  def.domain = Box(lo, hi);
  def.affine = std::move(parts);
  return ControlProblem(std::move(def));
}

/// Cart-pole accelerations (Barto-Sutton form); state (x, x_dot, theta, theta_dot).
inline Vec cartpole_dynamics(const Vec& s, double force) {
  constexpr double gravity = 9.8, cart_mass = 1.0, pole_mass = 0.1, half_length = 0.5;
  constexpr double total_mass = cart_mass + pole_mass;
  const double sin_t = std::sin(s[2]), cos_t = std::cos(s[2]);
  const double temp = (force + pole_mass * half_length * s[3] * s[3] * sin_t) / total_mass;
  const double theta_acc = (gravity * sin_t - cos_t * temp) /
                           (half_length * (4.0 / 3.0 - pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - pole_mass * half_length * theta_acc * cos_t / total_mass;
  Vec ds(4);
  ds << s[1], x_acc, s[3], theta_acc;
  return ds;
}

/// Stochastic continuous-force cart-pole, force in [-10, 10].
inline ControlProblem make_cartpole(double sigma_scale = 0.1, double lambda = 1.0) {
  AffineQuadraticParts parts;
  parts.f = [](const Vec& s) -> Vec { return cartpole_dynamics(s, 0.0); };
  // dynamics are affine in the force, so a unit difference is exact
  parts.G = [](const Vec& s) -> Mat {
    Mat G(4, 1);
    G.col(0) = cartpole_dynamics(s, 1.0) - cartpole_dynamics(s, 0.0);
    return G;
  };
  parts.state_reward = [](const Vec& s) {
    return -(s[0] * s[0] + 10.0 * s[2] * s[2] + 0.1 * s[1] * s[1] + 0.1 * s[3] * s[3]);
  };
  parts.R = 0.001 * Mat::Identity(1, 1);

  ProblemDefinition def;
  def.name = "cartpole";
  def.state_dim = 4;
  def.action_dim = 1;
  def.sigma = sigma_scale * Mat::Identity(4, 4);
  def.lambda = lambda;
  def.action_box = Box::cube(1, -10.0, 10.0);
  Vec lo(4), hi(4);
  lo << -2.4, -3.0, -0.21, -3.0;
  hi << 2.4, 3.0, 0.21, 3.0;
  def.domain = Box(lo, hi);
  def.affine = std::move(parts);
  return ControlProblem(std::move(def));
}

/// b = 0, L = c: the value function is exactly c / lambda.
inline ControlProblem make_constant_cost(double c, double lambda, int d, double sigma_scale = 0.1,
                                         std::optional<Box> domain = std::nullopt) {
  ProblemDefinition def;
  def.name = "constant";
  def.state_dim = d;
  def.action_dim = 1;
  def.drift = [d](const Vec&, const Vec&) -> Vec { return Vec::Zero(d); };
  def.cost = [c](const Vec&, const Vec&) { return c; };
  def.divergence = [](const Vec&, const Vec&) { return 0.0; };
  def.sigma = sigma_scale * Mat::Identity(d, d);
  def.lambda = lambda;
  def.action_box = Box::cube(1, -1.0, 1.0);
  def.domain = domain ? *domain : Box::cube(d, -3.0, 3.0);
  return ControlProblem(std::move(def));
}

// ---------------------------------------------------------------------------
// Assumption diagnostics

/// Stability constant of the frozen-policy linear PDE,
/// max{ 1/(lambda - B/2), sqrt(1/(nu (lambda - B/2))) }; empty when lambda <= B/2.
inline std::optional<double> c_lambda(double lambda, double B, double nu) {
  const double margin = lambda - 0.5 * B;
  if (!(margin > 0.0) || !(nu > 0.0)) return std::nullopt;
  return std::max(1.0 / margin, std::sqrt(1.0 / (nu * margin)));
}

/// Bounds on the value gradient feeding the Lipschitz constants. `sup` is
/// the pointwise bound M on |z|; `norm` the max of its L2 / Linf norms.
struct GradientBounds {
  double sup = 0.0;
  double norm = 0.0;
};

struct TheoryConstants {
  double B_hat = 0.0;     // sampled sup |b| + |div_x b|
  double B_tilde = 0.0;   // sampled sup |d_a b| + Lipschitz of d_a b in a
  double nu = 0.0;
  double Lambda = 0.0;
  double mu_a = 0.0;      // strong-concavity modulus of a -> L(x, a)
  double L_a = 0.0;       // Lipschitz constant of L in a
  double lambda_margin = 0.0;  // lambda - B_hat / 2
  bool valid = false;     // lambda_margin > 0
  double C_lambda = std::numeric_limits<double>::infinity();
  double theta = std::numeric_limits<double>::infinity();  // selector Lipschitz bound
  double C_R = std::numeric_limits<double>::infinity();
  double kappa_tilde_bound = std::numeric_limits<double>::infinity();
};

namespace detail {

inline Mat action_jacobian(const ControlProblem& p, const Vec& x, const Vec& a) {
  if (p.affine()) return p.affine()->G(x);
  const int m = p.action_dim();
  Mat J(p.state_dim(), m);
  for (int k = 0; k < m; ++k) {
    const double h = 1e-6 * (1.0 + std::abs(a[k]));
    Vec ap = a, am = a;
    ap[k] += h;
    am[k] -= h;
    J.col(k) = (p.drift_raw(x, ap) - p.drift_raw(x, am)) / (2.0 * h);
  }
  return J;
}

inline Vec cost_action_gradient(const ControlProblem& p, const Vec& x, const Vec& a) {
  if (p.affine()) return -2.0 * p.affine()->R * a;
  const int m = p.action_dim();
  Vec g(m);
  for (int k = 0; k < m; ++k) {
    const double h = 1e-6 * (1.0 + std::abs(a[k]));
    Vec ap = a, am = a;
    ap[k] += h;
    am[k] -= h;
    g[k] = (p.cost_raw(x, ap) - p.cost_raw(x, am)) / (2.0 * h);
  }
  return g;
}

}  // namespace detail

/// Fills TheoryConstants from the problem data plus sampling over domain x box.
/// `grad` bounds the value gradient (M and the norm entering C_R); zero when unknown.
inline TheoryConstants finish_theory_constants(TheoryConstants tc, double lambda, GradientBounds grad) {
  tc.lambda_margin = lambda - 0.5 * tc.B_hat;
  tc.valid = tc.lambda_margin > 0.0;
  if (auto c = c_lambda(lambda, tc.B_hat, tc.nu)) tc.C_lambda = *c;
  const double denom = tc.mu_a - tc.B_tilde * grad.sup;
  tc.theta = denom > 0.0 ? tc.B_tilde / denom : std::numeric_limits<double>::infinity();
  tc.C_R = tc.theta * (tc.L_a + tc.B_tilde * grad.norm);
  if (tc.valid && std::isfinite(tc.C_R))
    tc.kappa_tilde_bound = std::sqrt(tc.C_R * tc.C_R / (tc.nu * tc.lambda_margin));
  return tc;
}

inline TheoryConstants validate_assumptions(const ControlProblem& problem, int n_samples,
                                            std::uint64_t seed, GradientBounds grad = {}) {
  if (n_samples < 1000) throw std::invalid_argument("validate_assumptions: n_samples must be >= 1000");
  if (problem.degenerate_diffusion())
    throw AssumptionError("sigma sigma^T is not positive definite (nu = " +
                          std::to_string(problem.nu()) + ")");
  TheoryConstants tc;
  tc.nu = problem.nu();
  tc.Lambda = problem.Lambda();

  Rng rng(seed);
  const Mat xs = problem.domain().sample_uniform(n_samples, rng);
  const Mat as = problem.action_box().sample_uniform(n_samples, rng);
  const Mat as2 = problem.action_box().sample_uniform(n_samples, rng);

  double mu_estimate = std::numeric_limits<double>::infinity();
  double btilde_lip = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const Vec x = xs.col(i);
    const Vec a = as.col(i);
    const Vec b = problem.drift_raw(x, a);
    tc.B_hat = std::max(tc.B_hat, b.norm() + std::abs(drift_divergence(problem, x, a)));
    const Mat Ja = detail::action_jacobian(problem, x, a);
    tc.B_tilde = std::max(tc.B_tilde, Ja.operatorNorm());
    tc.L_a = std::max(tc.L_a, detail::cost_action_gradient(problem, x, a).norm());
    if (!problem.affine()) {
      const Vec a2 = as2.col(i);
      const double dist = (a - a2).norm();
      if (dist > 1e-8) {
        const Mat Ja2 = detail::action_jacobian(problem, x, a2);
        btilde_lip = std::max(btilde_lip, (Ja - Ja2).operatorNorm() / dist);
        const double mid = problem.cost_raw(x, 0.5 * (a + a2));
        const double chord = 0.5 * (problem.cost_raw(x, a) + problem.cost_raw(x, a2));
        // L(mid) >= chord + mu |a - a'|^2 / 8 for t = 1/2
        mu_estimate = std::min(mu_estimate, 8.0 * (mid - chord) / (dist * dist));
      }
    }
  }
  tc.B_tilde += btilde_lip;
  if (problem.affine()) {
    tc.mu_a = 2.0 * problem.r_min_eig();
  } else {
    tc.mu_a = std::isfinite(mu_estimate) ? std::max(0.0, mu_estimate) : 0.0;
  }
  tc = finish_theory_constants(tc, problem.lambda(), grad);
  if (!tc.valid)
    warn("lambda <= B_hat/2 on the domain of '" + problem.name() +
         "': the L2 stability hypothesis does not hold there");
  return tc;
}

}  // namespace pinnpi
