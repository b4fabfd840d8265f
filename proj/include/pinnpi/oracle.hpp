#pragma once

// Reference solvers: the discounted algebraic Riccati equation for
// unconstrained LQR, and exact Howard policy iteration on 1D/2D grids.

#include <Eigen/Eigenvalues>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseLU>
#include <fstream>
#include <functional>
#include <sstream>

#include "pinnpi/improve.hpp"

namespace pinnpi {

// ---------------------------------------------------------------------------
// Riccati

struct RiccatiSolution {
  Mat P;  // V(x) = -x^T P x + c
  Mat K;  // u*(x) = -K x, K = R^{-1} B^T P
  double c = 0.0;
  std::vector<double> residual_history;  // Frobenius ARE residual per Newton step

  double value(const Vec& x) const { return -x.dot(P * x) + c; }
  Vec policy(const Vec& x) const { return -K * x; }
};

/// Solves M^T X + X M = -C through the Kronecker form (small dense d).
inline Mat solve_lyapunov(const Mat& M, const Mat& C) {
  const Eigen::Index d = M.rows();
  const Mat I = Mat::Identity(d, d);
  Mat op = Mat::Zero(d * d, d * d);
  // vec(M^T X) = (I kron M^T) vec X ; vec(X M) = (M^T kron I) vec X
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      op.block(i * d, j * d, d, d) += I(i, j) * M.transpose();
      op.block(i * d, j * d, d, d) += M(j, i) * I;
    }
  const Vec rhs = -C.reshaped();
  Eigen::FullPivLU<Mat> lu(op);
  if (!lu.isInvertible()) throw OracleError("Lyapunov operator is singular");
  Mat X = lu.solve(rhs).reshaped(d, d);
  return 0.5 * (X + X.transpose());
}

inline double max_real_eigenvalue(const Mat& M) {
  return Eigen::EigenSolver<Mat>(M, false).eigenvalues().real().maxCoeff();
}

inline double riccati_residual(const Mat& As, const Mat& B, const Mat& Q, const Mat& R, const Mat& P) {
  return (As.transpose() * P + P * As - P * B * R.ldlt().solve(B.transpose() * P) + Q).norm();
}

inline RiccatiSolution solve_riccati_discounted(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                                                double lambda, const Mat& sigma, int max_iter = 100) {
  const Eigen::Index d = A.rows();
  if (A.cols() != d || B.rows() != d || Q.rows() != d || Q.cols() != d || R.rows() != B.cols() ||
      R.cols() != B.cols() || sigma.rows() != d)
    throw std::invalid_argument("solve_riccati_discounted: shape mismatch");
  if (!(lambda > 0)) throw std::invalid_argument("solve_riccati_discounted: lambda must be > 0");
  const Mat As = A - 0.5 * lambda * Mat::Identity(d, d);
  const auto R_ldlt = R.ldlt();

  // Stabilizing initial gain: zero if As is already Hurwitz, otherwise the
  // Bass shift (As + beta I) Z + Z (As + beta I)^T = 2 B B^T, K = B^T Z^{-1}.
  Mat K = Mat::Zero(B.cols(), d);
  if (max_real_eigenvalue(As) >= 0.0) {
    const double beta = As.operatorNorm() + 1.0;
    const Mat shifted = As + beta * Mat::Identity(d, d);
    // solve_lyapunov solves M^T X + X M = -C; take M = shifted^T
    const Mat Z = solve_lyapunov(shifted.transpose(), -2.0 * B * B.transpose());
    Eigen::LDLT<Mat> zl(Z);
    if (zl.info() != Eigen::Success || !zl.isPositive() ||
        Eigen::SelfAdjointEigenSolver<Mat>(Z).eigenvalues().minCoeff() <= 1e-12 * Z.norm())
      throw OracleError("Riccati: (A - lambda/2 I, B) is not stabilizable by the Bass gain");
    K = B.transpose() * zl.solve(Mat::Identity(d, d));
    if (max_real_eigenvalue(As - B * K) >= 0.0) throw OracleError("Riccati: no stabilizing initial gain");
  }

  RiccatiSolution sol;
  Mat P = Mat::Zero(d, d), P_best, K_best;
  for (int it = 0; it < max_iter; ++it) {
    const Mat Ak = As - B * K;
    if (max_real_eigenvalue(Ak) >= 0.0) throw OracleError("Riccati: Newton iterate lost stability");
    P = solve_lyapunov(Ak, Q + K.transpose() * R * K);
    K = R_ldlt.solve(B.transpose() * P);
    const double res = riccati_residual(As, B, Q, R, P);
    // Newton converges quadratically: go on to the rounding floor and keep
    // the last iterate that still reduced the residual
    if (!sol.residual_history.empty() && res >= sol.residual_history.back() && res < 1e-8) break;
    sol.residual_history.push_back(res);
    P_best = P;
    K_best = K;
    if (res < 1e-14 * std::max(1.0, Q.norm())) break;
  }
  P = P_best;
  K = K_best;
  if (sol.residual_history.back() >= 1e-10 * std::max(1.0, Q.norm()))
    throw OracleError("Riccati: Newton-Kleinman did not converge (residual " +
                      std::to_string(sol.residual_history.back()) + ")");
  sol.P = 0.5 * (P + P.transpose());
  sol.K = K;
  sol.c = -(sigma * sigma.transpose() * sol.P).trace() / lambda;
  return sol;
}

inline RiccatiSolution solve_riccati_discounted(const ControlProblem& problem) {
  const auto& lq = problem.linear_quadratic();
  if (!lq) throw UnsupportedComparison("Riccati oracle needs a linear-quadratic problem: " + problem.name());
  return solve_riccati_discounted(lq->A, lq->B, lq->Q, lq->R, problem.lambda(), problem.sigma());
}

// ---------------------------------------------------------------------------
// Grids

/// Tensor grid: n[i] nodes per axis spanning [box.lo, box.hi]; node (i0, i1)
/// has flat index i0 + n0 * i1.
struct GridSpec {
  Box box;
  std::vector<int> n;

  int dim() const { return static_cast<int>(n.size()); }
  double h(int axis) const { return (box.hi[axis] - box.lo[axis]) / (n[axis] - 1); }
  Eigen::Index size() const {
    Eigen::Index s = 1;
    for (int v : n) s *= v;
    return s;
  }
  std::vector<int> multi_index(Eigen::Index flat) const {
    std::vector<int> idx(n.size());
    for (std::size_t a = 0; a < n.size(); ++a) {
      idx[a] = static_cast<int>(flat % n[a]);
      flat /= n[a];
    }
    return idx;
  }
  Eigen::Index stride(int axis) const {
    Eigen::Index s = 1;
    for (int a = 0; a < axis; ++a) s *= n[a];
    return s;
  }
  Vec node(Eigen::Index flat) const {
    const auto idx = multi_index(flat);
    Vec x(dim());
    for (int a = 0; a < dim(); ++a) x[a] = box.lo[a] + idx[a] * h(a);
    return x;
  }
  Mat nodes() const {
    Mat X(dim(), size());
    for (Eigen::Index k = 0; k < size(); ++k) X.col(k) = node(k);
    return X;
  }
};

struct GridSolution {
  GridSpec grid;
  Vec values;
  Mat policy;  // m x nodes
  std::vector<Vec> history;  // nodal values after every policy-evaluation solve
  int sweeps = 0;
  bool converged = false;
  bool monotone = true;
  double max_monotonicity_violation = 0.0;
  bool refined = false;

  /// Multilinear interpolation; points outside the grid are clamped onto it.
  double interpolate(const Vec& x) const { return interpolate(values, x); }

  double interpolate(const Vec& field, const Vec& x) const {
    const int d = grid.dim();
    std::vector<int> base(d);
    std::vector<double> frac(d);
    for (int a = 0; a < d; ++a) {
      double t = std::clamp((x[a] - grid.box.lo[a]) / grid.h(a), 0.0, double(grid.n[a] - 1));
      // snap onto nodes so nodal values are reproduced exactly
      if (std::abs(t - std::round(t)) < 1e-9) t = std::round(t);
      base[a] = std::min(static_cast<int>(t), grid.n[a] - 2);
      frac[a] = t - base[a];
    }
    double out = 0.0;
    for (int corner = 0; corner < (1 << d); ++corner) {
      double w = 1.0;
      Eigen::Index flat = 0;
      for (int a = 0; a < d; ++a) {
        const int bit = (corner >> a) & 1;
        w *= bit ? frac[a] : 1.0 - frac[a];
        flat += (base[a] + bit) * grid.stride(a);
      }
      if (w != 0.0) out += w * field[flat];
    }
    return out;
  }

  Vec interpolate_all(const Mat& points) const {
    Vec out(points.cols());
    for (Eigen::Index i = 0; i < points.cols(); ++i) out[i] = interpolate(points.col(i));
    return out;
  }
};

struct GridConfig {
  std::vector<int> nodes{};  // per axis; empty selects 401 (1D) or 161 per axis (2D)
  double margin = 1.5;     // grid box = domain scaled by this per axis
  std::optional<Box> bounds{};  // overrides margin when set
  double tol = 1e-9;
  int max_sweeps = 100;
  bool auto_refine = true;
};

namespace detail {

inline GridSpec make_grid(const ControlProblem& problem, const GridConfig& cfg) {
  const int d = problem.state_dim();
  if (d > 2) throw UnsupportedComparison("grid oracle supports state_dim <= 2, got " + std::to_string(d));
  GridSpec g;
  g.box = cfg.bounds ? *cfg.bounds : problem.domain().scaled(cfg.margin);
  if (g.box.dim() != d) throw std::invalid_argument("grid bounds dimension mismatch");
  for (int a = 0; a < d; ++a)
    if (g.box.lo[a] > problem.domain().lo[a] || g.box.hi[a] < problem.domain().hi[a])
      throw std::invalid_argument("grid bounds must contain the domain");
  if (cfg.nodes.empty()) g.n.assign(d, d == 1 ? 401 : 161);
  else if (static_cast<int>(cfg.nodes.size()) == d) g.n = cfg.nodes;
  else if (cfg.nodes.size() == 1) g.n.assign(d, cfg.nodes[0]);
  else throw std::invalid_argument("grid nodes: one entry per axis expected");
  for (int v : g.n)
    if (v < 3) throw std::invalid_argument("grid needs at least 3 nodes per axis");
  return g;
}

struct Stencil {
  // neighbour flat index and coefficient, plus the diagonal
  std::vector<std::pair<Eigen::Index, double>> off;
  double diag = 0.0;
};

// Upwind advection row for the drift b at node k: returns the coefficients
// of -b . grad v. Outward drift on a boundary node has no interior upwind
// neighbour and is dropped (the process is held on the box).
inline void advection_row(const GridSpec& g, Eigen::Index k, const std::vector<int>& idx, const Vec& b,
                          Stencil& st) {
  for (int a = 0; a < g.dim(); ++a) {
    const double h = g.h(a);
    const Eigen::Index s = g.stride(a);
    if (b[a] > 0.0 && idx[a] + 1 < g.n[a]) {
      st.diag += b[a] / h;
      st.off.emplace_back(k + s, -b[a] / h);
    } else if (b[a] < 0.0 && idx[a] > 0) {
      st.diag += -b[a] / h;
      st.off.emplace_back(k - s, b[a] / h);
    }
  }
}

// Centered diffusion -1/2 tr(S D^2 v). Boundary rows use the ghost node
// v_{-1} = 2 v_0 - v_1, which makes the normal second difference vanish.
inline void diffusion_row(const GridSpec& g, Eigen::Index k, const std::vector<int>& idx, const Mat& S,
                          Stencil& st) {
  const int d = g.dim();
  for (int a = 0; a < d; ++a) {
    if (idx[a] == 0 || idx[a] + 1 == g.n[a]) continue;
    const double h = g.h(a);
    const double c = 0.5 * S(a, a) / (h * h);
    st.diag += 2.0 * c;
    st.off.emplace_back(k + g.stride(a), -c);
    st.off.emplace_back(k - g.stride(a), -c);
  }
  if (d == 2 && S(0, 1) != 0.0 && idx[0] > 0 && idx[0] + 1 < g.n[0] && idx[1] > 0 && idx[1] + 1 < g.n[1]) {
    const double c = 0.5 * 2.0 * S(0, 1) / (4.0 * g.h(0) * g.h(1));
    const Eigen::Index s0 = g.stride(0), s1 = g.stride(1);
    st.off.emplace_back(k + s0 + s1, -c);
    st.off.emplace_back(k - s0 - s1, -c);
    st.off.emplace_back(k + s0 - s1, c);
    st.off.emplace_back(k - s0 + s1, c);
  }
}

/// Discrete upwind Hamiltonian at node k for action a, excluding the
/// action-independent diffusion part: L(x,a) + sum_a b_a * D^upwind_a v.
inline double nodal_hamiltonian(const ControlProblem& problem, const GridSpec& g, Eigen::Index k,
                                const std::vector<int>& idx, const Vec& x, const Vec& a, const Vec& v) {
  const Vec b = problem.drift_raw(x, a);
  double h_val = problem.cost_raw(x, a);
  for (int ax = 0; ax < g.dim(); ++ax) {
    const double h = g.h(ax);
    const Eigen::Index s = g.stride(ax);
    if (b[ax] > 0.0 && idx[ax] + 1 < g.n[ax]) h_val += b[ax] * (v[k + s] - v[k]) / h;
    else if (b[ax] < 0.0 && idx[ax] > 0) h_val += b[ax] * (v[k] - v[k - s]) / h;
  }
  return h_val;
}

}  // namespace detail

/// Solves the discretized frozen-policy PDE for nodal actions (m x nodes).
/// `forcing_scale` multiplies L (used by the linearity check).
inline Vec grid_solve_frozen(const ControlProblem& problem, const GridSpec& g, const Mat& actions,
                             double forcing_scale = 1.0) {
  const Eigen::Index n = g.size();
  if (actions.cols() != n || actions.rows() != problem.action_dim())
    throw std::invalid_argument("grid_solve_frozen: actions shape mismatch");
  const Mat S = problem.sigma_sq();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(n * (1 + 4 * g.dim()));
  Vec rhs(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto idx = g.multi_index(k);
    const Vec x = g.node(k);
    const Vec a = actions.col(k);
    detail::Stencil st;
    st.diag = problem.lambda();
    detail::advection_row(g, k, idx, problem.drift_raw(x, a), st);
    detail::diffusion_row(g, k, idx, S, st);
    trips.emplace_back(k, k, st.diag);
    for (const auto& [j, c] : st.off) trips.emplace_back(k, j, c);
    rhs[k] = forcing_scale * problem.cost_raw(x, a);
  }
  if (!rhs.allFinite()) throw OracleError("grid solve: non-finite forcing");
  Eigen::SparseMatrix<double> M(n, n);
  M.setFromTriplets(trips.begin(), trips.end());
  M.makeCompressed();
  Vec v;
  if (n < 100000) {
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(M);
    if (lu.info() != Eigen::Success) throw OracleError("grid solve: sparse LU factorization failed");
    v = lu.solve(rhs);
    if (lu.info() != Eigen::Success) throw OracleError("grid solve: sparse LU solve failed");
  } else {
    Eigen::BiCGSTAB<Eigen::SparseMatrix<double>, Eigen::IncompleteLUT<double>> it;
    it.setTolerance(1e-10);
    it.setMaxIterations(20000);
    it.compute(M);
    v = it.solve(rhs);
    if (it.info() != Eigen::Success) throw OracleError("grid solve: BiCGSTAB did not converge");
  }
  if (!v.allFinite()) throw OracleError("grid solve: non-finite solution");
  return v;
}

/// Grid solution of the PDE of a fixed policy (single evaluation, no improvement).
inline GridSolution grid_policy_evaluation(const ControlProblem& problem, const PolicyHandle& policy,
                                           const GridConfig& cfg = {}) {
  GridSolution sol;
  sol.grid = detail::make_grid(problem, cfg);
  sol.policy = policy.act(sol.grid.nodes());
  sol.values = grid_solve_frozen(problem, sol.grid, sol.policy);
  sol.history.push_back(sol.values);
  sol.converged = true;
  return sol;
}

namespace detail {

/// Nodal policy improvement: greedy actions for the central and every
/// one-sided gradient pattern; a candidate replaces the current action only
/// if it raises the discrete Hamiltonian, so sweeps stay monotone.
inline Mat improve_on_grid(const ControlProblem& problem, const GridSpec& g, const Vec& v, const Mat& current) {
  const int d = g.dim();
  Mat next = current;
#pragma omp parallel for schedule(static)
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    const auto idx = g.multi_index(k);
    const Vec x = g.node(k);
    Vec fwd(d), bwd(d);
    for (int a = 0; a < d; ++a) {
      const double h = g.h(a);
      const Eigen::Index s = g.stride(a);
      const bool lo_edge = idx[a] == 0, hi_edge = idx[a] + 1 == g.n[a];
      fwd[a] = hi_edge ? (v[k] - v[k - s]) / h : (v[k + s] - v[k]) / h;
      bwd[a] = lo_edge ? fwd[a] : (v[k] - v[k - s]) / h;
      if (hi_edge) fwd[a] = bwd[a];
    }
    std::vector<Vec> grads{0.5 * (fwd + bwd)};
    for (int pattern = 0; pattern < (1 << d); ++pattern) {
      Vec z(d);
      for (int a = 0; a < d; ++a) z[a] = (pattern >> a) & 1 ? fwd[a] : bwd[a];
      grads.push_back(z);
    }
    double best = nodal_hamiltonian(problem, g, k, idx, x, current.col(k), v);
    const double base = best;
    for (const Vec& z : grads) {
      const Vec a = problem.action_box().clamp(greedy_action(problem, x, z));
      const double h = nodal_hamiltonian(problem, g, k, idx, x, a, v);
      if (h > best) {
        best = h;
        next.col(k) = a;
      }
    }
    // ignore gains at rounding level to avoid policy chatter
    if (best <= base + 1e-13 * (1.0 + std::abs(base))) next.col(k) = current.col(k);
  }
  return next;
}

}  // namespace detail

/// Howard policy iteration on a 1D/2D grid starting from `initial`
/// (defaults to the box-center policy).
inline GridSolution grid_howard_pi(const ControlProblem& problem, const GridConfig& cfg = {},
                                   const std::optional<PolicyHandle>& initial = std::nullopt) {
  GridSolution sol;
  sol.grid = detail::make_grid(problem, cfg);
  const Mat X = sol.grid.nodes();
  sol.policy = initial ? initial->act(X) : PolicyHandle::box_center(problem).act(X);
  sol.values = grid_solve_frozen(problem, sol.grid, sol.policy);
  sol.history.push_back(sol.values);
  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    const Mat next_policy = detail::improve_on_grid(problem, sol.grid, sol.values, sol.policy);
    const Vec next = grid_solve_frozen(problem, sol.grid, next_policy);
    const double violation = (sol.values - next).maxCoeff();
    const double scale = 1.0 + sol.values.cwiseAbs().maxCoeff();
    if (violation > 1e-9 * scale) {
      sol.monotone = false;
      sol.max_monotonicity_violation = std::max(sol.max_monotonicity_violation, violation);
    }
    const double change = (next - sol.values).cwiseAbs().maxCoeff();
    sol.values = next;
    sol.policy = next_policy;
    sol.history.push_back(next);
    sol.sweeps = sweep + 1;
    if (change < cfg.tol * scale) {
      sol.converged = true;
      break;
    }
  }
  if (!sol.monotone && cfg.auto_refine) {
    warn("grid Howard PI: non-monotone sweep (violation " + std::to_string(sol.max_monotonicity_violation) +
         "), refining once");
    GridConfig finer = cfg;
    finer.auto_refine = false;
    finer.nodes.clear();
    for (int v : sol.grid.n) finer.nodes.push_back(2 * v - 1);
    finer.bounds = sol.grid.box;
    GridSolution fine = grid_howard_pi(problem, finer, initial);
    fine.refined = true;
    return fine;
  }
  return sol;
}

/// Portable text form: header with axes, then one nodal value per line.
inline void write_grid_solution(std::ostream& os, const GridSolution& sol) {
  os << "pinnpi-grid 1\n" << "dim " << sol.grid.dim() << '\n';
  for (int a = 0; a < sol.grid.dim(); ++a)
    os << "axis " << detail::format_double(sol.grid.box.lo[a]) << ' ' << detail::format_double(sol.grid.box.hi[a])
       << ' ' << sol.grid.n[a] << ' ' << detail::format_double(sol.grid.h(a)) << '\n';
  os << "values " << sol.values.size() << '\n';
  for (Eigen::Index i = 0; i < sol.values.size(); ++i) os << detail::format_double(sol.values[i]) << '\n';
  os << "end\n";
}

inline GridSolution read_grid_solution(std::istream& is) {
  std::string tag;
  int version = 0, d = 0;
  if (!(is >> tag >> version) || tag != "pinnpi-grid" || version != 1)
    throw std::runtime_error("grid file: bad header");
  if (!(is >> tag >> d) || tag != "dim" || d < 1 || d > 2) throw std::runtime_error("grid file: bad dim");
  GridSolution sol;
  sol.grid.box = Box(Vec(d), Vec(d));
  sol.grid.n.resize(d);
  for (int a = 0; a < d; ++a) {
    std::string lo, hi, h;
    if (!(is >> tag >> lo >> hi >> sol.grid.n[a] >> h) || tag != "axis")
      throw std::runtime_error("grid file: bad axis line");
    sol.grid.box.lo[a] = detail::parse_double(lo);
    sol.grid.box.hi[a] = detail::parse_double(hi);
  }
  Eigen::Index n = 0;
  if (!(is >> tag >> n) || tag != "values" || n != sol.grid.size())
    throw std::runtime_error("grid file: bad values header");
  sol.values.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::string tok;
    if (!(is >> tok)) throw std::runtime_error("grid file: truncated");
    sol.values[i] = detail::parse_double(tok);
  }
  if (!(is >> tag) || tag != "end") throw std::runtime_error("grid file: missing end marker");
  sol.history.push_back(sol.values);
  sol.converged = true;
  return sol;
}

inline void save_grid_solution(const std::string& path, const GridSolution& sol) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  write_grid_solution(os, sol);
}

inline GridSolution load_grid_solution(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_grid_solution(is);
}

// ---------------------------------------------------------------------------
// L2 distances

struct L2Estimate {
  double value = 0.0;
  double stderr_ = 0.0;
};

/// sqrt(vol * mean (f - g)^2) over M uniform points of `domain`, with the
/// delta-method standard error.
inline L2Estimate l2_distance(const std::function<double(const Vec&)>& f,
                              const std::function<double(const Vec&)>& g, const Box& domain, Eigen::Index M,
                              std::uint64_t seed) {
  if (M < 1000) throw std::invalid_argument("l2_distance: M must be >= 1000");
  Rng rng(seed);
  const Mat pts = domain.sample_uniform(M, rng);
  Vec diff(M);
  for (Eigen::Index i = 0; i < M; ++i) diff[i] = f(pts.col(i)) - g(pts.col(i));
  const double vol = domain.volume();
  const Vec sq = diff.cwiseAbs2();
  const double mean = sq.mean();
  L2Estimate out{std::sqrt(vol * mean), 0.0};
  if (mean > 0.0) {
    const double var = (sq.array() - mean).square().sum() / static_cast<double>(M - 1);
    out.stderr_ = 0.5 * std::sqrt(vol / mean) * std::sqrt(var / static_cast<double>(M));
  }
  return out;
}

/// Same estimate for values already sampled uniformly on a domain of volume `vol`.
inline L2Estimate l2_from_values(const Vec& f, const Vec& g, double vol) {
  const Vec sq = (f - g).cwiseAbs2();
  const double mean = sq.mean();
  L2Estimate out{std::sqrt(vol * mean), 0.0};
  if (mean > 0.0 && sq.size() > 1) {
    const double var = (sq.array() - mean).square().sum() / static_cast<double>(sq.size() - 1);
    out.stderr_ = 0.5 * std::sqrt(vol / mean) * std::sqrt(var / static_cast<double>(sq.size()));
  }
  return out;
}

}  // namespace pinnpi
