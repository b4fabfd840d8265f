// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "pinnpi/driver.hpp"
#include "test_util.hpp"

using namespace pinnpi;
namespace fs = std::filesystem;
using pinnpi::testing::fd_first;
using pinnpi::testing::fd_second;
using pinnpi::testing::random_vec;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const fs::path kRunDir = PINNPI_ACCEPTANCE_DIR;

RunConfig load_config(const std::string& name, const fs::path& out) {
  RunConfig cfg = config_from_json(read_json_file((fs::path(PINNPI_CONFIG_DIR) / (name + ".json")).string()));
  cfg.out = out.string();
  return cfg;
}

struct TimedRun {
  RunResult result;
  ControlProblem problem;
  double seconds = 0.0;
};

// Each catalog config is run once and shared between criteria.
std::map<std::string, TimedRun>& run_cache() {
  static std::map<std::string, TimedRun> cache;
  return cache;
}

const TimedRun& catalog_run(const std::string& name) {
  auto& cache = run_cache();
  if (auto it = cache.find(name); it != cache.end()) return it->second;
  const RunConfig cfg = load_config(name, kRunDir / name);
  std::cout << "  running " << name << " ..." << std::endl;
  const auto t0 = std::chrono::steady_clock::now();
  RunResult r = run_pinn_pi(cfg);
  const double secs = seconds_since(t0);
  std::cout << "  " << name << ": " << r.trace.size() << " iterations, " << fmt(secs) << " s, "
            << r.stop_reason << std::endl;
  return cache.emplace(name, TimedRun{std::move(r), build_problem(cfg), secs}).first->second;
}

std::function<double(const Vec&)> net_fn(const ValueNet& net) {
  return [&net](const Vec& x) { return net.value(x); };
}

// ---------------------------------------------------------------------------

Verdict derivative_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const int d = 3;
  ValueNet net = init_network({d, 32, 32, 1}, 17);
  net.set_output_scale(7.5);
  Mat sigma(d, d);
  for (int j = 0; j < d; ++j) sigma.col(j) = random_vec(d, rng, -0.5, 0.5);
  const DiffusionFactor factor = DiffusionFactor::from_sigma(sigma);

  const int probes = 1000;
  Mat pts(d, probes);
  for (int k = 0; k < probes; ++k) pts.col(k) = random_vec(d, rng, -2.0, 2.0);
  const BatchDerivatives bd = eval_batch(net, pts, &factor);

  // Normwise relative errors over all probes.
  double grad_err = 0.0, grad_norm = 0.0, trace_err = 0.0, trace_norm = 0.0;
  for (int k = 0; k < probes; ++k) {
    const Vec x = pts.col(k);
    for (int i = 0; i < d; ++i) {
      Vec e = Vec::Zero(d);
      e[i] = 1.0;
      const double fd = fd_first([&](double s) { return net.value(x + s * e); }, 1e-3);
      grad_err += std::pow(fd - bd.grads(i, k), 2);
      grad_norm += std::pow(bd.grads(i, k), 2);
    }
    double tr = 0.0;
    for (int j = 0; j < d; ++j) {
      const Vec c = sigma.col(j);
      tr += fd_second([&](double s) { return net.value(x + s * c); }, 1e-2 / c.norm());
    }
    trace_err += std::pow(tr - bd.traces[k], 2);
    trace_norm += std::pow(bd.traces[k], 2);
  }
  const double grad_rel = std::sqrt(grad_err / grad_norm), trace_rel = std::sqrt(trace_err / trace_norm);

  // Parameter gradient of the residual loss along random directions.
  ProblemDefinition def;
  def.name = "probe";
  def.state_dim = d;
  def.action_dim = 1;
  def.drift = [](const Vec& x, const Vec& a) -> Vec { return Vec(x.array().sin()) + Vec::Constant(3, a[0]); };
  def.cost = [](const Vec& x, const Vec& a) { return -x.squaredNorm() - a[0] * a[0]; };
  def.sigma = sigma;
  def.action_box = Box::cube(1, -1, 1);
  def.domain = Box::cube(d, -2, 2);
  const ControlProblem problem(def);
  const Mat acts = problem.action_box().sample_uniform(probes, rng);
  const ResidualData data = prepare_residual_data(problem, pts, acts);
  const LossAndGradient lg = loss_and_param_grad(net, problem, data);
  std::normal_distribution<double> normal;
  double param_rel = 0.0;
  for (int k = 0; k < 20; ++k) {
    Vec u(net.param_count());
    for (auto& v : u) v = normal(rng);
    u.normalize();
    auto loss_at = [&](double s) {
      ValueNet moved = net;
      moved.params() += s * u;
      return loss_and_param_grad(moved, problem, data).loss;
    };
    const double fd = fd_first(loss_at, 1e-4);
    param_rel = std::max(param_rel, std::abs(fd - lg.grad.dot(u)) / std::max(std::abs(fd), 1e-8));
  }
  const double secs = seconds_since(t0);
  const bool pass = grad_rel < 1e-5 && trace_rel < 1e-4 && param_rel < 1e-5 && secs < 60.0;
  return {pass, "grad rel " + fmt(grad_rel) + " (< 1e-5), trace rel " + fmt(trace_rel) +
                    " (< 1e-4), param rel " + fmt(param_rel) + " (< 1e-5), " + fmt(secs) + " s (< 60)"};
}

Verdict analytic_fixed_point() {
  const TimedRun& run = catalog_run("constant");
  const Checkpoint ck = load_checkpoint((kRunDir / "constant" / "ckpt_0").string());
  Rng rng(5);
  const Mat pts = run.problem.domain().sample_uniform(10000, rng);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < pts.cols(); ++i) worst = std::max(worst, std::abs(ck.net.value(pts.col(i)) - 1.0));
  const bool pass = worst < 1e-2 && run.seconds < 120.0;
  return {pass, "max |v_0 - 1| " + fmt(worst) + " (< 1e-2) after one iteration, " + fmt(run.seconds) +
                    " s (< 120)"};
}

Verdict grid_equivalence_1d() {
  const TimedRun& run = catalog_run("lqr1d");
  const auto t0 = std::chrono::steady_clock::now();
  GridConfig gcfg;
  gcfg.nodes = {401};
  const GridSolution grid = grid_howard_pi(run.problem, gcfg);
  const auto ref = [&grid](const Vec& x) { return grid.interpolate(x); };
  const double gap = l2_distance(net_fn(run.result.net), ref, run.problem.domain(), 20000, 7).value;
  const double norm = l2_distance(ref, [](const Vec&) { return 0.0; }, run.problem.domain(), 20000, 7).value;
  const double secs = run.seconds + seconds_since(t0);
  const double rel = gap / norm;
  return {rel < 0.05 && secs < 600.0, "relative L2 gap to 401-node grid PI " + fmt(rel) + " (< 0.05), " +
                                          fmt(secs) + " s (< 600)"};
}

Verdict riccati_agreement_2d() {
  const TimedRun& run = catalog_run("lqr2d");
  const ControlProblem& p = run.problem;
  const RiccatiSolution ric = solve_riccati_discounted(p);
  Rng rng(8);
  const Mat pts = p.domain().sample_uniform(20000, rng);

  // The box must be inactive on the domain for the comparison to be exact.
  double max_u = 0.0;
  Mat u_ric(p.action_dim(), pts.cols());
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    u_ric.col(i) = ric.policy(pts.col(i));
    max_u = std::max(max_u, u_ric.col(i).cwiseAbs().maxCoeff());
  }
  const bool inactive = max_u <= p.action_box().hi.minCoeff();

  const auto ref = [&ric](const Vec& x) { return ric.value(x); };
  const double gap = l2_distance(net_fn(run.result.net), ref, p.domain(), 20000, 9).value;
  const double norm = l2_distance(ref, [](const Vec&) { return 0.0; }, p.domain(), 20000, 9).value;
  const double value_rel = gap / norm;

  const auto greedy = PolicyHandle::greedy(p, std::make_shared<const ValueNet>(run.result.net));
  const Mat u_net = greedy.act(pts);
  double policy_rel = 0.0;
  for (int j = 0; j < p.action_dim(); ++j) {
    const double range = u_ric.row(j).maxCoeff() - u_ric.row(j).minCoeff();
    const double mae = (u_net.row(j) - u_ric.row(j)).cwiseAbs().mean();
    policy_rel = std::max(policy_rel, mae / range);
  }
  const bool pass = inactive && value_rel < 0.05 && policy_rel < 0.05 && run.seconds < 900.0;
  return {pass, "box inactive " + std::string(inactive ? "yes" : "no") + " (max |u| " + fmt(max_u) +
                    "), value rel L2 " + fmt(value_rel) + " (< 0.05), policy MAE/range " + fmt(policy_rel) +
                    " (< 0.05), " + fmt(run.seconds) + " s (< 900)"};
}

Verdict monotonicity() {
  bool pass = true;
  std::string detail;
  for (const char* name : {"lqr1d", "lqr2d", "pendulum"}) {
    const auto& recs = catalog_run(name).result.trace.records();
    std::vector<Vec> snaps;
    std::vector<double> slacks;
    for (std::size_t n = 0; n < recs.size(); ++n) {
      snaps.push_back(recs[n].probe_values);
      if (n + 1 < recs.size()) slacks.push_back(2.0 * recs[n].residual_l2);
    }
    const double frac = snaps.size() >= 2 ? monotonicity_fraction(snaps, slacks) : 0.0;
    pass = pass && frac >= 0.95;
    detail += std::string(name) + " " + fmt(frac) + ", ";
  }
  for (const char* name : {"lqr1d", "lqr2d"}) {
    const ControlProblem& p = catalog_run(name).problem;
    const GridSolution grid = grid_howard_pi(p);
    const double frac = monotonicity_fraction(grid.history, 1e-9);
    pass = pass && frac == 1.0;
    detail += std::string(name) + " grid PI " + fmt(frac) + (std::string(name) == "lqr1d" ? ", " : "");
  }
  return {pass, detail + " (>= 0.95 with slack 2 p_n, grid = 1)"};
}

Verdict contraction() {
  const auto& recs = catalog_run("lqr1d").result.trace.records();
  std::vector<double> errors;
  for (const auto& r : recs) errors.push_back(r.oracle_gap);
  bool non_increasing = true;
  for (std::size_t n = 1; n + 1 < errors.size(); ++n) non_increasing = non_increasing && errors[n + 1] <= errors[n];
  std::string seq;
  for (double e : errors) seq += (seq.empty() ? "" : " ") + fmt(e);
  if (errors.size() < 4) return {false, "only " + std::to_string(errors.size()) + " iterations: " + seq};
  const ConvergenceFit fit =
      fit_convergence_rate(errors, std::max(1, static_cast<int>(errors.size()) / 3));
  const double final_residual = recs.back().residual_l2;
  const double ratio = fit.floor_estimate / final_residual;
  const bool floor_ok = ratio >= 0.2 && ratio <= 5.0;
  const bool pass = non_increasing && fit.contraction && fit.kappa_hat < 1.0 && floor_ok;
  return {pass, "errors [" + seq + "] non-increasing after n=1: " + (non_increasing ? "yes" : "no") +
                    ", kappa_hat " + fmt(fit.kappa_hat) + " (< 1), floor/residual " + fmt(ratio) +
                    " (within 5x)"};
}

Verdict improvement_inequality() {
  bool pass = true;
  std::string detail;
  for (const char* name : {"constant", "lqr1d", "lqr2d", "pendulum", "cartpole", "lqr5d", "lqr10d"}) {
    double worst = 1.0;
    for (const auto& r : catalog_run(name).result.trace.records()) worst = std::min(worst, r.improvement_fraction);
    pass = pass && worst >= 0.999;
    detail += std::string(name) + " " + fmt(worst) + (std::string(name) == "lqr10d" ? "" : ", ");
  }
  return {pass, "min fraction per run: " + detail + " (>= 0.999)"};
}

Verdict selector_lipschitz() {
  Rng rng(6);
  const int d = 3;
  Mat A(d, d), B(d, d), Gr(d, d);
  std::normal_distribution<double> normal;
  for (auto& v : A.reshaped()) v = normal(rng);
  for (auto& v : B.reshaped()) v = normal(rng);
  for (auto& v : Gr.reshaped()) v = 0.5 * normal(rng);
  const Mat R = Mat((Gr.transpose() * Gr + 0.2 * Mat::Identity(d, d)).diagonal().asDiagonal());
  const ControlProblem affine = make_linear_quadratic("affine3", A, B, Mat::Identity(d, d), R,
                                                      0.1 * Mat::Identity(d, d), 1.0, Box::cube(d, -2, 2),
                                                      Box::cube(d, -3, 3));
  std::vector<std::pair<Vec, Vec>> pairs;
  for (int i = 0; i < 10000; ++i) pairs.emplace_back(random_vec(d, rng, -8, 8), random_vec(d, rng, -8, 8));
  const LipschitzProbe p3 = selector_lipschitz_probe(affine, random_vec(d, rng, -3, 3), pairs);

  const ControlProblem scalar = make_scalar_lqr(10.0);
  std::vector<std::pair<Vec, Vec>> pairs1;
  for (int i = 0; i < 10000; ++i) pairs1.emplace_back(random_vec(1, rng, -40, 40), random_vec(1, rng, -40, 40));
  const LipschitzProbe p1 = selector_lipschitz_probe(scalar, Vec::Zero(1), pairs1);

  const bool pass = p3.ratio <= p3.affine_bound * (1.0 + 1e-12) && p1.affine_bound == 0.5 &&
                    p1.ratio <= 0.5 * (1.0 + 1e-12);
  return {pass, "3D affine ratio " + fmt(p3.ratio) + " <= bound " + fmt(p3.affine_bound) + ", 1D ratio " +
                    fmt(p1.ratio) + " <= bound " + fmt(p1.affine_bound) + " (exact 0.5)"};
}

Verdict scalability() {
  bool pass = true;
  double total = 0.0;
  std::string detail;
  for (const char* name : {"lqr5d", "lqr10d"}) {
    const TimedRun& run = catalog_run(name);
    const auto& recs = run.result.trace.records();
    total += run.seconds;
    bool non_increasing = true;
    std::string seq;
    for (std::size_t n = 0; n < recs.size(); ++n) {
      if (n > 0) non_increasing = non_increasing && recs[n].residual_l2 <= recs[n - 1].residual_l2;
      seq += (seq.empty() ? "" : " ") + fmt(recs[n].residual_l2);
    }
    const double gap = recs.back().riccati_gap;
    pass = pass && recs.size() == 10 && non_increasing && std::isfinite(gap);
    detail += std::string(name) + ": " + std::to_string(recs.size()) + " iterations, residual_l2 [" + seq +
              "] non-increasing " + (non_increasing ? "yes" : "no") + ", Riccati gap " + fmt(gap) + "; ";
  }
  pass = pass && total < 7200.0;
  return {pass, detail + "total " + fmt(total) + " s (< 7200)"};
}

Verdict determinism() {
  bool pass = true;
  std::string detail;
  for (const char* name : {"constant", "lqr1d"}) {
    std::string traces[2];
    for (int k = 0; k < 2; ++k) {
      const fs::path out = kRunDir / ("cli_" + std::string(name) + "_" + std::to_string(k));
      const std::string cmd = std::string(PINNPI_CLI_PATH) + " solve --config " + PINNPI_CONFIG_DIR + "/" + name +
                              ".json --threads 1 --out " + out.string() + " > " + (out.string() + ".log") +
                              " 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, std::string("CLI run failed for ") + name};
      std::ifstream is(out / "trace.csv", std::ios::binary);
      std::stringstream ss;
      ss << is.rdbuf();
      traces[k] = ss.str();
    }
    const bool same = !traces[0].empty() && traces[0] == traces[1];
    pass = pass && same;
    detail += std::string(name) + (same ? " identical" : " DIFFERENT") + " (" +
              std::to_string(traces[0].size()) + " bytes)" + (std::string(name) == "lqr1d" ? "" : ", ");
  }
  return {pass, detail};
}

}  // namespace

int main() {
  fs::create_directories(kRunDir);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"1 derivative exactness", derivative_exactness},
      {"2 analytic fixed point", analytic_fixed_point},
      {"3 grid oracle equivalence (1D)", grid_equivalence_1d},
      {"4 Riccati agreement (2D)", riccati_agreement_2d},
      {"5 monotone improvement", monotonicity},
      {"6 contraction and error floor", contraction},
      {"7 improvement inequality", improvement_inequality},
      {"8 selector Lipschitz bound", selector_lipschitz},
      {"9 scalability (5D, 10D)", scalability},
      {"10 single-thread determinism", determinism},
  };
  std::vector<std::string> lines;
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    lines.push_back(std::string(v.pass ? "PASS" : "FAIL") + "  [" + name + "] " + v.detail);
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nSummary\n";
  for (const auto& l : lines) std::cout << l << '\n';
  std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
