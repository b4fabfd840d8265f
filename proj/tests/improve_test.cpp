#include <gtest/gtest.h>

#include "pinnpi/improve.hpp"
#include "test_util.hpp"

using namespace pinnpi;
using pinnpi::testing::random_vec;

namespace {

ControlProblem general_1d(double lo, double hi, std::function<double(double)> reward) {
  ProblemDefinition def;
  def.name = "general1d";
  def.state_dim = 1;
  def.action_dim = 1;
  def.drift = [](const Vec&, const Vec& a) -> Vec { return a; };
  def.cost = [reward](const Vec&, const Vec& a) { return reward(a[0]); };
  def.sigma = Mat::Identity(1, 1);
  def.action_box = Box::cube(1, lo, hi);
  def.domain = Box::cube(1, -1, 1);
  return ControlProblem(def);
}

ControlProblem random_affine(int d, int m, std::uint64_t seed, bool diagonal_r, double u_max) {
  Rng rng(seed);
  Mat A(d, d), B(d, m), Gr(m, m);
  for (auto& v : A.reshaped()) v = std::normal_distribution<double>()(rng);
  for (auto& v : B.reshaped()) v = std::normal_distribution<double>()(rng);
  for (auto& v : Gr.reshaped()) v = 0.5 * std::normal_distribution<double>()(rng);
  Mat R = Gr.transpose() * Gr + 0.2 * Mat::Identity(m, m);
  if (diagonal_r) R = Mat(R.diagonal().asDiagonal());
  return make_linear_quadratic("rand", A, B, Mat::Identity(d, d), R, 0.1 * Mat::Identity(d, d), 1.0,
                               Box::cube(m, -u_max, u_max), Box::cube(d, -3, 3));
}

}  // namespace

TEST(ClosedForm, ScalarExamples) {
  const auto p = make_scalar_lqr(10.0);
  const Vec x = Vec::Zero(1);
  EXPECT_DOUBLE_EQ(greedy_action_closed_form(p, x, Vec::Constant(1, 4.0))[0], 2.0);
  EXPECT_DOUBLE_EQ(greedy_action_closed_form(p, x, Vec::Constant(1, 30.0))[0], 10.0);
  EXPECT_DOUBLE_EQ(greedy_action_closed_form(p, x, Vec::Constant(1, 0.0))[0], 0.0);
}

TEST(ClosedForm, RejectsGeneralStructure) {
  EXPECT_THROW(greedy_action_closed_form(make_constant_cost(1, 1, 1), Vec::Zero(1), Vec::Zero(1)),
               StructureError);
  EXPECT_THROW(greedy_action_closed_form(random_affine(2, 2, 1, false, 1.0), Vec::Zero(2), Vec::Zero(2)),
               StructureError);
}

TEST(Projected, AgreesWithClosedFormOnRandomInstances) {
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    const int d = 1 + k % 4, m = 1 + k % 3;
    const auto p = random_affine(d, m, 100 + k, true, 1.0 + k % 5);
    const Vec x = p.domain().sample_uniform(1, rng).col(0);
    const Vec z = random_vec(d, rng, -10, 10);
    const auto res = greedy_action_projected(p, x, z);
    EXPECT_TRUE(res.converged);
    EXPECT_LT((res.action - greedy_action_closed_form(p, x, z)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Projected, NonSeparableFixtures) {
  const auto quartic = general_1d(-1, 1, [](double a) { return -a * a * a * a - a * a; });
  EXPECT_NEAR(greedy_action_projected(quartic, Vec::Zero(1), Vec::Zero(1)).action[0], 0.0, 1e-12);
  // unconstrained optimum at -0.5 lies outside [0, 1]
  const auto shifted = general_1d(0, 1, [](double a) { return -(a + 0.5) * (a + 0.5); });
  const auto res = greedy_action_projected(shifted, Vec::Zero(1), Vec::Zero(1));
  EXPECT_TRUE(res.converged);
  EXPECT_NEAR(res.action[0], 0.0, 1e-12);
  // interior optimum of -a^4 - a^2 + a z with z = 3: 4a^3 + 2a = 3
  const auto r = greedy_action_projected(quartic, Vec::Zero(1), Vec::Constant(1, 3.0));
  const double a = r.action[0];
  EXPECT_NEAR(4 * a * a * a + 2 * a, 3.0, 1e-7);
}

TEST(Projected, NonDiagonalRMatchesKktConditions) {
  Rng rng(8);
  for (int k = 0; k < 50; ++k) {
    const auto p = random_affine(3, 3, 500 + k, false, 0.5);
    const Vec x = p.domain().sample_uniform(1, rng).col(0);
    const Vec z = random_vec(3, rng, -5, 5);
    const auto res = greedy_action_projected(p, x, z);
    ASSERT_TRUE(res.converged);
    // KKT for a box: gradient points outward exactly on active coordinates
    const Vec g = -2.0 * p.affine()->R * res.action + p.affine()->G(x).transpose() * z;
    for (int i = 0; i < 3; ++i) {
      const double ai = res.action[i];
      if (ai <= -0.5 + 1e-12) EXPECT_LE(g[i], 1e-7);
      else if (ai >= 0.5 - 1e-12) EXPECT_GE(g[i], -1e-7);
      else EXPECT_NEAR(g[i], 0.0, 1e-7);
    }
  }
}

TEST(PolicyHandle, ActionsStayInBox) {
  const auto p = make_lqr({.d = 3, .seed = 1, .u_max = 0.3});
  auto net = std::make_shared<const ValueNet>(init_network({3, 8, 8, 1}, 4));
  const auto policy = PolicyHandle::greedy(p, net);
  Rng rng(2);
  const Mat pts = p.domain().sample_uniform(200, rng);
  const Mat acts = policy.act(pts);
  EXPECT_LE(acts.maxCoeff(), 0.3);
  EXPECT_GE(acts.minCoeff(), -0.3);
  for (int i = 0; i < 200; i += 17) EXPECT_LT((policy(pts.col(i)) - acts.col(i)).norm(), 1e-12);
  const auto wild = PolicyHandle::explicit_policy(p, [](const Vec&) { return Vec::Constant(3, 5.0); }, "w");
  EXPECT_EQ(wild(Vec::Zero(3)), Vec::Constant(3, 0.3));
}

TEST(PolicySupDistance, Examples) {
  const auto p = make_scalar_lqr(10.0);
  const Mat probe = Mat(Eigen::RowVectorXd::LinSpaced(61, -3.0, 3.0));
  const auto one = PolicyHandle::constant(p, Vec::Constant(1, 1.0));
  const auto three = PolicyHandle::constant(p, Vec::Constant(1, 3.0));
  EXPECT_EQ(policy_sup_distance(one, one, probe), 0.0);
  EXPECT_EQ(policy_sup_distance(one, three, probe), 2.0);
  const auto k1 = PolicyHandle::explicit_policy(p, [](const Vec& x) { return Vec(1.0 * x); }, "k1");
  const auto k11 = PolicyHandle::explicit_policy(p, [](const Vec& x) { return Vec(1.1 * x); }, "k1.1");
  EXPECT_NEAR(policy_sup_distance(k1, k11, probe), 0.3, 1e-12);
  EXPECT_THROW(policy_sup_distance(one, three, Mat(1, 0)), std::invalid_argument);
}

TEST(Improvement, GreedyDominatesAnyOldPolicy) {
  Rng rng(21);
  for (const auto& p : {make_lqr({.d = 2, .seed = 3, .u_max = 1.0}), make_pendulum(), make_cartpole()}) {
    const ValueNet net = init_network({p.state_dim(), 10, 10, 1}, 9);
    const Mat pts = p.domain().sample_uniform(500, rng);
    const auto bd = eval_batch(net, pts, nullptr);
    const Mat old_acts = p.action_box().sample_uniform(500, rng);
    const auto greedy = PolicyHandle::greedy(p, std::make_shared<const ValueNet>(net));
    EXPECT_EQ(improvement_fraction(p, pts, bd.grads, greedy.act(pts), old_acts), 1.0) << p.name();
  }
}

TEST(Lipschitz, ScalarBoundIsOneHalf) {
  const auto p = make_scalar_lqr(10.0);
  Rng rng(4);
  std::vector<std::pair<Vec, Vec>> pairs;
  for (int i = 0; i < 10000; ++i) pairs.emplace_back(random_vec(1, rng, -40, 40), random_vec(1, rng, -40, 40));
  const auto probe = selector_lipschitz_probe(p, Vec::Zero(1), pairs);
  EXPECT_LE(probe.ratio, 0.5 + 1e-12);
  EXPECT_NEAR(probe.affine_bound, 0.5, 1e-15);
  EXPECT_GT(probe.ratio, 0.49);
}

TEST(Lipschitz, RejectsEqualPair) {
  const auto p = make_scalar_lqr();
  EXPECT_THROW(selector_lipschitz_probe(p, Vec::Zero(1), {{Vec::Ones(1), Vec::Ones(1)}}),
               std::invalid_argument);
}

TEST(Lipschitz, RandomAffineWithinOperatorNorm) {
  Rng rng(6);
  const auto p = random_affine(3, 3, 77, true, 2.0);
  const Vec x = random_vec(3, rng);
  std::vector<std::pair<Vec, Vec>> pairs;
  for (int i = 0; i < 10000; ++i) pairs.emplace_back(random_vec(3, rng, -8, 8), random_vec(3, rng, -8, 8));
  const auto probe = selector_lipschitz_probe(p, x, pairs);
  EXPECT_LE(probe.ratio, probe.affine_bound + 1e-9);
  EXPECT_LE(probe.affine_bound, probe.theta_bound + 1e-12);
}

TEST(Lipschitz, NonDiagonalRWithinMetricBound) {
  Rng rng(7);
  const auto p = random_affine(3, 3, 78, false, 1.0);
  const Vec x = random_vec(3, rng);
  std::vector<std::pair<Vec, Vec>> pairs;
  for (int i = 0; i < 2000; ++i) pairs.emplace_back(random_vec(3, rng, -8, 8), random_vec(3, rng, -8, 8));
  const auto probe = selector_lipschitz_probe(p, x, pairs);
  EXPECT_LE(probe.ratio, probe.metric_bound + 1e-6);
}
