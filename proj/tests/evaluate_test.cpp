#include <gtest/gtest.h>

#include <sstream>

#include "pinnpi/evaluate.hpp"
#include "pinnpi/oracle.hpp"

using namespace pinnpi;

namespace {

// tanh net with all-zero weights and output bias c: exactly v = c.
ValueNet constant_net(int d, double c) {
  ValueNet net = init_network({d, 8, 8, 1}, 1);
  net.params().setZero();
  net.bias(net.num_layers() - 1)[0] = c;
  return net;
}

}  // namespace

TEST(SampleCollocation, SupportMeanAndDeterminism) {
  const auto p = make_lqr({.d = 5, .seed = 1});
  const auto pol = PolicyHandle::explicit_policy(p, [](const Vec& x) { return Vec(100.0 * x); }, "big");
  const auto b = sample_collocation(p, pol, 4096, 11);
  EXPECT_GE(b.points.minCoeff(), -3.0);
  EXPECT_LE(b.points.maxCoeff(), 3.0);
  EXPECT_LE(b.actions.cwiseAbs().maxCoeff(), 10.0);
  const double tol = 4.0 * (6.0 / std::sqrt(12.0)) / std::sqrt(4096.0);
  for (int i = 0; i < 5; ++i) EXPECT_LT(std::abs(b.points.row(i).mean()), tol);
  const auto b2 = sample_collocation(p, pol, 4096, 11);
  EXPECT_EQ(b.points, b2.points);
  EXPECT_EQ(b.actions, b2.actions);
  EXPECT_THROW(sample_collocation(p, pol, 0, 1), std::invalid_argument);
}

TEST(ResidualL2, Examples) {
  const auto unit = make_constant_cost(1.0, 1.0, 1, 0.1, Box::cube(1, 0, 1));
  const auto pol = PolicyHandle::box_center(unit);
  EXPECT_NEAR(residual_l2(constant_net(1, 2.0), unit, pol, 1000, 1), 1.0, 1e-12);
  EXPECT_LT(residual_l2(constant_net(1, 1.0), unit, pol, 1000, 1), 1e-8);
  EXPECT_THROW(residual_l2(constant_net(1, 1.0), unit, pol, 999, 1), std::invalid_argument);
}

TEST(ResidualL2, StableAcrossSeeds) {
  const auto p = make_scalar_lqr();
  const auto pol = PolicyHandle::constant(p, Vec::Zero(1));
  const ValueNet net = init_network({1, 16, 16, 1}, 3);
  const auto b = sample_collocation(p, pol, 20000, 1);
  const Vec r = residuals(net, p, prepare_residual_data(p, b.points, b.actions));
  const double se = residual_l2_stderr(r, p.domain().volume());
  const double ref = l2_from_samples(r, p.domain().volume());
  for (std::uint64_t seed = 2; seed < 6; ++seed)
    EXPECT_NEAR(residual_l2(net, p, pol, 20000, seed), ref, 3.0 * std::sqrt(2.0) * se);
}

TEST(Train, WarmStartAtExactSolutionStopsImmediately) {
  const auto p = make_constant_cost(1.0, 1.0, 2);
  ValueNet net = constant_net(2, 1.0);
  const auto rep = policy_evaluation_train(net, p, PolicyHandle::box_center(p), {});
  EXPECT_EQ(rep.steps_taken, 0);
  EXPECT_TRUE(rep.tolerance_met);
  EXPECT_EQ(rep.final_loss, 0.0);
}

TEST(Train, ConstantCostColdStart) {
  const auto p = make_constant_cost(1.0, 1.0, 1);
  ValueNet net = init_network(default_architecture(1), 2);
  TrainConfig cfg;
  cfg.seed = 5;
  const auto rep = policy_evaluation_train(net, p, PolicyHandle::box_center(p), cfg);
  EXPECT_TRUE(rep.tolerance_met);
  EXPECT_LE(rep.residual_l2_estimate, rep.p_target);
  EXPECT_LT(rep.final_loss, rep.initial_loss);
  Rng rng(9);
  const Mat probe = p.domain().sample_uniform(4096, rng);
  const auto bd = eval_batch(net, probe, nullptr);
  EXPECT_LT((bd.values.array() - 1.0).abs().maxCoeff(), 1e-2);
}

TEST(Train, FrozenClampedPolicyMatchesGrid) {
  const auto p = make_scalar_lqr(1.0);
  const auto pol = PolicyHandle::explicit_policy(p, [](const Vec& x) { return Vec(-0.5 * x); }, "clamp(kx)");
  const auto grid = grid_policy_evaluation(p, pol, {.nodes = {801}});
  ValueNet net = init_network(default_architecture(1), 1);
  TrainConfig cfg;
  cfg.N = 1024;
  cfg.steps = 3000;
  cfg.seed = 3;
  const auto rep = policy_evaluation_train(net, p, pol, cfg);
  EXPECT_LT(rep.final_loss, rep.initial_loss);
  auto g = [&](const Vec& x) { return grid.interpolate(x); };
  auto v = [&](const Vec& x) { return net.value(x); };
  const double gap = l2_distance(g, v, p.domain(), 4000, 1).value;
  const double scale = l2_distance(g, [](const Vec&) { return 0.0; }, p.domain(), 4000, 1).value;
  EXPECT_LT(gap / scale, 0.02);
}

TEST(Train, CurveAndDeterminism) {
  const auto p = make_pendulum();
  const auto pol = PolicyHandle::box_center(p);
  TrainConfig cfg;
  cfg.N = 256;
  cfg.steps = 60;
  cfg.probe_size = 1024;
  cfg.probe_every = 20;
  cfg.resample_every = 25;
  cfg.seed = 8;
  std::ostringstream c1, c2;
  ValueNet n1 = init_network({2, 16, 16, 1}, 4), n2 = n1;
  set_num_threads(1);
  cfg.curve = &c1;
  const auto r1 = policy_evaluation_train(n1, p, pol, cfg);
  cfg.curve = &c2;
  const auto r2 = policy_evaluation_train(n2, p, pol, cfg);
  EXPECT_EQ(c1.str(), c2.str());
  EXPECT_EQ(n1.params(), n2.params());
  EXPECT_EQ(r1.final_loss, r2.final_loss);
  EXPECT_EQ(r1.residual_l2_estimate, r2.residual_l2_estimate);
  EXPECT_EQ(r1.steps_taken, 60);
  // header + step 0 + 60 steps
  const std::string curve = c1.str();
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 62);
}

TEST(Train, DivergenceRaisesWithTrace) {
  const auto p = make_constant_cost(1.0, 1.0, 1);
  ValueNet net = init_network({1, 8, 1}, 1);
  TrainConfig cfg;
  cfg.N = 64;
  cfg.steps = 300;
  cfg.probe_size = 1000;
  cfg.adam.lr = cfg.adam.lr_final = 1e3;
  cfg.divergence_factor = 1.0;  // any loss above the start counts
  cfg.divergence_patience = 5;
  try {
    policy_evaluation_train(net, p, PolicyHandle::box_center(p), cfg);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.loss_trace().size(), 5u);
  }
}

TEST(Adam, CosineScheduleEndpoints) {
  Adam adam(3, {}, 100);
  EXPECT_DOUBLE_EQ(adam.learning_rate(0), 1e-3);
  EXPECT_DOUBLE_EQ(adam.learning_rate(100), 1e-4);
  EXPECT_NEAR(adam.learning_rate(50), 0.5 * (1e-3 + 1e-4), 1e-15);
  // first step moves each coordinate by exactly lr (bias-corrected sign step)
  Vec p = Vec::Zero(3), g(3);
  g << 2.0, -0.5, 1e3;
  adam.step(p, g);
  EXPECT_NEAR(p[0], -1e-3, 1e-10);
  EXPECT_NEAR(p[1], 1e-3, 1e-10);
  EXPECT_NEAR(p[2], -1e-3, 1e-10);
}

TEST(ValueScale, RmsRewardOverLambdaWithUnitFloor) {
  const auto c = make_constant_cost(0.5, 2.0, 1);
  Rng rng(1);
  const Mat pts = c.domain().sample_uniform(10, rng);
  EXPECT_EQ(value_scale(c, PolicyHandle::box_center(c), pts), 1.0);
  const auto big = make_constant_cost(30.0, 2.0, 1);
  EXPECT_DOUBLE_EQ(value_scale(big, PolicyHandle::box_center(big), pts), 15.0);
  EXPECT_THROW(value_scale(big, PolicyHandle::box_center(big), Mat(1, 0)), std::invalid_argument);
}
