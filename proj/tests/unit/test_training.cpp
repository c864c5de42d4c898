#include <gtest/gtest.h>

#include "arfn/harness/checkpoint.hpp"
#include "arfn/trainer.hpp"

using namespace arfn;

namespace {

struct Rig {
  WorldSpec world = make_world(WorldParams{});
  WorldOracle oracle{world};
  NoiseSchedule sched = from_raw_steps({1000, 750, 500, 250}, 5.0);
  DenoiserConfig cfg = [] {
    DenoiserConfig c;
    c.cond_dim = 11;
    return c;
  }();
  DenoiserParams<double> base = init_denoiser<double>(cfg, 2);

  static TrainerConfig small(Method m, Objective o) {
    TrainerConfig tc;
    tc.method = m;
    tc.objective = o;
    tc.batch = 2;
    tc.reg_weight = default_reg_weight(o);
    tc.fake.warmup = 10;
    tc.fake.pool_rounds = 2;
    tc.fake.pool_batch = 4;
    tc.fake.k_fake = 1;
    return tc;
  }
};

}  // namespace

TEST(Dmd, OneDimensionalGradientMatchesKl) {
  for (double mu : {0.5, 1.0, 2.0}) {
    const auto e = dmd_gradient_1d(mu, 100000, 1);
    EXPECT_NEAR(e.normalized, mu, 0.05 * mu) << "mu " << mu;
    EXPECT_GT(e.raw, 0.0);
  }
}

TEST(Dmd, SymmetricNoiseRangeHalvesTheRawGradient) {
  const auto e = dmd_gradient_1d(1.0, 1000, 2);
  EXPECT_NEAR(e.weight, 0.5, 1e-9);
}

TEST(Dmd, SurrogateGradientHandValue) {
  Tape<double> t;
  auto X = t.variable(Shape{1, 2}, {0.5, -1.0});
  const double sigma = 0.25;
  const std::vector<double> eps{0.2, 0.4};
  auto l = dmd_surrogate_loss(
      X, sigma, eps, [](const std::vector<double>& x, double) { return std::vector<double>{x[0], 0.0}; },
      [](const std::vector<double>&, double) { return std::vector<double>{1.0, 2.0}; });
  t.backward(l);
  const double xs0 = 0.75 * 0.5 + 0.25 * 0.2;
  const auto g = X.grad();
  EXPECT_DOUBLE_EQ(g[0], (1.0 - xs0) / 2.0 * 0.75);
  EXPECT_DOUBLE_EQ(g[1], 2.0 / 2.0 * 0.75);
  EXPECT_THROW(dmd_surrogate_loss(X, 1.0, eps, [](auto x, double) { return x; }, [](auto x, double) { return x; }), Error);
}

TEST(Dmd, ScoreVelocityConversionsInvert) {
  Rng r(3);
  const auto x = r.normals<double>(12), s = r.normals<double>(12);
  for (double sigma : {0.1, 0.5, 0.9}) {
    const auto back = score_from_velocity(x, velocity_from_score(x, s, sigma), sigma);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], s[i], 1e-9);
  }
}

TEST(Dmd, FreshFakeScoreEqualsPrior) {
  Rig s;
  FakeScoreModel<double> fake(s.cfg, 4, &s.oracle, s.world.modes());
  Rng r(6);
  const auto cond = sample_condition(s.world, r);
  const auto x = r.normals<double>(s.world.dim());
  EXPECT_EQ(fake.score(x, 0.4, cond), s.oracle.noised_score(x, 0.4, cond.mode));
}

TEST(Dmd, FakeScoreUpdatesReduceLoss) {
  Rig s;
  FakeScoreModel<double> fake(s.cfg, 4, nullptr, s.world.modes());
  AdamW<double> opt(collect_params<double>(fake.params), AdamWConfig{3e-3});
  Rng r(7);
  std::vector<std::vector<double>> xs;
  std::vector<Condition> cs;
  for (int i = 0; i < 4; ++i) {
    cs.push_back(sample_condition(s.world, r));
    xs.push_back(sample_video<double>(s.world, cs.back(), r).frames);
  }
  auto avg = [&](std::size_t from, std::size_t n) {
    double a = 0;
    for (std::size_t it = from; it < from + n; ++it) {
      Rng rr(it);
      a += fake_score_update(fake, opt, xs, cs, rr, DmdNoise{}) / static_cast<double>(n);
    }
    return a;
  };
  const double first = avg(0, 5);
  avg(5, 50);
  EXPECT_LT(avg(55, 5), first);
}

TEST(Objectives, ParseAndLoss) {
  EXPECT_EQ(parse_objective("dmd"), Objective::dmd);
  EXPECT_EQ(parse_objective("reward"), Objective::reward);
  EXPECT_THROW(parse_objective("dmd+reward"), ConfigError);
  EXPECT_THROW(parse_objective("kl"), ConfigError);
  Tape<double> t;
  auto f = t.variable(Shape{}, {2.0});
  auto reg = t.variable(Shape{}, {3.0});
  EXPECT_DOUBLE_EQ(refiner_loss(f, reg, 0.5).item(), -0.5);
  EXPECT_THROW(refiner_loss(f, reg, -1.0), ConfigError);
  EXPECT_EQ(default_reg_weight(Objective::dmd), 0.0);
  EXPECT_GT(default_reg_weight(Objective::reward), 0.0);
}

TEST(Trainer, BaseWeightsNeverChange) {
  Rig s;
  const auto h0 = param_hash(s.base);
  for (Method m : {Method::pathwise, Method::initial, Method::lora}) {
    for (Objective o : {Objective::dmd, Objective::reward}) {
      Trainer<double> tr(s.base, s.world, s.oracle, s.sched, Rig::small(m, o));
      const auto stats = tr.train(3);
      for (const auto& st : stats) {
        EXPECT_EQ(st.grad_calls, s.world.n_chunks);
        EXPECT_TRUE(std::isfinite(st.loss));
      }
      EXPECT_EQ(param_hash(s.base), h0) << method_name(m) << " " << objective_name(o);
    }
  }
}

TEST(Trainer, TrainableParametersMove) {
  Rig s;
  Trainer<double> tr(s.base, s.world, s.oracle, s.sched, Rig::small(Method::pathwise, Objective::reward));
  const auto h0 = param_hash(*tr.refiner_params());
  tr.train(2);
  EXPECT_NE(param_hash(*tr.refiner_params()), h0);
  EXPECT_EQ(tr.steps_done(), 2u);
}

TEST(Trainer, MethodSpecificEntryPointsCheckConfiguration) {
  Rig s;
  Trainer<double> tr(s.base, s.world, s.oracle, s.sched, Rig::small(Method::lora, Objective::reward));
  EXPECT_THROW(tr.train_step_autorefiner(), ConfigError);
  EXPECT_THROW(tr.train_step_init_refiner(), ConfigError);
  EXPECT_NO_THROW(tr.train_step_lora_baseline());
}

TEST(Trainer, RefinedSubsetRestrictsGradientStep) {
  Rig s;
  auto tc = Rig::small(Method::pathwise, Objective::reward);
  tc.refined_steps = {2};
  Trainer<double> tr(s.base, s.world, s.oracle, s.sched, tc);
  for (const auto& st : tr.train(4)) EXPECT_EQ(st.s, 2u);
  tc.refined_steps = {4};
  EXPECT_THROW(Trainer<double>(s.base, s.world, s.oracle, s.sched, tc), ConfigError);
}

TEST(Trainer, SameSeedSameTrajectory) {
  Rig s;
  const auto tc = Rig::small(Method::pathwise, Objective::dmd);
  Trainer<double> a(s.base, s.world, s.oracle, s.sched, tc), b(s.base, s.world, s.oracle, s.sched, tc);
  a.train(2);
  b.train(2);
  EXPECT_EQ(param_hash(*a.refiner_params()), param_hash(*b.refiner_params()));
}

TEST(Trainer, RewardOnlyRegularizationShrinksRefinement) {
  // all reward weights zero leaves pure regularization, which keeps the refiner at zero output
  Rig s;
  auto tc = Rig::small(Method::pathwise, Objective::reward);
  tc.reward = RewardWeights{0, 0, 0};
  tc.reg_weight = 1.0;
  Trainer<double> tr(s.base, s.world, s.oracle, s.sched, tc);
  for (const auto& st : tr.train(3)) EXPECT_EQ(st.reg, 0.0);
}

TEST(Pretrain, FlowMatchingLossDecreases) {
  Rig s;
  PretrainConfig pc;
  pc.fm_steps = 60;
  pc.fm_batch = 4;
  std::vector<double> losses;
  pretrain_flow_matching<double>(s.world, s.cfg, pc, [&](std::size_t, double l) { losses.push_back(l); });
  ASSERT_EQ(losses.size(), 60u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += losses[i];
    tail += losses[50 + i];
  }
  EXPECT_LT(tail, head);
}
