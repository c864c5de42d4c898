#include <gtest/gtest.h>

#include <set>

#include "arfn/schedule.hpp"
#include "arfn/synthdata.hpp"

using namespace arfn;

TEST(Schedule, ShiftedSigmas) {
  const auto s = from_raw_steps({1000, 750, 500, 250}, 5.0);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_DOUBLE_EQ(s.sigma[0], 1.0);
  EXPECT_NEAR(s.sigma[1], 15.0 / 16.0, 1e-15);
  EXPECT_NEAR(s.sigma[2], 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(s.sigma[3], 5.0 / 8.0, 1e-15);
}

TEST(Schedule, UnitShiftIsIdentity) {
  const auto s = from_raw_steps({1000, 600, 100}, 1.0);
  EXPECT_DOUBLE_EQ(s.sigma[1], 0.6);
  EXPECT_DOUBLE_EQ(s.sigma[2], 0.1);
}

TEST(Schedule, StepIndexing) {
  const auto s = from_raw_steps({1000, 750, 500, 250}, 5.0);
  EXPECT_EQ(s.raw_at(4), 1000);
  EXPECT_EQ(s.raw_at(1), 250);
  EXPECT_DOUBLE_EQ(s.sigma_at(4), 1.0);
  EXPECT_EQ(s.index_of_raw(750), 3u);
  EXPECT_EQ(s.index_of_raw(123), 0u);
}

TEST(Schedule, RejectsBadSteps) {
  EXPECT_THROW(from_raw_steps({}, 5.0), ConfigError);
  EXPECT_THROW(from_raw_steps({900, 500}, 5.0), ConfigError);
  EXPECT_THROW(from_raw_steps({1000, 500, 500}, 5.0), ConfigError);
  EXPECT_THROW(from_raw_steps({1000, 0}, 5.0), ConfigError);
  EXPECT_THROW(from_raw_steps({1000, 500}, 0.0), ConfigError);
}

TEST(Schedule, DiffuseThenPredictRecoversClean) {
  const std::vector<double> x0{0.3, -1.2, 2.0}, eps{1.0, 0.5, -0.7};
  const double sigma = 0.4;
  const auto xs = forward_diffuse(x0, eps, sigma);
  std::vector<double> v(3);
  for (int i = 0; i < 3; ++i) v[i] = x0[i] - eps[i];
  const auto back = predict_clean(xs, v, sigma);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(back[i], x0[i], 1e-15);
}

TEST(Rng, StreamsAreDistinctAndReproducible) {
  std::set<std::uint64_t> ids;
  for (std::uint64_t c = 0; c < 20; ++c)
    for (std::uint64_t j = 0; j < 5; ++j)
      for (auto role : {StreamRole::initial_noise, StreamRole::path_noise, StreamRole::dmd}) ids.insert(stream_id(7, c, j, role));
  EXPECT_EQ(ids.size(), 300u);
  Rng a(stream_id(7, 1, 2, StreamRole::eval)), b(stream_id(7, 1, 2, StreamRole::eval));
  EXPECT_EQ(a.normals<double>(16), b.normals<double>(16));
}

class WorldTest : public ::testing::Test {
 protected:
  WorldSpec world = make_world(WorldParams{});
  WorldOracle oracle{world};
};

TEST_F(WorldTest, TransitionsAreStable) {
  for (const auto& A : world.A) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(A);
    EXPECT_LT(es.eigenvalues().cwiseAbs().maxCoeff(), 1.0);
  }
  EXPECT_EQ(world.dim(), world.d * world.c * world.n_chunks);
}

TEST_F(WorldTest, ConditionsHaveUnitDirection) {
  Rng r(3);
  for (int i = 0; i < 20; ++i) {
    const auto c = sample_condition(world, r);
    EXPECT_LT(c.mode, world.modes());
    double n = 0;
    for (double v : c.direction) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
    const auto e = c.encode<double>(world.modes());
    EXPECT_EQ(e.size(), world.cond_dim());
    EXPECT_EQ(e[c.mode], 1.0);
  }
}

TEST_F(WorldTest, NoisedScoreMatchesDensityGradient) {
  Rng r(5);
  const auto cond = sample_condition(world, r);
  const auto seq = sample_video<double>(world, cond, r);
  for (double sigma : {0.1, 0.5, 0.9}) {
    std::vector<double> eps = r.normals<double>(seq.frames.size());
    Eigen::VectorXd x = WorldOracle::to_eigen(forward_diffuse(seq.frames, eps, sigma));
    for (auto mode : {std::optional<std::size_t>{}, std::optional<std::size_t>{cond.mode}}) {
      const Eigen::VectorXd s = oracle.noised_score(x, sigma, mode);
      for (Eigen::Index i : {Eigen::Index(0), Eigen::Index(17), x.size() - 1}) {
        const double h = 1e-5;
        Eigen::VectorXd up = x, dn = x;
        up(i) += h;
        dn(i) -= h;
        const double fd = (oracle.log_density(up, sigma, mode) - oracle.log_density(dn, sigma, mode)) / (2 * h);
        EXPECT_NEAR(s(i), fd, 1e-5 * (1 + std::abs(fd))) << "sigma " << sigma << " index " << i;
      }
    }
  }
}

TEST_F(WorldTest, TrueSamplesScoreAboveNoise) {
  Rng r(9);
  double real = 0, noise = 0;
  for (int i = 0; i < 20; ++i) {
    const auto cond = sample_condition(world, r);
    auto seq = sample_video<double>(world, cond, r);
    real += oracle.oracle_loglik(seq);
    seq.frames = r.normals<double>(seq.frames.size());
    noise += oracle.oracle_loglik(seq);
  }
  EXPECT_GT(real, noise);
}

TEST_F(WorldTest, RewardTermsAreBounded) {
  Rng r(4);
  RewardWeights w;
  for (int i = 0; i < 10; ++i) {
    const auto cond = sample_condition(world, r);
    const auto seq = sample_video<double>(world, cond, r);
    Tape<double> t(false);
    auto X = t.constant(Shape{world.frames(), world.d}, seq.frames);
    const auto terms = reward_terms(X, cond, w);
    for (const auto* term : {&terms.align, &terms.smooth, &terms.magnitude}) {
      EXPECT_GE(term->item(), -1.0);
      EXPECT_LE(term->item(), 1.0);
    }
    EXPECT_NEAR(reward_value(seq.frames, world.d, cond, w),
                w.align * terms.align.item() + w.smooth * terms.smooth.item() + w.magnitude * terms.magnitude.item(),
                1e-12);
  }
}

TEST_F(WorldTest, StaticVideoEarnsNoMotionReward) {
  Rng r(2);
  const auto cond = sample_condition(world, r);
  std::vector<double> frames;
  const auto f0 = r.normals<double>(world.d);
  for (std::size_t f = 0; f < world.frames(); ++f) frames.insert(frames.end(), f0.begin(), f0.end());
  Tape<double> t(false);
  const auto terms = reward_terms(t.constant(Shape{world.frames(), world.d}, frames), cond, RewardWeights{});
  EXPECT_NEAR(terms.magnitude.item(), 0.0, 1e-5);
  EXPECT_EQ(terms.smooth.item(), 0.0);
}

TEST(World, RejectsInvalidParams) {
  WorldParams p;
  p.q = 0;
  EXPECT_THROW(make_world(p), ConfigError);
  p = WorldParams{};
  p.rho = 1.2;
  EXPECT_THROW(make_world(p), ConfigError);
}
