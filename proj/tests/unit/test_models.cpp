#include <gtest/gtest.h>

#include "arfn/harness/checkpoint.hpp"
#include "arfn/harness/selfcheck.hpp"
#include "arfn/optim.hpp"
#include "arfn/sampler.hpp"

using namespace arfn;

namespace {

struct Small {
  WorldSpec world = make_world(WorldParams{});
  DenoiserConfig cfg = [] {
    DenoiserConfig c;
    c.cond_dim = 11;
    return c;
  }();
  NoiseSchedule sched = from_raw_steps({1000, 750, 500, 250}, 5.0);
  DenoiserParams<double> base = init_denoiser<double>(cfg, 3);
  RefinerParams<double> ref = init_refiner(base, 4, 4.0, 5);
  Denoiser<double> gen{ModelView<double>{.base = &base}};

  Condition cond(std::uint64_t seed) const {
    Rng r(seed);
    return sample_condition(world, r);
  }
  void perturb_refiner(std::uint64_t seed, double scale = 0.1) {
    Rng r(seed);
    ref.visit([&](const std::string&, Tensor<double>& t) {
      for (auto& v : t.data) v = scale * r.normal();
    });
  }
};

}  // namespace

TEST(Models, KvCacheMatchesRecomputation) {
  for (std::uint64_t seed : {1u, 2u}) {
    const auto r = kv_cache_suite(seed);
    EXPECT_LT(r.history, 1e-10);
    EXPECT_LT(r.reflect, 1e-10);
    EXPECT_LT(r.rope_offset, 1e-10);
    EXPECT_LT(r.incremental, 1e-10);
  }
}

TEST(Models, HistoryChangesOutput) {
  Small s;
  Rng r(1);
  const auto cond = s.cond(2).encode<double>(s.world.modes());
  const auto x = r.normals<double>(s.cfg.chunk_frames * s.cfg.frame_dim);
  KVCache<double> empty, hist;
  s.gen.begin(empty, cond);
  s.gen.begin(hist, cond);
  s.gen.append_history(hist, r.normals<double>(x.size()), 0);
  const auto a = s.gen.forward_values(x, 0.5, empty, 3);
  const auto b = s.gen.forward_values(x, 0.5, hist, 3);
  EXPECT_GT(detail::max_abs_diff(a, b), 1e-6);
}

TEST(Models, ZeroLoraIsBitwiseIdentity) {
  Small s;
  auto lora = make_lora(s.base, 4, 4.0, 9);
  Denoiser<double> adapted(ModelView<double>{.base = &s.base, .lora = &lora});
  Rng r(3);
  const auto cond = s.cond(4).encode<double>(s.world.modes());
  const auto x = r.normals<double>(s.cfg.chunk_frames * s.cfg.frame_dim);
  KVCache<double> c1, c2;
  s.gen.begin(c1, cond);
  adapted.begin(c2, cond);
  EXPECT_EQ(s.gen.forward_values(x, 0.7, c1, 0), adapted.forward_values(x, 0.7, c2, 0));
  EXPECT_THROW(make_lora(s.base, 0, 1.0, 0), ConfigError);
}

TEST(Models, FreshRefinerOutputsZero) {
  Small s;
  Refiner<double> refiner(s.base, s.ref);
  ReflectiveContext<double> ctx;
  refiner.begin(ctx, s.cond(1).encode<double>(s.world.modes()), ContextFlags{});
  Rng r(5);
  const std::size_t ce = s.cfg.chunk_frames * s.cfg.frame_dim;
  refiner.set_reflect(ctx, r.normals<double>(ce), 0);
  for (double v : refiner.refine_values(r.normals<double>(ce), 0.5, ctx, 0, true)) EXPECT_EQ(v, 0.0);
}

TEST(Models, RefinerRequiresReflectBlock) {
  Small s;
  Refiner<double> refiner(s.base, s.ref);
  ReflectiveContext<double> ctx;
  refiner.begin(ctx, s.cond(1).encode<double>(s.world.modes()), ContextFlags{});
  Rng r(5);
  const auto eps = r.normals<double>(s.cfg.chunk_frames * s.cfg.frame_dim);
  EXPECT_THROW(refiner.refine_values(eps, 0.5, ctx, 0, true), Error);
  refiner.set_reflect(ctx, eps, 6);
  EXPECT_THROW(refiner.refine_values(eps, 0.5, ctx, 0, true), Error);
}

TEST(Models, RegularizerEqualsGaussianKl) {
  Rng r(8);
  for (int i = 0; i < 50; ++i) {
    const auto delta = r.normals<double>(24);
    // KL(N(d, I) || N(0, I)) = 0.5 (tr I + |d|^2 - k - log det I)
    double kl = 0.5 * (24.0 - 24.0);
    for (double v : delta) kl += 0.5 * v * v;
    EXPECT_NEAR(regularizer(delta), kl, 1e-15 * (1 + kl));
    Tape<double> t;
    auto dd = t.variable(Shape{24}, delta);
    auto reg = regularizer(dd);
    EXPECT_EQ(reg.item(), regularizer(delta));
    t.backward(reg);
    EXPECT_EQ(dd.grad(), delta);
  }
}

TEST(Optim, AdamWFirstStepHandValue) {
  Tensor<double> w(Shape{3}, {1.0, -2.0, 0.5});
  AdamW<double> opt({&w}, AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
  opt.step({{0.3, -0.1, 2.0}});
  // bias-corrected first step moves each weight by lr * g / (|g| + eps)
  EXPECT_NEAR(w.data[0], 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w.data[1], -2.0 + 1e-3 * 0.1 / (0.1 + 1e-8), 1e-15);
  EXPECT_NEAR(w.data[2], 0.5 - 1e-3 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps_taken(), 1u);
}

TEST(Optim, AdamWDecoupledDecayAndSecondStep) {
  Tensor<double> w(Shape{1}, {2.0});
  AdamW<double> opt({&w}, AdamWConfig{0.1, 0.9, 0.999, 0.0, 0.5});
  opt.step({{1.0}});
  // decay first: 2 - 0.1 * 0.5 * 2 = 1.9, then the unit Adam step
  EXPECT_NEAR(w.data[0], 1.8, 1e-14);
  opt.step({{-1.0}});
  const double m = 0.9 * 0.1 + 0.1 * -1.0, v = 0.999 * 0.001 + 0.001;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(w.data[0], 1.8 * (1 - 0.05) - 0.1 * mh / std::sqrt(vh), 1e-12);
}

TEST(Optim, AdamWRejectsMismatchedGradients) {
  Tensor<double> w(Shape{2}, {0, 0});
  AdamW<double> opt({&w}, AdamWConfig{});
  EXPECT_THROW(opt.step({{1.0}}), ShapeError);
  EXPECT_THROW(opt.step({}), ShapeError);
}

TEST(Sampler, RolloutIsDeterministicAndReplayable) {
  Small s;
  RolloutModels<double> m;
  m.gen = &s.gen;
  const auto cond = s.cond(1);
  const auto a = rollout_stochastic(m, s.sched, cond, s.world.n_chunks, s.world.modes(), 42);
  const auto b = rollout_stochastic(m, s.sched, cond, s.world.n_chunks, s.world.modes(), 42);
  const auto c = rollout_stochastic(m, s.sched, cond, s.world.n_chunks, s.world.modes(), 43);
  EXPECT_EQ(a.seq.frames, b.seq.frames);
  EXPECT_NE(a.seq.frames, c.seq.frames);
  EXPECT_EQ(a.seq.frames.size(), s.world.dim());
  EXPECT_TRUE(a.record.complete(s.world.n_chunks));
  EXPECT_EQ(deterministic_mapping(m, s.sched, a.record, cond, s.world.modes()).frames, a.seq.frames);
  EXPECT_EQ(a.counters.denoiser_calls, s.world.n_chunks * s.sched.size());
  EXPECT_EQ(a.counters.refiner_calls, 0u);
}

TEST(Sampler, FreshRefinerRolloutIsBitwiseBase) {
  Small s;
  Refiner<double> refiner(s.base, s.ref);
  RolloutModels<double> base_m;
  base_m.gen = &s.gen;
  for (auto mode : {RefineMode::pathwise, RefineMode::initial}) {
    RolloutModels<double> rm{&s.gen, &refiner, mode, ContextFlags{}, {}};
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto cond = s.cond(seed + 10);
      const auto a = rollout_stochastic(base_m, s.sched, cond, s.world.n_chunks, s.world.modes(), seed);
      const auto b = rollout_stochastic(rm, s.sched, cond, s.world.n_chunks, s.world.modes(), seed);
      EXPECT_EQ(a.seq.frames, b.seq.frames);
      EXPECT_EQ(b.reg_value, 0.0);
    }
  }
}

TEST(Sampler, RefinerCallCounts) {
  Small s;
  Refiner<double> refiner(s.base, s.ref);
  const auto cond = s.cond(1);
  RolloutModels<double> path{&s.gen, &refiner, RefineMode::pathwise, ContextFlags{}, {}};
  EXPECT_EQ(rollout_stochastic(path, s.sched, cond, s.world.n_chunks, s.world.modes(), 1).counters.refiner_calls,
            s.world.n_chunks * (s.sched.size() - 1));
  path.refined_steps = {2};
  EXPECT_EQ(rollout_stochastic(path, s.sched, cond, s.world.n_chunks, s.world.modes(), 1).counters.refiner_calls,
            s.world.n_chunks);
  RolloutModels<double> init{&s.gen, &refiner, RefineMode::initial, ContextFlags{}, {}};
  EXPECT_EQ(rollout_stochastic(init, s.sched, cond, s.world.n_chunks, s.world.modes(), 1).counters.refiner_calls,
            s.world.n_chunks);
}

TEST(Sampler, TrainedRefinerChangesSamples) {
  Small s;
  s.perturb_refiner(7);
  Refiner<double> refiner(s.base, s.ref);
  RolloutModels<double> base_m;
  base_m.gen = &s.gen;
  RolloutModels<double> rm{&s.gen, &refiner, RefineMode::pathwise, ContextFlags{}, {}};
  const auto cond = s.cond(1);
  const auto a = rollout_stochastic(base_m, s.sched, cond, s.world.n_chunks, s.world.modes(), 5);
  const auto b = rollout_stochastic(rm, s.sched, cond, s.world.n_chunks, s.world.modes(), 5);
  EXPECT_NE(a.seq.frames, b.seq.frames);
  EXPECT_GT(b.reg_value, 0.0);
}

TEST(Sampler, GradientTruncatesAtExitStep) {
  Small s;
  s.perturb_refiner(11);
  Refiner<double> refiner(s.base, s.ref, true);
  RolloutModels<double> rm{&s.gen, &refiner, RefineMode::pathwise, ContextFlags{}, {}};
  const auto cond = s.cond(3);
  for (std::size_t step = 1; step < s.sched.size(); ++step) {
    std::vector<std::vector<double>> grads[2];
    for (int masked = 0; masked < 2; ++masked) {
      Tape<double> tape;
      GradPlan<double> plan{&tape, GradTarget::refiner_step, step, masked == 1};
      auto r = rollout_stochastic(rm, s.sched, cond, s.world.n_chunks, s.world.modes(), 17, &plan);
      EXPECT_EQ(r.grad_calls, s.world.n_chunks);
      tape.backward(sum(concat_rows(r.chunk_outputs)));
      s.ref.visit([&](const std::string&, const Tensor<double>& t) { grads[masked].push_back(tape.param_grad(t)); });
    }
    EXPECT_EQ(grads[0], grads[1]) << "step " << step;
    double n = 0;
    for (const auto& g : grads[0])
      for (double v : g) n += v * v;
    EXPECT_GT(n, 0.0);
  }
}

TEST(Sampler, GradRolloutMatchesPlainRolloutValues) {
  Small s;
  s.perturb_refiner(12);
  Refiner<double> refiner(s.base, s.ref, true);
  RolloutModels<double> rm{&s.gen, &refiner, RefineMode::pathwise, ContextFlags{}, {}};
  const auto cond = s.cond(3);
  Tape<double> tape;
  GradPlan<double> plan{&tape, GradTarget::refiner_step, 2, false};
  const auto g = rollout_stochastic(rm, s.sched, cond, s.world.n_chunks, s.world.modes(), 9, &plan);
  const auto p = rollout_stochastic(rm, s.sched, cond, s.world.n_chunks, s.world.modes(), 9,
                                    static_cast<const GradPlan<double>*>(nullptr), 0, 2);
  EXPECT_EQ(g.seq.frames, p.seq.frames);
}

TEST(Sampler, RejectsBadExitStep) {
  Small s;
  RolloutModels<double> m;
  m.gen = &s.gen;
  const auto cond = s.cond(1);
  EXPECT_THROW(rollout_stochastic(m, s.sched, cond, 2, s.world.modes(), 1, static_cast<const GradPlan<double>*>(nullptr), 0, 0), Error);
  EXPECT_THROW(rollout_stochastic(m, s.sched, cond, 2, s.world.modes(), 1, static_cast<const GradPlan<double>*>(nullptr), 0, 4), Error);
  RolloutModels<double> broken{&s.gen, nullptr, RefineMode::pathwise, ContextFlags{}, {}};
  EXPECT_THROW(rollout_stochastic(broken, s.sched, cond, 2, s.world.modes(), 1), Error);
}

TEST(Sampler, OdeRolloutIsDeterministic) {
  Small s;
  const auto cond = s.cond(2);
  Counters c;
  const auto a = rollout_ode(s.gen, s.sched, cond, s.world.n_chunks, s.world.modes(), 4, &c);
  const auto b = rollout_ode(s.gen, s.sched, cond, s.world.n_chunks, s.world.modes(), 4);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(c.denoiser_calls, s.world.n_chunks * s.sched.size());
  for (double v : a.frames) EXPECT_TRUE(std::isfinite(v));
}

TEST(Sampler, EulerIntegratesConstantVelocity) {
  const auto x = ode_integrate<double>({1.0, 2.0}, {1.0, 0.5}, [](const std::vector<double>&, double) {
    return std::vector<double>{-1.0, 3.0};
  });
  EXPECT_DOUBLE_EQ(x[0], 0.0);
  EXPECT_DOUBLE_EQ(x[1], 5.0);
}

TEST(Checkpoint, RoundTripIsExactAfterRounding) {
  Small s;
  auto p = s.base;
  round_to_stored(p);
  const auto bytes = encode_checkpoint(to_stored(p));
  auto q = init_denoiser<double>(s.cfg, 99);
  from_stored(q, decode_checkpoint(bytes));
  EXPECT_EQ(param_hash(p), param_hash(q));
  EXPECT_NE(param_hash(p), param_hash(s.base));
}

TEST(Checkpoint, EverySingleBitFlipIsDetected) {
  Small s;
  const auto bytes = encode_checkpoint(to_stored(s.ref));
  for (std::size_t i = 0; i < bytes.size(); i += 7) {
    for (int bit = 0; bit < 8; bit += 3) {
      auto bad = bytes;
      bad[i] = static_cast<char>(bad[i] ^ (1 << bit));
      EXPECT_THROW(decode_checkpoint(bad), Error) << "byte " << i << " bit " << bit;
    }
  }
}

TEST(Checkpoint, TruncationAndShapeMismatchRejected) {
  Small s;
  const auto bytes = encode_checkpoint(to_stored(s.ref));
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 10)), Error);
  auto other = init_refiner(s.base, 2, 2.0, 0);
  EXPECT_THROW(from_stored(other, decode_checkpoint(bytes)), Error);
}
