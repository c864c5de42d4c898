#pragma once

// Training loops: flow-matching pretraining, self-distillation of the base, and the three trained
// samplers compared in the experiments (pathwise refiner, LoRA on the base, initial-noise refiner).

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "arfn/denoiser.hpp"
#include "arfn/objectives.hpp"
#include "arfn/optim.hpp"
#include "arfn/parallel.hpp"
#include "arfn/refiner.hpp"
#include "arfn/sampler.hpp"
#include "arfn/schedule.hpp"
#include "arfn/synthdata.hpp"

namespace arfn {

enum class Method { pathwise, lora, initial, distill };

inline Method parse_method(const std::string& s) {
  if (s == "pathwise") return Method::pathwise;
  if (s == "lora") return Method::lora;
  if (s == "initial") return Method::initial;
  if (s == "distill") return Method::distill;
  throw ConfigError("method: expected pathwise, lora, initial or distill, got '" + s + "'");
}
inline const char* method_name(Method m) {
  switch (m) {
    case Method::pathwise: return "pathwise";
    case Method::lora: return "lora";
    case Method::initial: return "initial";
    case Method::distill: return "distill";
  }
  return "?";
}

inline double default_reg_weight(Objective o) { return o == Objective::dmd ? 0.0 : 0.1; }

struct FakeConfig {
  std::size_t k_fake = 5;        // updates per generator step
  std::size_t warmup = 2000;     // updates on the warm-up pool before training
  std::size_t batch = 16;        // warm-up batch
  std::size_t pool_rounds = 20;  // one exit step per round
  std::size_t pool_batch = 32;
  AdamWConfig opt{1e-3};
  bool operator==(const FakeConfig&) const = default;
};

struct TrainerConfig {
  Method method = Method::pathwise;
  Objective objective = Objective::dmd;
  AdamWConfig opt{1e-3};
  std::size_t batch = 8;
  double reg_weight = 0.0;
  RewardWeights reward;
  DmdNoise dmd;
  FakeConfig fake;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  ContextFlags flags;
  std::vector<std::size_t> refined_steps;  // step indices; empty = all intermediate steps
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct StepStats {
  std::size_t step = 0;
  std::size_t s = 0;
  double loss = 0, fidelity = 0, reward = 0, reg = 0, fake_loss = 0;
  std::size_t grad_calls = 0;
  Counters counters;
};

inline RefineMode refine_mode(Method m) {
  if (m == Method::pathwise) return RefineMode::pathwise;
  if (m == Method::initial) return RefineMode::initial;
  return RefineMode::none;
}

namespace detail {

template <class T>
void require_zero_grad(const Tape<T>& tape, const DenoiserParams<T>& base) {
  base.visit([&](const std::string& name, const Tensor<T>& t) {
    if (!tape.has_param(t)) return;
    for (T g : tape.param_grad(t))
      if (g != T(0)) throw Error("trainer: gradient reached frozen base parameter " + name);
  });
}

template <class T>
std::vector<std::vector<T>> sum_grads(const std::vector<std::vector<std::vector<T>>>& per_sample) {
  std::vector<std::vector<T>> out = per_sample.at(0);
  for (std::size_t b = 1; b < per_sample.size(); ++b)
    for (std::size_t p = 0; p < out.size(); ++p)
      for (std::size_t k = 0; k < out[p].size(); ++k) out[p][k] += per_sample[b][p][k];
  return out;
}

template <class T>
void check_finite(const std::vector<std::vector<T>>& g, const char* what) {
  for (const auto& v : g)
    for (T e : v)
      if (!std::isfinite(static_cast<double>(e))) throw NumericError(std::string(what) + ": non-finite gradient");
}

}  // namespace detail

// Fits the fake score to rollouts of the given sampler stopped at random steps.
template <class T>
std::unique_ptr<FakeScoreModel<T>> warm_fake(const RolloutModels<T>& models, const WorldSpec& world,
                                             const WorldOracle& oracle, const NoiseSchedule& sched,
                                             const FakeConfig& fc, const DmdNoise& dmd, std::uint64_t seed,
                                             std::size_t threads, double* last_loss = nullptr) {
  dmd.validate();
  const std::size_t Ts = sched.size();
  if (Ts < 2) throw ConfigError("warm_fake: schedule needs at least two steps");
  auto fake = std::make_unique<FakeScoreModel<T>>(models.gen->config(), stream_id(seed, 0, 0, StreamRole::fake, 1),
                                                  &oracle, world.modes());
  AdamW<T> opt(collect_params<T>(fake->params), fc.opt);
  std::vector<std::vector<T>> pool(fc.pool_rounds * fc.pool_batch);
  std::vector<Condition> pconds(pool.size());
  for (std::size_t r = 0; r < fc.pool_rounds; ++r) {
    Rng srng(stream_id(seed, r, 0, StreamRole::fake, 2));
    const std::size_t s = 1 + srng.below(Ts - 1);
    parallel_for(fc.pool_batch, threads, [&](std::size_t b) {
      const std::size_t idx = r * fc.pool_batch + b;
      Rng crng(stream_id(seed, r, b, StreamRole::condition, 2));
      pconds[idx] = sample_condition(world, crng);
      pool[idx] = rollout_stochastic(models, sched, pconds[idx], world.n_chunks, world.modes(),
                                     stream_id(seed, r, b, StreamRole::fake, 3), static_cast<const GradPlan<T>*>(nullptr), 0, s)
                      .seq.frames;
    });
  }
  double loss = 0.0;
  for (std::size_t it = 0; it < fc.warmup && !pool.empty(); ++it) {
    Rng rng(stream_id(seed, it, 0, StreamRole::fake, 4));
    std::vector<std::vector<T>> xs;
    std::vector<Condition> cs;
    for (std::size_t k = 0; k < fc.batch; ++k) {
      const std::size_t i = rng.below(pool.size());
      xs.push_back(pool[i]);
      cs.push_back(pconds[i]);
    }
    loss = static_cast<double>(fake_score_update(*fake, opt, xs, cs, rng, dmd));
  }
  if (last_loss) *last_loss = loss;
  return fake;
}

template <class T>
class Trainer {
 public:
  // base must outlive the trainer. A warm fake score, when given, is copied.
  Trainer(const DenoiserParams<T>& base, const WorldSpec& world, const WorldOracle& oracle, const NoiseSchedule& sched,
          TrainerConfig cfg, const FakeScoreModel<T>* warm = nullptr)
      : base_(&base), world_(&world), oracle_(&oracle), sched_(sched), cfg_(std::move(cfg)) {
    if (sched_.size() < 2) throw ConfigError("trainer: schedule needs at least two steps");
    if (cfg_.batch == 0) throw ConfigError("trainer: batch must be positive");
    if (cfg_.reg_weight < 0) throw ConfigError("trainer: negative regulariser weight");
    for (auto j : cfg_.refined_steps)
      if (j < 1 || j >= sched_.size()) throw ConfigError("trainer: refined step outside 1..T-1");
    cfg_.dmd.validate();
    const std::uint64_t pseed = stream_id(cfg_.seed, 0, 0, StreamRole::init_params, 3);
    std::vector<Tensor<T>*> trainable;
    switch (cfg_.method) {
      case Method::pathwise:
      case Method::initial:
        ref_params_ = std::make_unique<RefinerParams<T>>(init_refiner(base, cfg_.lora_rank, cfg_.lora_alpha, pseed));
        gen_ = std::make_unique<Denoiser<T>>(ModelView<T>{.base = &base});
        refiner_ = std::make_unique<Refiner<T>>(base, *ref_params_, true);
        trainable = collect_params<T>(*ref_params_);
        break;
      case Method::lora:
        lora_ = std::make_unique<LoraSet<T>>(make_lora(base, cfg_.lora_rank, cfg_.lora_alpha, pseed));
        gen_ = std::make_unique<Denoiser<T>>(ModelView<T>{.base = &base, .lora = lora_.get(), .lora_trainable = true});
        trainable = collect_params<T>(*lora_);
        break;
      case Method::distill:
        student_ = std::make_unique<DenoiserParams<T>>(base);
        gen_ = std::make_unique<Denoiser<T>>(ModelView<T>{.base = student_.get(), .base_trainable = true});
        trainable = collect_params<T>(*student_);
        break;
    }
    opt_ = std::make_unique<AdamW<T>>(std::move(trainable), cfg_.opt);
    if (cfg_.objective == Objective::dmd) {
      if (warm)
        fake_ = std::make_unique<FakeScoreModel<T>>(*warm);
      else
        fake_ = warm_fake(models(), world, oracle, sched_, cfg_.fake, cfg_.dmd, cfg_.seed, threads());
      fake_opt_ = std::make_unique<AdamW<T>>(collect_params<T>(fake_->params), cfg_.fake.opt);
    }
  }

  const TrainerConfig& config() const { return cfg_; }
  std::size_t steps_done() const { return step_; }
  const DenoiserParams<T>& base() const { return *base_; }
  const RefinerParams<T>* refiner_params() const { return ref_params_.get(); }
  const LoraSet<T>* lora() const { return lora_.get(); }
  const DenoiserParams<T>* student() const { return student_.get(); }
  const FakeScoreModel<T>* fake() const { return fake_.get(); }
  AdamW<T>& optimizer() { return *opt_; }

  RolloutModels<T> models() const {
    return RolloutModels<T>{gen_.get(), refiner_.get(), refine_mode(cfg_.method), cfg_.flags, cfg_.refined_steps};
  }

  StepStats step() {
    switch (cfg_.method) {
      case Method::pathwise: return train_step_autorefiner();
      case Method::lora: return train_step_lora_baseline();
      case Method::initial: return train_step_init_refiner();
      case Method::distill: return run_step(GradTarget::denoiser_step);
    }
    throw Error("trainer: unknown method");
  }

  StepStats train_step_autorefiner() {
    require(Method::pathwise);
    return run_step(GradTarget::refiner_step);
  }
  StepStats train_step_lora_baseline() {
    require(Method::lora);
    return run_step(GradTarget::denoiser_step);
  }
  StepStats train_step_init_refiner() {
    require(Method::initial);
    return run_step(GradTarget::initial_chain);
  }

  std::vector<StepStats> train(std::size_t steps, const std::function<void(const StepStats&)>& on_step = {}) {
    std::vector<StepStats> out;
    for (std::size_t i = 0; i < steps; ++i) {
      out.push_back(step());
      if (on_step) on_step(out.back());
    }
    return out;
  }

 private:
  std::size_t threads() const { return worker_count(cfg_.threads); }

  void require(Method m) const {
    if (cfg_.method != m)
      throw ConfigError(std::string("trainer: configured for ") + method_name(cfg_.method) + ", not " + method_name(m));
  }

  StepStats run_step(GradTarget target) {
    const std::size_t Ts = sched_.size(), B = cfg_.batch;
    Rng srng(stream_id(cfg_.seed, step_, 0, StreamRole::train));
    std::size_t s;
    if (cfg_.method == Method::pathwise && !cfg_.refined_steps.empty())
      s = cfg_.refined_steps[srng.below(cfg_.refined_steps.size())];
    else
      s = 1 + srng.below(Ts - 1);

    const auto m = models();
    const T w = static_cast<T>(cfg_.reg_weight);
    std::vector<std::vector<std::vector<T>>> grads(B);
    std::vector<std::vector<T>> xs(B);
    std::vector<Condition> conds(B);
    std::vector<double> loss(B), fid(B), rew(B), reg(B);
    std::vector<std::size_t> gcalls(B);
    std::vector<Counters> counters(B);

    parallel_for(B, threads(), [&](std::size_t b) {
      Rng crng(stream_id(cfg_.seed, step_, b, StreamRole::condition));
      conds[b] = sample_condition(*world_, crng);
      Tape<T> tape;
      GradPlan<T> plan{&tape, target, s, false};
      auto r = rollout_stochastic(m, sched_, conds[b], world_->n_chunks, world_->modes(),
                                  stream_id(cfg_.seed, step_, b, StreamRole::train, 1), &plan);
      auto X = concat_rows(r.chunk_outputs);
      DiffArray<T> f;
      if (cfg_.objective == Objective::dmd) {
        Rng drng(stream_id(cfg_.seed, step_, b, StreamRole::dmd));
        const T sigma = static_cast<T>(drng.uniform(cfg_.dmd.sigma_min, cfg_.dmd.sigma_max));
        const auto eps = drng.normals<T>(X.size());
        const auto& cond = conds[b];
        auto surrogate = dmd_surrogate_loss(
            X, sigma, eps,
            [&](const std::vector<T>& x, T sg) { return oracle_->noised_score(x, static_cast<double>(sg), cond.mode); },
            [&](const std::vector<T>& x, T sg) { return fake_->score(x, sg, cond); });
        f = scale(surrogate, T(-1));
      } else {
        f = reward(X, conds[b], cfg_.reward);
      }
      auto l = scale(refiner_loss(f, r.reg, w), T(1) / static_cast<T>(B));
      tape.backward(l);
      if (cfg_.method != Method::distill) detail::require_zero_grad(tape, *base_);
      for (auto* p : opt_->params()) grads[b].push_back(tape.param_grad(*p));
      xs[b] = X.to_vector();
      loss[b] = static_cast<double>(l.item()) * static_cast<double>(B);
      fid[b] = static_cast<double>(f.item());
      rew[b] = static_cast<double>(reward_value(xs[b], world_->d, conds[b], cfg_.reward));
      reg[b] = static_cast<double>(r.reg.item());
      gcalls[b] = r.grad_calls;
      counters[b] = r.counters;
    });

    StepStats st;
    st.step = step_;
    st.s = s;
    for (std::size_t b = 0; b < B; ++b) {
      if (gcalls[b] != world_->n_chunks)
        throw Error("trainer: expected one gradient-bearing call per chunk, got " + std::to_string(gcalls[b]));
      st.loss += loss[b] / B;
      st.fidelity += fid[b] / B;
      st.reward += rew[b] / B;
      st.reg += reg[b] / B;
      st.counters += counters[b];
    }
    st.grad_calls = gcalls[0];
    if (!std::isfinite(st.loss)) throw NumericError("trainer: non-finite loss");
    auto g = detail::sum_grads(grads);
    detail::check_finite(g, "trainer");
    opt_->step(g);

    if (fake_) {
      for (std::size_t k = 0; k < cfg_.fake.k_fake; ++k) {
        Rng frng(stream_id(cfg_.seed, step_, k, StreamRole::fake));
        st.fake_loss = static_cast<double>(fake_score_update(*fake_, *fake_opt_, xs, conds, frng, cfg_.dmd));
      }
    }
    ++step_;
    return st;
  }

  const DenoiserParams<T>* base_;
  const WorldSpec* world_;
  const WorldOracle* oracle_;
  NoiseSchedule sched_;
  TrainerConfig cfg_;
  std::size_t step_ = 0;
  std::unique_ptr<RefinerParams<T>> ref_params_;
  std::unique_ptr<LoraSet<T>> lora_;
  std::unique_ptr<DenoiserParams<T>> student_;
  std::unique_ptr<Denoiser<T>> gen_;
  std::unique_ptr<Refiner<T>> refiner_;
  std::unique_ptr<FakeScoreModel<T>> fake_;
  std::unique_ptr<AdamW<T>> opt_, fake_opt_;
};

// ---- base pretraining -------------------------------------------------------------

struct PretrainConfig {
  std::size_t fm_steps = 1500;
  std::size_t fm_batch = 16;
  double fm_lr = 2e-3;
  double fm_shift = 5.0;
  std::size_t distill_steps = 800;
  std::size_t distill_batch = 8;
  double distill_lr = 1e-4;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool operator==(const PretrainConfig&) const = default;
};

// Teacher-forced flow matching over a whole sequence: clean frames then noisy frames, one sigma per chunk.
// Clean chunk j sees clean chunks <= j; noisy chunk i sees clean chunks < i and itself.
template <class T>
DiffArray<T> flow_matching_loss(Tape<T>& tape, const Denoiser<T>& net, const std::vector<T>& x0,
                                const std::vector<T>& eps, const std::vector<T>& chunk_sigma, const Condition& cond,
                                std::size_t modes) {
  const auto& cfg = net.config();
  const std::size_t c = cfg.chunk_frames, d = cfg.frame_dim, nch = chunk_sigma.size(), F = nch * c;
  if (x0.size() != F * d || eps.size() != F * d) throw ShapeError("flow_matching_loss", {Shape{x0.size()}, Shape{F, d}});
  std::vector<T> xs(F * d), target(F * d), sig(2 * F, T(0));
  for (std::size_t f = 0; f < F; ++f) {
    const T s = chunk_sigma[f / c];
    sig[F + f] = s;
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t i = f * d + k;
      xs[i] = (T(1) - s) * x0[i] + s * eps[i];
      target[i] = x0[i] - eps[i];
    }
  }
  std::vector<std::int64_t> pos(2 * F);
  for (std::size_t f = 0; f < F; ++f) pos[f] = pos[F + f] = static_cast<std::int64_t>(f);
  const std::size_t N = 2 * F;
  std::vector<std::uint8_t> mask(N * N, 0);
  for (std::size_t a = 0; a < F; ++a) {
    const std::size_t ja = a / c;
    for (std::size_t b = 0; b < F; ++b) {
      const std::size_t jb = b / c;
      if (jb <= ja) mask[a * N + b] = 1;
      if (jb < ja) mask[(F + a) * N + b] = 1;
      if (jb == ja) mask[(F + a) * N + F + b] = 1;
    }
  }
  auto X = concat_rows<T>({tape.constant(Shape{F, d}, x0), tape.constant(Shape{F, d}, std::move(xs))});
  auto v = slice_rows(net.forward_sequence(tape, X, sig, pos, mask, cond.encode<T>(modes)), F, N);
  auto err = sub(v, tape.constant(Shape{F, d}, std::move(target)));
  return scale(sq_norm(err), T(1) / static_cast<T>(err.size()));
}

template <class T>
DenoiserParams<T> pretrain_flow_matching(const WorldSpec& world, const DenoiserConfig& cfg, const PretrainConfig& pc,
                                         const std::function<void(std::size_t, double)>& on_step = {}) {
  if (pc.fm_batch == 0) throw ConfigError("pretrain: batch must be positive");
  DenoiserParams<T> params = init_denoiser<T>(cfg, pc.seed);
  Denoiser<T> net(ModelView<T>{.base = &params, .base_trainable = true});
  AdamW<T> opt(collect_params<T>(params), AdamWConfig{pc.fm_lr});
  const std::size_t B = pc.fm_batch, threads = worker_count(pc.threads);
  for (std::size_t it = 0; it < pc.fm_steps; ++it) {
    std::vector<std::vector<std::vector<T>>> grads(B);
    std::vector<double> losses(B);
    parallel_for(B, threads, [&](std::size_t b) {
      Rng rng(stream_id(pc.seed, it, b, StreamRole::data));
      const auto cond = sample_condition(world, rng);
      const auto seq = sample_video<T>(world, cond, rng);
      std::vector<T> sig(world.n_chunks);
      for (auto& s : sig) s = static_cast<T>(shift_sigma(rng.uniform(), pc.fm_shift));
      const auto eps = rng.normals<T>(seq.frames.size());
      Tape<T> tape;
      auto l = flow_matching_loss(tape, net, seq.frames, eps, sig, cond, world.modes());
      tape.backward(scale(l, T(1) / static_cast<T>(B)));
      for (auto* p : opt.params()) grads[b].push_back(tape.param_grad(*p));
      losses[b] = static_cast<double>(l.item());
    });
    auto g = detail::sum_grads(grads);
    detail::check_finite(g, "pretrain");
    opt.step(g);
    double mean = 0;
    for (double l : losses) mean += l / B;
    if (on_step) on_step(it, mean);
  }
  return params;
}

// DMD self-distillation of the full base: gradient through the denoiser at the exit step.
template <class T>
DenoiserParams<T> self_distill(const DenoiserParams<T>& base, const WorldSpec& world, const WorldOracle& oracle,
                               const NoiseSchedule& sched, const PretrainConfig& pc, const FakeConfig& fc = {},
                               const std::function<void(const StepStats&)>& on_step = {}) {
  TrainerConfig tc;
  tc.method = Method::distill;
  tc.objective = Objective::dmd;
  tc.opt = AdamWConfig{pc.distill_lr};
  tc.batch = pc.distill_batch;
  tc.fake = fc;
  tc.seed = stream_id(pc.seed, 0, 0, StreamRole::train, 9);
  tc.threads = pc.threads;
  Trainer<T> tr(base, world, oracle, sched, tc);
  tr.train(pc.distill_steps, on_step);
  return *tr.student();
}

}  // namespace arfn
