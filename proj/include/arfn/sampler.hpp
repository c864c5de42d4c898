#pragma once

// Autoregressive rollouts. Per chunk: denoise the initial noise at sigma = 1, then for j = T-1..1
// renoise the clean estimate with fresh (optionally refined) noise and denoise again.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "arfn/denoiser.hpp"
#include "arfn/refiner.hpp"
#include "arfn/rng.hpp"
#include "arfn/schedule.hpp"
#include "arfn/synthdata.hpp"

namespace arfn {

enum class RefineMode { none, pathwise, initial };

struct Counters {
  std::size_t denoiser_calls = 0;
  std::size_t refiner_calls = 0;
  std::size_t verify = 0;
  std::size_t nfe() const { return denoiser_calls + refiner_calls; }

  Counters& operator+=(const Counters& o) {
    denoiser_calls += o.denoiser_calls;
    refiner_calls += o.refiner_calls;
    verify += o.verify;
    return *this;
  }
  bool operator==(const Counters&) const = default;
};

template <class T>
struct NoiseRecord {
  std::size_t n_chunks = 0, steps = 0, chunk_elems = 0;
  std::vector<std::vector<T>> initial;            // [chunk]
  std::vector<std::vector<std::vector<T>>> path;  // [chunk][k], k = 0 is step j = T-1
  std::vector<std::uint64_t> initial_streams;
  std::vector<std::vector<std::uint64_t>> path_streams;

  bool complete(std::size_t chunks) const {
    if (initial.size() != chunks || path.size() != chunks) return false;
    for (const auto& p : path)
      if (p.size() + 1 != steps) return false;
    return true;
  }
};

template <class T>
struct RolloutModels {
  const Denoiser<T>* gen = nullptr;
  const Refiner<T>* refiner = nullptr;
  RefineMode mode = RefineMode::none;
  ContextFlags flags;
  std::vector<std::size_t> refined_steps;  // step indices j; empty = every intermediate step

  bool refines(std::size_t j) const {
    return mode == RefineMode::pathwise && refiner &&
           (refined_steps.empty() || std::find(refined_steps.begin(), refined_steps.end(), j) != refined_steps.end());
  }
};

enum class GradTarget { refiner_step, denoiser_step, initial_chain };

// Gradient-bearing rollout: stops every chunk at step s. Only the step-s computation is taped unless
// mask_other_steps is set, in which case every step is taped and refiner outputs at j != s are detached.
template <class T>
struct GradPlan {
  Tape<T>* tape = nullptr;
  GradTarget target = GradTarget::refiner_step;
  std::size_t s = 1;
  bool mask_other_steps = false;
};

template <class T>
struct RolloutResult {
  LatentSequence<T> seq;
  NoiseRecord<T> record;
  Counters counters;
  std::vector<DiffArray<T>> chunk_outputs;  // taped clean chunks when a plan is given
  DiffArray<T> reg;                         // taped 0.5 |delta|^2 over gradient-bearing refiner calls
  T reg_value = T(0);                       // 0.5 |delta|^2 over every refiner call
  std::size_t grad_calls = 0;               // network calls whose parameters receive gradient
};

namespace detail {

template <class T>
class NoiseSource {
 public:
  NoiseSource(std::uint64_t seed, std::size_t elems, std::uint64_t sub = 0) : seed_(seed), elems_(elems), sub_(sub) {}
  explicit NoiseSource(const NoiseRecord<T>* replay) : replay_(replay) {}

  std::vector<T> initial(std::size_t i, std::size_t T_steps, NoiseRecord<T>& log) {
    if (replay_) return replay_->initial.at(i);
    const auto id = stream_id(seed_, i, T_steps, StreamRole::initial_noise, sub_);
    Rng rng(id);
    auto v = rng.normals<T>(elems_);
    log.initial.push_back(v);
    log.initial_streams.push_back(id);
    log.path.emplace_back();
    log.path_streams.emplace_back();
    return v;
  }
  std::vector<T> path(std::size_t i, std::size_t j, std::size_t T_steps, NoiseRecord<T>& log) {
    if (replay_) return replay_->path.at(i).at(T_steps - 1 - j);
    const auto id = stream_id(seed_, i, j, StreamRole::path_noise, sub_);
    Rng rng(id);
    auto v = rng.normals<T>(elems_);
    log.path.back().push_back(v);
    log.path_streams.back().push_back(id);
    return v;
  }

 private:
  const NoiseRecord<T>* replay_ = nullptr;
  std::uint64_t seed_ = 0;
  std::size_t elems_ = 0;
  std::uint64_t sub_ = 0;
};

template <class T>
RolloutResult<T> rollout_engine(const RolloutModels<T>& m, const NoiseSchedule& sched, const Condition& cond,
                                std::size_t n_chunks, std::size_t modes, NoiseSource<T>& noise,
                                const GradPlan<T>* plan, std::size_t exit_s = 1) {
  if (!m.gen) throw Error("rollout: no generator");
  if (m.mode != RefineMode::none && !m.refiner) throw Error("rollout: refine mode without a refiner");
  const auto& cfg = m.gen->config();
  const std::size_t Ts = sched.size(), c = cfg.chunk_frames, d = cfg.frame_dim, ce = c * d;
  if (Ts == 0) throw ConfigError("rollout: empty schedule");
  if (cond.direction.size() != d || modes + d != cfg.cond_dim) throw ShapeError("rollout", {Shape{cond.direction.size()}, Shape{d}}, "condition/model width mismatch");
  if (plan && (plan->s < 1 || plan->s >= Ts)) throw Error("rollout: gradient step s outside 1..T-1");
  if (plan && !plan->tape) throw Error("rollout: gradient plan without a tape");
  if (exit_s < 1 || (Ts > 1 && exit_s >= Ts) || (Ts == 1 && exit_s != 1)) throw Error("rollout: exit step outside 1..T-1");

  const std::vector<T> cvec = cond.encode<T>(modes);
  const Shape cshape{c, d};
  const std::size_t exit_j = plan ? plan->s : exit_s;
  const bool chain = plan && plan->target == GradTarget::initial_chain;
  const bool masked = plan && plan->mask_other_steps;

  RolloutResult<T> res;
  res.seq.c = c;
  res.seq.d = d;
  res.seq.condition = cond;
  res.record.n_chunks = n_chunks;
  res.record.steps = Ts;
  res.record.chunk_elems = ce;

  KVCache<T> gcache;
  m.gen->begin(gcache, cvec);
  ReflectiveContext<T> rctx;
  if (m.refiner) {
    ContextFlags f = m.flags;
    if (m.mode == RefineMode::initial) f.reflect = false;
    m.refiner->begin(rctx, cvec, f);
  }
  DiffArray<T> reg;
  auto add_reg = [&](const DiffArray<T>& delta) {
    auto r = regularizer(delta);
    reg = reg.valid() ? add(reg, r) : r;
  };

  for (std::size_t i = 0; i < n_chunks; ++i) {
    const auto pos0 = static_cast<std::int64_t>(i * c);
    std::vector<T> x = noise.initial(i, Ts, res.record);
    std::vector<T> x0;
    DiffArray<T> x0_d;

    // first denoise at sigma = 1
    const T s1 = static_cast<T>(sched.sigma[0]);
    if (chain) {
      Tape<T>& tp = *plan->tape;
      auto xd = tp.constant(cshape, x);
      if (m.mode == RefineMode::initial) {
        auto delta = m.refiner->refine(tp, xd, s1, rctx, pos0, false);
        ++res.counters.refiner_calls;
        ++res.grad_calls;
        res.reg_value += regularizer(delta.to_vector());
        add_reg(delta);
        xd = add(xd, delta);
      }
      auto v = m.gen->forward(tp, xd, s1, gcache, pos0);
      x0_d = predict_clean(xd, v, s1);
      x0 = x0_d.to_vector();
    } else {
      if (m.mode == RefineMode::initial) {
        auto delta = m.refiner->refine_values(x, s1, rctx, pos0, false);
        ++res.counters.refiner_calls;
        res.reg_value += regularizer(delta);
        for (std::size_t k = 0; k < ce; ++k) x[k] += delta[k];
      }
      if (masked) {
        Tape<T>& tp = *plan->tape;
        auto xd = tp.constant(cshape, x);
        x0_d = predict_clean(xd, m.gen->forward(tp, xd, s1, gcache, pos0), s1);
        x0 = x0_d.to_vector();
      } else {
        x0 = predict_clean(x, m.gen->forward_values(x, s1, gcache, pos0), s1);
      }
    }
    ++res.counters.denoiser_calls;

    for (std::size_t j = Ts - 1; j >= exit_j && j >= 1; --j) {
      const T sg = static_cast<T>(sched.sigma_at(j));
      std::vector<T> eps = noise.path(i, j, Ts, res.record);
      const bool refine_here = m.refines(j);
      const bool grad_here = plan && j == plan->s;
      const bool taped = plan && (grad_here || chain || masked);
      if (refine_here) m.refiner->set_reflect(rctx, x0, pos0);

      if (!taped) {
        if (refine_here) {
          auto delta = m.refiner->refine_values(eps, sg, rctx, pos0, m.flags.reflect);
          ++res.counters.refiner_calls;
          res.reg_value += regularizer(delta);
          for (std::size_t k = 0; k < ce; ++k) eps[k] += delta[k];
        }
        auto xs = forward_diffuse(x0, eps, sg);
        x0 = predict_clean(xs, m.gen->forward_values(xs, sg, gcache, pos0), sg);
      } else {
        Tape<T>& tp = *plan->tape;
        auto eps_d = tp.constant(cshape, eps);
        if (refine_here) {
          const bool grad_refiner = plan->target == GradTarget::refiner_step && (grad_here || masked);
          DiffArray<T> delta;
          if (grad_refiner) {
            delta = m.refiner->refine(tp, eps_d, sg, rctx, pos0, m.flags.reflect);
            if (!grad_here)
              delta = detach(delta);
            else
              ++res.grad_calls;
          } else {
            delta = tp.constant(cshape, m.refiner->refine_values(eps, sg, rctx, pos0, m.flags.reflect));
          }
          ++res.counters.refiner_calls;
          res.reg_value += regularizer(delta.to_vector());
          if (grad_here && plan->target == GradTarget::refiner_step) add_reg(delta);
          eps_d = add(eps_d, delta);
        }
        auto x0_in = (chain || masked) ? x0_d : tp.constant(cshape, x0);
        auto xs = forward_diffuse(x0_in, eps_d, sg);
        x0_d = predict_clean(xs, m.gen->forward(tp, xs, sg, gcache, pos0), sg);
        x0 = x0_d.to_vector();
        if (grad_here && plan->target == GradTarget::denoiser_step) ++res.grad_calls;
      }
      ++res.counters.denoiser_calls;
      if (j == 1) break;
    }

    res.seq.frames.insert(res.seq.frames.end(), x0.begin(), x0.end());
    if (plan) res.chunk_outputs.push_back(x0_d);
    m.gen->append_history(gcache, x0, pos0);
    if (m.refiner) m.refiner->append_history(rctx, x0, pos0);
  }
  res.reg = reg.valid() ? reg : (plan ? plan->tape->scalar_constant(T(0)) : DiffArray<T>());
  return res;
}

}  // namespace detail

template <class T>
RolloutResult<T> rollout_stochastic(const RolloutModels<T>& m, const NoiseSchedule& sched, const Condition& cond,
                                    std::size_t n_chunks, std::size_t modes, std::uint64_t seed,
                                    const GradPlan<T>* plan = nullptr, std::uint64_t sub = 0,
                                    std::size_t exit_s = 1) {
  detail::NoiseSource<T> src(seed, m.gen->config().chunk_frames * m.gen->config().frame_dim, sub);
  auto r = detail::rollout_engine(m, sched, cond, n_chunks, modes, src, plan, exit_s);
  r.seq.provenance = seed;
  return r;
}

// Pure replay of logged noises (F_theta); refinement, if configured, is re-applied.
template <class T>
LatentSequence<T> deterministic_mapping(const RolloutModels<T>& m, const NoiseSchedule& sched,
                                        const NoiseRecord<T>& record, const Condition& cond, std::size_t modes) {
  if (!record.complete(record.n_chunks) || record.steps != sched.size() || record.n_chunks == 0)
    throw Error("deterministic_mapping: incomplete noise record");
  detail::NoiseSource<T> src(&record);
  return detail::rollout_engine<T>(m, sched, cond, record.n_chunks, modes, src, nullptr).seq;
}

// Euler steps in sigma down to 0: x <- x + (sigma_k - sigma_next) v.
template <class T, class VelocityFn>
std::vector<T> ode_integrate(std::vector<T> x, const std::vector<double>& sigmas, VelocityFn&& velocity) {
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    const T s = static_cast<T>(sigmas[k]);
    const T next = k + 1 < sigmas.size() ? static_cast<T>(sigmas[k + 1]) : T(0);
    const std::vector<T> v = velocity(x, s);
    for (std::size_t e = 0; e < x.size(); ++e) x[e] += (s - next) * v[e];
  }
  return x;
}

template <class T>
LatentSequence<T> rollout_ode(const Denoiser<T>& gen, const NoiseSchedule& sched, const Condition& cond,
                              std::size_t n_chunks, std::size_t modes, std::uint64_t seed, Counters* counters = nullptr) {
  const auto& cfg = gen.config();
  const std::size_t c = cfg.chunk_frames, d = cfg.frame_dim;
  if (sched.size() == 0) throw ConfigError("rollout_ode: empty schedule");
  LatentSequence<T> seq;
  seq.c = c;
  seq.d = d;
  seq.condition = cond;
  seq.provenance = seed;
  KVCache<T> cache;
  gen.begin(cache, cond.encode<T>(modes));
  for (std::size_t i = 0; i < n_chunks; ++i) {
    const auto pos0 = static_cast<std::int64_t>(i * c);
    Rng rng(stream_id(seed, i, sched.size(), StreamRole::initial_noise));
    auto x = ode_integrate(rng.normals<T>(c * d), sched.sigma, [&](const std::vector<T>& xs, T s) {
      if (counters) ++counters->denoiser_calls;
      return gen.forward_values(xs, s, cache, pos0);
    });
    seq.frames.insert(seq.frames.end(), x.begin(), x.end());
    gen.append_history(cache, x, pos0);
  }
  return seq;
}

}  // namespace arfn
