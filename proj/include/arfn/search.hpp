#pragma once

// Inference-time search over noises with the frozen base: Best-of-N over whole chunks and greedy
// search over per-step candidates. Candidate c draws its noises from sub-stream c, so candidate 0
// reproduces the plain stochastic rollout with the same seed.

#include <functional>
#include <vector>

#include "arfn/denoiser.hpp"
#include "arfn/parallel.hpp"
#include "arfn/rng.hpp"
#include "arfn/sampler.hpp"
#include "arfn/schedule.hpp"
#include "arfn/synthdata.hpp"

namespace arfn {

// Scores a partial sequence (history frames followed by the candidate chunk).
template <class T>
using RewardFn = std::function<T(const std::vector<T>& frames, const Condition& cond)>;

template <class T>
RewardFn<T> latent_reward(std::size_t d, RewardWeights w = {}) {
  return [d, w](const std::vector<T>& frames, const Condition& cond) { return reward_value(frames, d, cond, w); };
}

struct SearchDecision {
  std::size_t chunk = 0;
  std::size_t step = 0;  // step index j; T for the initial step
  std::vector<double> scores;
  std::size_t chosen = 0;
};

template <class T>
struct SearchResult {
  LatentSequence<T> seq;
  Counters counters;
  std::size_t extra_nfe = 0;  // calls beyond one plain rollout
  std::vector<SearchDecision> decisions;
};

namespace detail {

inline std::size_t argmax_first(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <class T>
std::vector<T> with_history(const std::vector<T>& history, const std::vector<T>& chunk) {
  std::vector<T> f(history);
  f.insert(f.end(), chunk.begin(), chunk.end());
  return f;
}

template <class T>
LatentSequence<T> start_sequence(const DenoiserConfig& cfg, const Condition& cond, std::uint64_t seed) {
  LatentSequence<T> seq;
  seq.c = cfg.chunk_frames;
  seq.d = cfg.frame_dim;
  seq.condition = cond;
  seq.provenance = seed;
  return seq;
}

}  // namespace detail

template <class T>
SearchResult<T> best_of_n(const Denoiser<T>& gen, const NoiseSchedule& sched, const Condition& cond, std::size_t n,
                          const RewardFn<T>& reward_fn, std::size_t n_chunks, std::size_t modes, std::uint64_t seed,
                          std::size_t threads = 1) {
  if (n == 0) throw ConfigError("best_of_n: n must be at least 1");
  const auto& cfg = gen.config();
  const std::size_t Ts = sched.size(), ce = cfg.chunk_frames * cfg.frame_dim;
  if (Ts == 0) throw ConfigError("best_of_n: empty schedule");
  SearchResult<T> res;
  res.seq = detail::start_sequence<T>(cfg, cond, seed);
  KVCache<T> cache;
  gen.begin(cache, cond.encode<T>(modes));
  for (std::size_t i = 0; i < n_chunks; ++i) {
    const auto pos0 = static_cast<std::int64_t>(i * cfg.chunk_frames);
    std::vector<std::vector<T>> cand(n);
    std::vector<double> scores(n);
    parallel_for(n, worker_count(threads), [&](std::size_t c) {
      Rng r0(stream_id(seed, i, Ts, StreamRole::initial_noise, c));
      auto x = r0.normals<T>(ce);
      const T s1 = static_cast<T>(sched.sigma[0]);
      auto x0 = predict_clean(x, gen.forward_values(x, s1, cache, pos0), s1);
      for (std::size_t j = Ts - 1; j >= 1; --j) {
        const T sg = static_cast<T>(sched.sigma_at(j));
        Rng rj(stream_id(seed, i, j, StreamRole::path_noise, c));
        auto xs = forward_diffuse(x0, rj.normals<T>(ce), sg);
        x0 = predict_clean(xs, gen.forward_values(xs, sg, cache, pos0), sg);
      }
      scores[c] = static_cast<double>(reward_fn(detail::with_history(res.seq.frames, x0), cond));
      cand[c] = std::move(x0);
    });
    const std::size_t best = detail::argmax_first(scores);
    res.decisions.push_back(SearchDecision{i, Ts, scores, best});
    res.counters.denoiser_calls += n * Ts;
    res.counters.verify += n;
    res.extra_nfe += (n - 1) * Ts;
    res.seq.frames.insert(res.seq.frames.end(), cand[best].begin(), cand[best].end());
    gen.append_history(cache, cand[best], pos0);
  }
  return res;
}

template <class T>
SearchResult<T> search_over_path(const Denoiser<T>& gen, const NoiseSchedule& sched, const Condition& cond,
                                 std::size_t k, const RewardFn<T>& reward_fn, std::size_t n_chunks, std::size_t modes,
                                 std::uint64_t seed, std::size_t threads = 1) {
  if (k == 0) throw ConfigError("search_over_path: k must be at least 1");
  const auto& cfg = gen.config();
  const std::size_t Ts = sched.size(), ce = cfg.chunk_frames * cfg.frame_dim;
  if (Ts == 0) throw ConfigError("search_over_path: empty schedule");
  SearchResult<T> res;
  res.seq = detail::start_sequence<T>(cfg, cond, seed);
  KVCache<T> cache;
  gen.begin(cache, cond.encode<T>(modes));
  const std::size_t nt = worker_count(threads);
  for (std::size_t i = 0; i < n_chunks; ++i) {
    const auto pos0 = static_cast<std::int64_t>(i * cfg.chunk_frames);
    std::vector<T> x0;
    // step == Ts is the initial denoise from pure noise
    for (std::size_t j = Ts; j >= 1; --j) {
      const T sg = static_cast<T>(sched.sigma_at(j));
      std::vector<std::vector<T>> cand(k);
      std::vector<double> scores(k);
      parallel_for(k, nt, [&](std::size_t c) {
        std::vector<T> xs;
        if (j == Ts) {
          Rng r0(stream_id(seed, i, Ts, StreamRole::initial_noise, c));
          xs = r0.normals<T>(ce);
        } else {
          Rng rj(stream_id(seed, i, j, StreamRole::path_noise, c));
          xs = forward_diffuse(x0, rj.normals<T>(ce), sg);
        }
        cand[c] = predict_clean(xs, gen.forward_values(xs, sg, cache, pos0), sg);
        scores[c] = static_cast<double>(reward_fn(detail::with_history(res.seq.frames, cand[c]), cond));
      });
      const std::size_t best = detail::argmax_first(scores);
      res.decisions.push_back(SearchDecision{i, j, scores, best});
      res.counters.denoiser_calls += k;
      res.counters.verify += k;
      res.extra_nfe += k - 1;
      x0 = std::move(cand[best]);
    }
    res.seq.frames.insert(res.seq.frames.end(), x0.begin(), x0.end());
    gen.append_history(cache, x0, pos0);
  }
  return res;
}

}  // namespace arfn
