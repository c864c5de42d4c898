#pragma once

// Experiment plumbing shared by the CLI and the acceptance suite.

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "arfn/harness/checkpoint.hpp"
#include "arfn/harness/config.hpp"
#include "arfn/harness/metrics.hpp"
#include "arfn/parallel.hpp"
#include "arfn/sampler.hpp"
#include "arfn/search.hpp"
#include "arfn/trainer.hpp"

namespace arfn {

using Real = double;

struct Experiment {
  RunConfig cfg;
  WorldSpec world;
  std::unique_ptr<WorldOracle> oracle;
  NoiseSchedule sched;
  DenoiserConfig dcfg;

  explicit Experiment(RunConfig c)
      : cfg(std::move(c)), world(make_world(cfg.world)), oracle(std::make_unique<WorldOracle>(world)),
        sched(cfg.schedule()), dcfg(cfg.denoiser()) {
    validate_config(cfg);
  }
  std::size_t threads() const { return worker_count(cfg.threads); }
};

class Stopwatch {
 public:
  double ms() const { return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// Conditions for evaluation: condition k is shared by all samples r of that condition, and by every
// method evaluated with the same seed, so method comparisons are paired.
inline Condition eval_condition(const Experiment& ex, std::uint64_t seed, std::size_t k) {
  Rng r(stream_id(seed, k, 0, StreamRole::eval));
  return sample_condition(ex.world, r);
}
inline std::uint64_t eval_noise_seed(std::uint64_t seed, std::size_t k, std::size_t r) {
  return stream_id(seed, k, r, StreamRole::eval, 1);
}

// conditions x per_condition sequences from a stochastic rollout, or from the ODE sampler when ode is set.
inline SampleFile sample_set(const Experiment& ex, const RolloutModels<Real>& m, std::size_t conditions,
                             std::size_t per_condition, std::uint64_t seed, bool ode = false,
                             std::string label = "") {
  SampleFile sf;
  sf.label = std::move(label);
  sf.seqs.resize(conditions * per_condition);
  std::vector<Counters> cs(sf.seqs.size());
  parallel_for(sf.seqs.size(), ex.threads(), [&](std::size_t i) {
    const std::size_t k = i / per_condition, r = i % per_condition;
    const auto cond = eval_condition(ex, seed, k);
    const auto ns = eval_noise_seed(seed, k, r);
    if (ode) {
      sf.seqs[i] = rollout_ode(*m.gen, ex.sched, cond, ex.world.n_chunks, ex.world.modes(), ns, &cs[i]);
    } else {
      auto res = rollout_stochastic(m, ex.sched, cond, ex.world.n_chunks, ex.world.modes(), ns);
      sf.seqs[i] = std::move(res.seq);
      cs[i] = res.counters;
    }
  });
  for (const auto& c : cs) sf.counters += c;
  return sf;
}

inline std::vector<double> logliks(const Experiment& ex, const SampleFile& sf) {
  std::vector<double> out(sf.seqs.size());
  parallel_for(out.size(), ex.threads(), [&](std::size_t i) { out[i] = ex.oracle->oracle_loglik(sf.seqs[i]); });
  return out;
}

inline MetricsRecord evaluate(const Experiment& ex, const SampleFile& sf) {
  return eval_metrics(sf.seqs, *ex.oracle, ex.cfg.reward, sf.counters, ex.cfg.dyn_interval);
}

inline RolloutModels<Real> base_models(const Denoiser<Real>& gen) {
  RolloutModels<Real> m;
  m.gen = &gen;
  return m;
}

inline MetricsRecord step_record(const StepStats& st, Objective o, double wall_ms) {
  MetricsRecord r;
  r.step = st.step;
  r.objective = objective_name(o);
  r.fidelity = st.fidelity;
  r.reward = st.reward;
  r.reg = st.reg;
  r.nfe = static_cast<double>(st.counters.nfe());
  r.verify_count = static_cast<double>(st.counters.verify);
  r.wall_ms = wall_ms;
  return r;
}

// Flow matching, then optional self-distillation. Values are rounded to checkpoint precision.
// curve receives one record per log_every distillation steps.
inline DenoiserParams<Real> build_base(const Experiment& ex, std::vector<MetricsRecord>* curve = nullptr,
                                       std::size_t log_every = 50,
                                       const std::function<void(const std::string&)>& log = {}) {
  const auto pc = ex.cfg.pretrain_config();
  Stopwatch sw;
  auto params = pretrain_flow_matching<Real>(ex.world, ex.dcfg, pc, [&](std::size_t it, double loss) {
    if (log && (it % 100 == 0 || it + 1 == pc.fm_steps))
      log("fm step " + std::to_string(it) + " loss " + fmt_num(loss));
  });
  if (pc.distill_steps > 0) {
    params = self_distill(params, ex.world, *ex.oracle, ex.sched, pc, ex.cfg.fake, [&](const StepStats& st) {
      if (st.step % log_every && st.step + 1 != pc.distill_steps) return;
      if (curve) curve->push_back(step_record(st, Objective::dmd, sw.ms()));
      if (log) log("distill step " + std::to_string(st.step) + " fidelity " + fmt_num(st.fidelity));
    });
  }
  round_to_stored(params);
  return params;
}

inline std::string checkpoint_name(Method m, Objective o) {
  return std::string(method_name(m)) + "_" + objective_name(o) + ".ckpt";
}

// ---- ablation grid -----------------------------------------------------------------

struct AblationCell {
  std::string label;
  std::vector<int> refined;  // raw timesteps, empty = all intermediate
  bool history = true;
  bool reflect = true;
  bool full() const { return refined.empty() && history && reflect; }
};

// Every non-empty subset of the intermediate timesteps with the full cache, and every cache form with
// all timesteps refined. The full configuration appears once, first.
inline std::vector<AblationCell> ablation_grid(const RunConfig& cfg) {
  std::vector<int> inter(cfg.steps.begin() + 1, cfg.steps.end());
  std::vector<AblationCell> out;
  out.push_back(AblationCell{"full", {}, true, true});
  const std::size_t n = inter.size();
  for (std::size_t mask = 1; mask + 1 < (std::size_t{1} << n); ++mask) {
    AblationCell c;
    c.label = "steps";
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (std::size_t{1} << i)) {
        c.refined.push_back(inter[i]);
        c.label += "_" + std::to_string(inter[i]);
      }
    out.push_back(c);
  }
  out.push_back(AblationCell{"cache_history_only", {}, true, false});
  out.push_back(AblationCell{"cache_reflect_only", {}, false, true});
  out.push_back(AblationCell{"cache_none", {}, false, false});
  return out;
}

}  // namespace arfn
