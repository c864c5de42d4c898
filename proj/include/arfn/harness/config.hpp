#pragma once

// Run configuration: sectioned key = value text. Every field has a default, unknown sections and keys
// are rejected, and doubles are written in shortest round-trip form so parse(serialize(c)) == c.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "arfn/denoiser.hpp"
#include "arfn/errors.hpp"
#include "arfn/objectives.hpp"
#include "arfn/schedule.hpp"
#include "arfn/synthdata.hpp"
#include "arfn/trainer.hpp"

namespace arfn {

enum class Baseline { none, lora, init_refiner };
enum class SamplerKind { stochastic, ode };
enum class OutputFormat { csv, jsonl };

inline Method baseline_method(Baseline b) {
  if (b == Baseline::lora) return Method::lora;
  if (b == Baseline::init_refiner) return Method::initial;
  return Method::pathwise;
}

struct RunConfig {
  WorldParams world;
  DenoiserConfig model;
  std::vector<int> steps{1000, 750, 500, 250};
  double shift = 5.0;
  int t_max = 1000;

  Objective objective = Objective::dmd;
  double reg_weight = 0.0;
  RewardWeights reward;
  DmdNoise dmd;
  FakeConfig fake;

  AdamWConfig optim{1e-3};
  std::size_t batch = 8;
  std::size_t train_steps = 1000;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;

  PretrainConfig pretrain;
  double loglik_floor = -400.0;

  std::uint64_t seed = 0;
  Baseline baseline = Baseline::none;
  SamplerKind sampler = SamplerKind::stochastic;
  OutputFormat format = OutputFormat::csv;
  std::size_t threads = 0;

  std::vector<int> refined_steps;  // raw timesteps; empty = every intermediate step
  bool history = true;
  bool reflect = true;
  std::size_t ablate_steps = 1000;

  std::size_t eval_conditions = 50;
  std::size_t samples_per_condition = 2;
  std::size_t dyn_interval = 1;
  std::uint64_t eval_seed = 123;

  std::size_t search_n = 5;
  std::size_t search_k = 5;

  bool operator==(const RunConfig&) const = default;

  NoiseSchedule schedule() const { return from_raw_steps(steps, shift, t_max); }

  DenoiserConfig denoiser() const {
    DenoiserConfig c = model;
    c.frame_dim = world.d;
    c.chunk_frames = world.c;
    c.cond_dim = world.modes + world.d;
    return c;
  }

  // Step indices of the refined raw timesteps.
  std::vector<std::size_t> refined_indices() const {
    const auto s = schedule();
    std::vector<std::size_t> out;
    for (int r : refined_steps) {
      const std::size_t j = s.index_of_raw(r);
      if (j < 1 || j >= s.size()) throw ConfigError("refined_steps: " + std::to_string(r) + " is not an intermediate step");
      out.push_back(j);
    }
    return out;
  }

  TrainerConfig trainer(Method m) const {
    TrainerConfig t;
    t.method = m;
    t.objective = objective;
    t.opt = optim;
    t.batch = batch;
    t.reg_weight = reg_weight;
    t.reward = reward;
    t.dmd = dmd;
    t.fake = fake;
    t.lora_rank = lora_rank;
    t.lora_alpha = lora_alpha;
    t.flags = ContextFlags{history, reflect};
    if (m == Method::pathwise) t.refined_steps = refined_indices();
    t.seed = seed;
    t.threads = threads;
    return t;
  }

  PretrainConfig pretrain_config() const {
    PretrainConfig p = pretrain;
    p.seed = seed;
    p.threads = threads;
    return p;
  }
};

// ---- value codecs ------------------------------------------------------------------

namespace cfgio {

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(Objective v) { return objective_name(v); }
inline std::string fmt(Baseline v) { return v == Baseline::none ? "none" : v == Baseline::lora ? "lora" : "init-refiner"; }
inline std::string fmt(SamplerKind v) { return v == SamplerKind::ode ? "ode" : "stochastic"; }
inline std::string fmt(OutputFormat v) { return v == OutputFormat::jsonl ? "jsonl" : "csv"; }
inline std::string fmt(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <class N>
void parse_number(const std::string& s, N& out, const std::string& key) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto r = std::from_chars(b, e, out);
  if (r.ec != std::errc() || r.ptr != e) throw ConfigError("config: bad value for " + key + ": '" + s + "'");
}

inline void parse(const std::string& s, double& v, const std::string& k) { parse_number(s, v, k); }
inline void parse(const std::string& s, std::size_t& v, const std::string& k) { parse_number(s, v, k); }
inline void parse(const std::string& s, int& v, const std::string& k) { parse_number(s, v, k); }
inline void parse(const std::string& s, bool& v, const std::string& k) {
  if (s == "true" || s == "1")
    v = true;
  else if (s == "false" || s == "0")
    v = false;
  else
    throw ConfigError("config: bad boolean for " + k + ": '" + s + "'");
}
inline void parse(const std::string& s, Objective& v, const std::string&) { v = parse_objective(s); }
inline void parse(const std::string& s, Baseline& v, const std::string& k) {
  if (s == "none")
    v = Baseline::none;
  else if (s == "lora")
    v = Baseline::lora;
  else if (s == "init-refiner")
    v = Baseline::init_refiner;
  else
    throw ConfigError("config: " + k + " must be none, lora or init-refiner");
}
inline void parse(const std::string& s, SamplerKind& v, const std::string& k) {
  if (s == "stochastic")
    v = SamplerKind::stochastic;
  else if (s == "ode")
    v = SamplerKind::ode;
  else
    throw ConfigError("config: " + k + " must be stochastic or ode");
}
inline void parse(const std::string& s, OutputFormat& v, const std::string& k) {
  if (s == "csv")
    v = OutputFormat::csv;
  else if (s == "jsonl")
    v = OutputFormat::jsonl;
  else
    throw ConfigError("config: " + k + " must be csv or jsonl");
}
inline void parse(const std::string& s, std::vector<int>& v, const std::string& k) {
  v.clear();
  if (s.empty()) return;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int x = 0;
    parse_number(item, x, k);
    v.push_back(x);
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace cfgio

// Calls f(section, key, field&) for every field in file order.
template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("world", "frame_dim", c.world.d);
  f("world", "chunk_frames", c.world.c);
  f("world", "n_chunks", c.world.n_chunks);
  f("world", "modes", c.world.modes);
  f("world", "rho", c.world.rho);
  f("world", "process_noise", c.world.q);
  f("world", "initial_scale", c.world.p0);
  f("world", "drift_norm", c.world.drift_norm);
  f("world", "seed", c.world.seed);

  f("model", "layers", c.model.layers);
  f("model", "heads", c.model.heads);
  f("model", "width", c.model.width);
  f("model", "mlp_mult", c.model.mlp_mult);
  f("model", "time_dim", c.model.time_dim);
  f("model", "max_frames", c.model.max_frames);
  f("model", "rope_base", c.model.rope_base);
  f("model", "norm_eps", c.model.norm_eps);

  f("schedule", "steps", c.steps);
  f("schedule", "shift", c.shift);
  f("schedule", "t_max", c.t_max);

  f("objective", "mode", c.objective);
  f("objective", "reg_weight", c.reg_weight);
  f("objective", "reward_align", c.reward.align);
  f("objective", "reward_smooth", c.reward.smooth);
  f("objective", "reward_magnitude", c.reward.magnitude);
  f("objective", "smooth_scale", c.reward.smooth_scale);
  f("objective", "magnitude_scale", c.reward.magnitude_scale);
  f("objective", "dmd_sigma_min", c.dmd.sigma_min);
  f("objective", "dmd_sigma_max", c.dmd.sigma_max);
  f("objective", "fake_updates", c.fake.k_fake);
  f("objective", "fake_warmup", c.fake.warmup);
  f("objective", "fake_batch", c.fake.batch);
  f("objective", "fake_pool_rounds", c.fake.pool_rounds);
  f("objective", "fake_pool_batch", c.fake.pool_batch);
  f("objective", "fake_lr", c.fake.opt.lr);

  f("optim", "lr", c.optim.lr);
  f("optim", "beta1", c.optim.beta1);
  f("optim", "beta2", c.optim.beta2);
  f("optim", "eps", c.optim.eps);
  f("optim", "weight_decay", c.optim.weight_decay);
  f("optim", "batch", c.batch);
  f("optim", "steps", c.train_steps);
  f("optim", "lora_rank", c.lora_rank);
  f("optim", "lora_alpha", c.lora_alpha);

  f("pretrain", "fm_steps", c.pretrain.fm_steps);
  f("pretrain", "fm_batch", c.pretrain.fm_batch);
  f("pretrain", "fm_lr", c.pretrain.fm_lr);
  f("pretrain", "fm_shift", c.pretrain.fm_shift);
  f("pretrain", "distill_steps", c.pretrain.distill_steps);
  f("pretrain", "distill_batch", c.pretrain.distill_batch);
  f("pretrain", "distill_lr", c.pretrain.distill_lr);
  f("pretrain", "loglik_floor", c.loglik_floor);

  f("run", "seed", c.seed);
  f("run", "baseline", c.baseline);
  f("run", "sampler", c.sampler);
  f("run", "format", c.format);
  f("run", "threads", c.threads);

  f("ablation", "refined_steps", c.refined_steps);
  f("ablation", "history", c.history);
  f("ablation", "reflect", c.reflect);
  f("ablation", "steps", c.ablate_steps);

  f("eval", "conditions", c.eval_conditions);
  f("eval", "samples_per_condition", c.samples_per_condition);
  f("eval", "dyn_interval", c.dyn_interval);
  f("eval", "seed", c.eval_seed);

  f("search", "n", c.search_n);
  f("search", "k", c.search_k);
}

inline void validate_config(const RunConfig& c) {
  if (!c.world.d || !c.world.c || !c.world.n_chunks || !c.world.modes) throw ConfigError("config: world extents must be positive");
  if (!(c.world.rho >= 0.0 && c.world.rho < 1.0)) throw ConfigError("config: world.rho must lie in [0,1)");
  if (!(c.world.q > 0.0 && c.world.p0 > 0.0)) throw ConfigError("config: world noise scales must be positive");
  c.denoiser().validate();
  if (c.world.c * c.world.n_chunks > c.model.max_frames) throw ConfigError("config: sequence longer than model.max_frames");
  if (c.schedule().size() < 2) throw ConfigError("config: schedule needs at least two steps");
  c.refined_indices();
  c.dmd.validate();
  if (c.reg_weight < 0.0) throw ConfigError("config: objective.reg_weight must be non-negative");
  if (c.reward.align < 0 || c.reward.smooth < 0 || c.reward.magnitude < 0 || !(c.reward.smooth_scale > 0) ||
      !(c.reward.magnitude_scale > 0))
    throw ConfigError("config: reward weights must be non-negative and scales positive");
  if (!(c.optim.lr > 0.0) || !(c.fake.opt.lr > 0.0) || !(c.pretrain.fm_lr > 0.0) || !(c.pretrain.distill_lr > 0.0))
    throw ConfigError("config: learning rates must be positive");
  if (!c.batch || !c.fake.batch || !c.pretrain.fm_batch || !c.pretrain.distill_batch)
    throw ConfigError("config: batch sizes must be positive");
  if (!c.lora_rank) throw ConfigError("config: optim.lora_rank must be positive");
  if (c.samples_per_condition < 2) throw ConfigError("config: eval.samples_per_condition must be at least 2");
  if (!c.eval_conditions || !c.dyn_interval) throw ConfigError("config: eval.conditions and eval.dyn_interval must be positive");
  if (!c.search_n || !c.search_k) throw ConfigError("config: search.n and search.k must be at least 1");
}

inline std::string serialize_config(const RunConfig& c) {
  std::string out, section;
  visit_fields(c, [&](const char* sec, const char* key, const auto& v) {
    if (section != sec) {
      out += (section.empty() ? "[" : "\n[") + std::string(sec) + "]\n";
      section = sec;
    }
    out += std::string(key) + " = " + cfgio::fmt(v) + "\n";
  });
  return out;
}

// Missing keys keep their defaults.
inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = cfgio::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: line " + std::to_string(lineno) + ": unterminated section");
      section = cfgio::trim(line.substr(1, line.size() - 2));
      bool known = false;
      visit_fields(c, [&](const char* sec, const char*, auto&) { known = known || section == sec; });
      if (!known) throw ConfigError("config: unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config: line " + std::to_string(lineno) + ": key outside a section");
    const std::string key = cfgio::trim(line.substr(0, eq)), value = cfgio::trim(line.substr(eq + 1));
    bool found = false;
    visit_fields(c, [&](const char* sec, const char* k, auto& field) {
      if (found || section != sec || key != k) return;
      cfgio::parse(value, field, section + "." + key);
      found = true;
    });
    if (!found) throw ConfigError("config: unknown key " + section + "." + key);
  }
  validate_config(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace arfn
