#pragma once

// arfn command line. Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
// 3 numeric failure (non-finite values).

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "arfn/harness/pipeline.hpp"
#include "arfn/harness/selfcheck.hpp"

namespace arfn {

namespace fs = std::filesystem;

struct CliOptions {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::optional<std::string> objective, baseline, sampler, format, history, reflect, model;
  std::optional<std::size_t> steps, threads;
  std::optional<std::vector<int>> refined_steps;
  std::string samples;
};

// Base plus whichever trained component is loaded; owns everything its views point at.
struct LoadedModels {
  std::string label = "base";
  std::unique_ptr<DenoiserParams<Real>> base;
  std::unique_ptr<RefinerParams<Real>> refiner_params;
  std::unique_ptr<LoraSet<Real>> lora;
  std::unique_ptr<Denoiser<Real>> gen;
  std::unique_ptr<Refiner<Real>> refiner;
  RolloutModels<Real> models;
};

namespace cli {

inline std::string ext(const RunConfig& c) { return c.format == OutputFormat::jsonl ? ".jsonl" : ".csv"; }

inline MetricsWriter writer(const RunConfig& c, const fs::path& out, const std::string& stem) {
  return MetricsWriter((out / (stem + ext(c))).string(), c.format == OutputFormat::jsonl);
}

inline void apply_overrides(RunConfig& c, const CliOptions& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.objective) {
    cfgio::parse(*o.objective, c.objective, "--objective");
  }
  if (o.baseline) cfgio::parse(*o.baseline, c.baseline, "--baseline");
  if (o.sampler) cfgio::parse(*o.sampler, c.sampler, "--sampler");
  if (o.format) cfgio::parse(*o.format, c.format, "--format");
  if (o.history) cfgio::parse(*o.history, c.history, "--history");
  if (o.reflect) cfgio::parse(*o.reflect, c.reflect, "--reflect");
  if (o.threads) c.threads = *o.threads;
  if (o.refined_steps) c.refined_steps = *o.refined_steps;
  if (o.steps) {
    if (o.command == "pretrain-base")
      c.pretrain.fm_steps = *o.steps;
    else if (o.command == "ablate")
      c.ablate_steps = *o.steps;
    else
      c.train_steps = *o.steps;
  }
  validate_config(c);
}

inline fs::path base_path(const fs::path& out) { return out / "base.ckpt"; }

inline std::unique_ptr<LoadedModels> load_models(const Experiment& ex, const fs::path& out, bool trained) {
  auto lm = std::make_unique<LoadedModels>();
  if (!fs::exists(base_path(out))) throw Error("no base checkpoint in " + out.string() + "; run pretrain-base first");
  lm->base = std::make_unique<DenoiserParams<Real>>(init_denoiser<Real>(ex.dcfg, 0));
  load_checkpoint(base_path(out).string(), *lm->base);
  const Method m = baseline_method(ex.cfg.baseline);
  if (!trained) {
    lm->gen = std::make_unique<Denoiser<Real>>(ModelView<Real>{.base = lm->base.get()});
    lm->models = base_models(*lm->gen);
    return lm;
  }
  const auto ck = out / checkpoint_name(m, ex.cfg.objective);
  if (!fs::exists(ck)) throw Error("no trained checkpoint " + ck.string() + "; run train-refiner first");
  lm->label = std::string(method_name(m)) + "_" + objective_name(ex.cfg.objective);
  if (m == Method::lora) {
    lm->lora = std::make_unique<LoraSet<Real>>(make_lora(*lm->base, ex.cfg.lora_rank, ex.cfg.lora_alpha, 0));
    load_checkpoint(ck.string(), *lm->lora);
    lm->gen = std::make_unique<Denoiser<Real>>(ModelView<Real>{.base = lm->base.get(), .lora = lm->lora.get()});
    lm->models = base_models(*lm->gen);
    return lm;
  }
  lm->refiner_params =
      std::make_unique<RefinerParams<Real>>(init_refiner(*lm->base, ex.cfg.lora_rank, ex.cfg.lora_alpha, 0));
  load_checkpoint(ck.string(), *lm->refiner_params);
  lm->gen = std::make_unique<Denoiser<Real>>(ModelView<Real>{.base = lm->base.get()});
  lm->refiner = std::make_unique<Refiner<Real>>(*lm->base, *lm->refiner_params, false);
  const auto tc = ex.cfg.trainer(m);
  lm->models = RolloutModels<Real>{lm->gen.get(), lm->refiner.get(), refine_mode(m), tc.flags, tc.refined_steps};
  return lm;
}

inline std::uint64_t sample_seed(const RunConfig& c) { return stream_id(c.eval_seed, c.seed, 0, StreamRole::eval, 5); }

inline fs::path samples_path(const fs::path& out, const std::string& label) { return out / ("samples_" + label + ".jsonl"); }

// Evaluates every sample file under out (or the given one) and refreshes the comparison plots.
inline int eval_files(const Experiment& ex, const fs::path& out, const std::string& only, std::ostream& os) {
  std::vector<fs::path> files;
  if (!only.empty()) {
    files.push_back(only);
  } else {
    for (const auto& e : fs::directory_iterator(out)) {
      const auto n = e.path().filename().string();
      if (n.rfind("samples_", 0) == 0 && e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw Error("eval: no sample files in " + out.string());
  PlotSet ps;
  for (const auto& f : files) {
    const auto sf = load_samples(f.string());
    auto rec = evaluate(ex, sf);
    rec.objective = objective_name(ex.cfg.objective);
    writer(ex.cfg, out, "metrics_eval_" + sf.label).append(rec);
    os << sf.label << ": loglik " << fmt_num(rec.fidelity) << " reward " << fmt_num(rec.reward) << " diversity "
       << fmt_num(rec.diversity) << " dynamic " << fmt_num(rec.dynamic_degree) << " nfe " << fmt_num(rec.nfe)
       << " verify " << fmt_num(rec.verify_count) << "\n";
    if (sf.label == "ode" || sf.label == "base") ps.samplers.push_back({sf.label == "ode" ? "ode" : "stochastic", rec});
    if (sf.label != "ode") ps.methods.push_back({sf.label, rec});
  }
  if (ps.samplers.size() == 1) ps.samplers.clear();
  emit_plots(ps, (out / "plots").string());
  return 0;
}

inline int cmd_pretrain(const Experiment& ex, const fs::path& out, std::ostream& os) {
  std::vector<MetricsRecord> curve;
  Stopwatch sw;
  auto base = build_base(ex, &curve, 50, [&](const std::string& s) { os << s << "\n" << std::flush; });
  save_checkpoint(base_path(out).string(), base);
  Denoiser<Real> g(ModelView<Real>{.base = &base});
  auto sf = sample_set(ex, base_models(g), ex.cfg.eval_conditions, ex.cfg.samples_per_condition, sample_seed(ex.cfg), false, "base");
  auto rec = evaluate(ex, sf);
  rec.step = ex.cfg.pretrain.fm_steps + ex.cfg.pretrain.distill_steps;
  rec.objective = "base";
  rec.wall_ms = sw.ms();
  const auto w = writer(ex.cfg, out, "metrics_pretrain");
  for (const auto& r : curve) w.append(r);
  w.append(rec);
  if (!curve.empty()) emit_plots(PlotSet{curve, {}, {}}, (out / "plots").string());
  os << "base loglik " << fmt_num(rec.fidelity) << " (floor " << fmt_num(ex.cfg.loglik_floor) << ")\n";
  if (!(rec.fidelity > ex.cfg.loglik_floor)) {
    os << "base model below the configured log-likelihood floor\n";
    return 1;
  }
  return 0;
}

inline int cmd_train(const Experiment& ex, const fs::path& out, std::ostream& os) {
  auto lm = load_models(ex, out, false);
  const Method m = baseline_method(ex.cfg.baseline);
  const std::string tag = std::string(method_name(m)) + "_" + objective_name(ex.cfg.objective);
  Trainer<Real> tr(*lm->base, ex.world, *ex.oracle, ex.sched, ex.cfg.trainer(m));
  const auto w = writer(ex.cfg, out, "metrics_train_" + tag);
  std::vector<MetricsRecord> curve;
  Stopwatch sw;
  const std::size_t n = ex.cfg.train_steps;
  tr.train(n, [&](const StepStats& st) {
    if (st.step % 50 && st.step + 1 != n) return;
    auto r = step_record(st, ex.cfg.objective, sw.ms());
    w.append(r);
    curve.push_back(r);
    os << tag << " step " << st.step << " fidelity " << fmt_num(st.fidelity) << " reward " << fmt_num(st.reward)
       << " reg " << fmt_num(st.reg) << "\n"
       << std::flush;
  });
  const auto ck = (out / checkpoint_name(m, ex.cfg.objective)).string();
  if (m == Method::lora)
    save_checkpoint(ck, *tr.lora());
  else
    save_checkpoint(ck, *tr.refiner_params());
  if (!curve.empty()) emit_plots(PlotSet{curve, {}, {}}, (out / "plots").string());
  os << "saved " << ck << "\n";
  return 0;
}

inline int cmd_sample(const Experiment& ex, const fs::path& out, const CliOptions& o, std::ostream& os) {
  const bool ode = ex.cfg.sampler == SamplerKind::ode;
  const bool trained = o.model && *o.model == "trained";
  if (o.model && *o.model != "trained" && *o.model != "base") throw ConfigError("--model must be base or trained");
  if (ode && trained) throw ConfigError("the ode sampler runs the base model only");
  auto lm = load_models(ex, out, trained);
  const std::string label = ode ? "ode" : lm->label;
  Stopwatch sw;
  auto sf = sample_set(ex, lm->models, ex.cfg.eval_conditions, ex.cfg.samples_per_condition, sample_seed(ex.cfg), ode, label);
  const double ms = sw.ms();
  save_samples(samples_path(out, label).string(), sf);
  auto rec = evaluate(ex, sf);
  rec.objective = objective_name(ex.cfg.objective);
  rec.wall_ms = ms;
  writer(ex.cfg, out, "metrics_sample_" + label).append(rec);
  os << "wrote " << samples_path(out, label).string() << " loglik " << fmt_num(rec.fidelity) << "\n";
  return 0;
}

inline int cmd_search(const Experiment& ex, const fs::path& out, std::ostream& os) {
  auto lm = load_models(ex, out, false);
  const auto rf = latent_reward<Real>(ex.world.d, ex.cfg.reward);
  const std::uint64_t seed = sample_seed(ex.cfg);
  const std::size_t nc = ex.cfg.eval_conditions, per = ex.cfg.samples_per_condition;
  for (const std::string kind : {"bon", "sop"}) {
    Stopwatch sw;
    SampleFile sf;
    sf.label = kind;
    sf.seqs.resize(nc * per);
    std::vector<Counters> cs(sf.seqs.size());
    parallel_for(sf.seqs.size(), ex.threads(), [&](std::size_t i) {
      const auto cond = eval_condition(ex, seed, i / per);
      const auto ns = eval_noise_seed(seed, i / per, i % per);
      auto r = kind == "bon" ? best_of_n(*lm->gen, ex.sched, cond, ex.cfg.search_n, rf, ex.world.n_chunks, ex.world.modes(), ns)
                             : search_over_path(*lm->gen, ex.sched, cond, ex.cfg.search_k, rf, ex.world.n_chunks, ex.world.modes(), ns);
      sf.seqs[i] = std::move(r.seq);
      cs[i] = r.counters;
    });
    for (const auto& c : cs) sf.counters += c;
    save_samples(samples_path(out, kind).string(), sf);
    auto rec = evaluate(ex, sf);
    rec.objective = objective_name(ex.cfg.objective);
    rec.wall_ms = sw.ms();
    writer(ex.cfg, out, "metrics_search_" + kind).append(rec);
    os << kind << ": reward " << fmt_num(rec.reward) << " loglik " << fmt_num(rec.fidelity) << " nfe " << fmt_num(rec.nfe)
       << " verify " << fmt_num(rec.verify_count) << "\n";
  }
  return 0;
}

inline int cmd_ablate(const Experiment& ex, const fs::path& out, const CliOptions& o, std::ostream& os) {
  auto lm = load_models(ex, out, false);
  std::vector<AblationCell> cells;
  if (o.refined_steps || o.history || o.reflect) {
    AblationCell c{"custom", ex.cfg.refined_steps, ex.cfg.history, ex.cfg.reflect};
    cells.push_back(c);
  } else {
    cells = ablation_grid(ex.cfg);
  }
  std::unique_ptr<FakeScoreModel<Real>> warm;
  if (ex.cfg.objective == Objective::dmd)
    warm = warm_fake(lm->models, ex.world, *ex.oracle, ex.sched, ex.cfg.fake, ex.cfg.dmd, ex.cfg.seed, ex.threads());
  std::vector<std::vector<double>> ll(cells.size());
  std::vector<MetricsRecord> recs(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    RunConfig cc = ex.cfg;
    cc.refined_steps = cells[i].refined;
    cc.history = cells[i].history;
    cc.reflect = cells[i].reflect;
    Stopwatch sw;
    Trainer<Real> tr(*lm->base, ex.world, *ex.oracle, ex.sched, cc.trainer(Method::pathwise), warm.get());
    tr.train(ex.cfg.ablate_steps);
    auto sf = sample_set(ex, tr.models(), ex.cfg.eval_conditions, ex.cfg.samples_per_condition, sample_seed(ex.cfg), false,
                         "ablate_" + cells[i].label);
    recs[i] = evaluate(ex, sf);
    recs[i].step = ex.cfg.ablate_steps;
    recs[i].objective = objective_name(ex.cfg.objective);
    recs[i].wall_ms = sw.ms();
    ll[i] = logliks(ex, sf);
    writer(ex.cfg, out, "metrics_ablate_" + cells[i].label).append(recs[i]);
    os << cells[i].label << ": loglik " << fmt_num(recs[i].fidelity) << "\n" << std::flush;
  }
  std::vector<std::string> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::string refined = cells[i].refined.empty() ? "all" : cfgio::fmt(cells[i].refined);
    std::string row = cells[i].label + " " + refined + " " + (cells[i].history ? "1" : "0") + " " +
                      (cells[i].reflect ? "1" : "0") + " " + fmt_num(recs[i].fidelity) + " " + fmt_num(recs[i].reward);
    if (cells[0].full() && i > 0) {
      const auto t = paired_t_test(ll[i], ll[0]);
      row += " " + fmt_num(t.mean_diff) + " " + fmt_num(t.p_greater);
    } else {
      row += " 0 1";
    }
    rows.push_back(row);
  }
  fs::create_directories(out / "plots");
  detail::write_series(out / "plots" / "ablation.dat",
                       "label refined history reflect fidelity reward diff_vs_full p_better_than_full", rows);
  return 0;
}

inline int cmd_selfcheck(std::ostream& os) {
  bool ok = true;
  std::size_t points = 0;
  for (const auto& r : finite_difference_suite(20240601)) {
    const bool pass = r.worst < 1e-5;
    ok = ok && pass;
    points += r.points;
    os << (pass ? "PASS" : "FAIL") << " grad " << r.name << " points=" << r.points << " max_rel_err=" << fmt_num(r.worst) << "\n";
  }
  os << "gradient points checked: " << points << "\n";
  const auto kv = kv_cache_suite(7);
  for (auto [name, v] : std::vector<std::pair<std::string, double>>{
           {"history", kv.history}, {"reflect", kv.reflect}, {"rope_offset", kv.rope_offset}, {"incremental", kv.incremental}}) {
    const bool pass = v < 1e-10;
    ok = ok && pass;
    os << (pass ? "PASS" : "FAIL") << " kv " << name << " max_abs_err=" << fmt_num(v) << "\n";
  }
  return ok ? 0 : 3;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"arfn: autoregressive noise refinement on a synthetic latent-video world"};
  app.require_subcommand(1, 1);
  CliOptions o;
  const std::vector<std::string> cmds{"pretrain-base", "train-refiner", "sample", "eval", "search", "ablate", "selfcheck"};
  for (const auto& name : cmds) {
    auto* sc = app.add_subcommand(name);
    sc->add_option("--config", o.config, "run configuration file");
    sc->add_option("--seed", o.seed, "run seed");
    sc->add_option("--out", o.out, "output directory");
    sc->add_option("--objective", o.objective, "dmd or reward");
    sc->add_option("--baseline", o.baseline, "none (pathwise refiner), lora or init-refiner");
    sc->add_option("--sampler", o.sampler, "stochastic or ode");
    sc->add_option("--steps", o.steps, "training steps");
    sc->add_option("--format", o.format, "csv or jsonl");
    sc->add_option("--threads", o.threads, "worker threads (0 = all, capped by ARFN_THREADS)");
    sc->add_option("--refined-steps", o.refined_steps, "raw timesteps to refine")->delimiter(',');
    sc->add_option("--history", o.history, "history block in the refiner cache (true/false)");
    sc->add_option("--reflect", o.reflect, "reflect block in the refiner cache (true/false)");
    sc->add_option("--model", o.model, "sample: base or trained");
    sc->add_option("--samples", o.samples, "eval: sample file (default: every samples_*.jsonl under --out)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, os, es);
  } catch (const CLI::ParseError& e) {
    app.exit(e, es, es);
    es << app.help();
    return 2;
  }
  o.command = app.get_subcommands().front()->get_name();
  try {
    if (o.command == "selfcheck") return cli::cmd_selfcheck(os);
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    cli::apply_overrides(cfg, o);
    const fs::path out(o.out);
    fs::create_directories(out);
    Experiment ex(cfg);
    {
      std::ofstream f(out / ("config_" + o.command + ".ini"), std::ios::trunc);
      f << serialize_config(cfg);
    }
    if (o.command == "pretrain-base") return cli::cmd_pretrain(ex, out, os);
    if (o.command == "train-refiner") return cli::cmd_train(ex, out, os);
    if (o.command == "sample") return cli::cmd_sample(ex, out, o, os);
    if (o.command == "eval") return cli::eval_files(ex, out, o.samples, os);
    if (o.command == "search") return cli::cmd_search(ex, out, os);
    if (o.command == "ablate") return cli::cmd_ablate(ex, out, o, os);
  } catch (const ConfigError& e) {
    es << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    es << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    es << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace arfn
