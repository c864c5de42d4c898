#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "arfn/harness/cli.hpp"

using namespace arfn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("arfn_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

LatentSequence<double> seq_of(std::vector<double> frames, std::size_t d, Condition cond) {
  LatentSequence<double> s;
  s.c = 1;
  s.d = d;
  s.condition = std::move(cond);
  s.frames = std::move(frames);
  return s;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c;
  EXPECT_EQ(parse_config(serialize_config(c)), c);
}

TEST(Config, RandomizedRoundTrip) {
  Rng r(21);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    RunConfig c;
    visit_fields(c, [&](const char*, const char*, auto& v) {
      using V = std::decay_t<decltype(v)>;
      if constexpr (std::is_same_v<V, double>) {
        v *= 1.0 + 1e-3 * (r.uniform() - 0.5);
      } else if constexpr (std::is_same_v<V, std::size_t>) {
        v += r.below(3);
      } else if constexpr (std::is_same_v<V, bool>) {
        v = r.below(2) == 1;
      } else if constexpr (std::is_same_v<V, Objective>) {
        v = r.below(2) ? Objective::reward : Objective::dmd;
      } else if constexpr (std::is_same_v<V, Baseline>) {
        v = static_cast<Baseline>(r.below(3));
      } else if constexpr (std::is_same_v<V, SamplerKind>) {
        v = r.below(2) ? SamplerKind::ode : SamplerKind::stochastic;
      } else if constexpr (std::is_same_v<V, OutputFormat>) {
        v = r.below(2) ? OutputFormat::jsonl : OutputFormat::csv;
      } else if constexpr (std::is_same_v<V, std::vector<int>>) {
        if (v.empty() && r.below(2)) v = {750, 250};
      } else if constexpr (std::is_same_v<V, std::uint64_t>) {
        v = r.below(1u << 30);
      }
    });
    try {
      validate_config(c);
    } catch (const ConfigError&) {
      continue;
    }
    EXPECT_EQ(parse_config(serialize_config(c)), c) << serialize_config(c);
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

TEST(Config, RejectsUnknownAndInvalid) {
  EXPECT_THROW(parse_config("[world]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[nowhere]\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nseed 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nseed = x\n"), ConfigError);
  EXPECT_THROW(parse_config("[objective]\nmode = dmd+reward\n"), ConfigError);
  EXPECT_THROW(parse_config("[ablation]\nrefined_steps = 1000\n"), ConfigError);
  EXPECT_THROW(parse_config("[ablation]\nrefined_steps = 300\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\nsamples_per_condition = 1\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/arfn.ini"), ConfigError);
}

TEST(Config, CommentsAndPartialFiles) {
  const auto c = parse_config("# run settings\n[run]\nseed = 7 # trailing\n\n[ablation]\nrefined_steps = 750,250\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.refined_steps, (std::vector<int>{750, 250}));
  EXPECT_EQ(c.refined_indices(), (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(c.batch, RunConfig{}.batch);
}

TEST(Metrics, IdenticalSamplesHaveUnitSimilarity) {
  Condition cond{1, {1.0, 0.0}};
  const auto s = seq_of({1, 2, 3, 4, 5, 6}, 2, cond);
  EXPECT_NEAR(diversity(std::vector<LatentSequence<double>>{s, s, s}), 1.0, 1e-15);
}

TEST(Metrics, StaticVideoHasZeroDynamicDegree) {
  Condition cond{0, {0.0, 1.0}};
  const auto s = seq_of({1, 2, 1, 2, 1, 2}, 2, cond);
  EXPECT_EQ(dynamic_degree(std::vector<LatentSequence<double>>{s}), 0.0);
  const auto m = seq_of({0, 0, 3, 4, 3, 4}, 2, cond);
  EXPECT_DOUBLE_EQ(dynamic_degree(std::vector<LatentSequence<double>>{m}), 2.5);
  EXPECT_DOUBLE_EQ(dynamic_degree(std::vector<LatentSequence<double>>{m}, 2), 5.0);
  EXPECT_THROW(dynamic_degree(std::vector<LatentSequence<double>>{m}, 3), Error);
}

TEST(Metrics, IndependentNoiseIsNearlyOrthogonal) {
  Rng r(5);
  std::vector<LatentSequence<double>> seqs;
  for (int k = 0; k < 20; ++k) {
    Condition cond{0, {static_cast<double>(k), 1.0}};
    for (int i = 0; i < 2; ++i) seqs.push_back(seq_of(r.normals<double>(2000), 2, cond));
  }
  EXPECT_LT(std::abs(diversity(seqs)), 0.05);
}

TEST(Metrics, DiversityNeedsPairs) {
  Condition cond{0, {1.0, 0.0}};
  EXPECT_THROW(diversity(std::vector<LatentSequence<double>>{seq_of({1, 2}, 2, cond)}), Error);
}

TEST(Metrics, PairedTestKnownValues) {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{0, 1, 3, 3, 3};
  const auto t = paired_t_test(a, b);
  // differences 1 1 0 1 2: mean 1, sd sqrt(0.5)
  EXPECT_DOUBLE_EQ(t.mean_diff, 1.0);
  EXPECT_NEAR(t.sd, std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(t.t, 1.0 / (std::sqrt(0.5) / std::sqrt(5.0)), 1e-12);
  EXPECT_NEAR(t.p_greater, 0.0170547, 1e-6);
  EXPECT_EQ(paired_t_test(a, a).p_greater, 0.5);
  EXPECT_THROW(paired_t_test({1.0}, {2.0}), Error);
}

TEST(Metrics, CsvAndJsonlWriters) {
  const auto dir = scratch_dir("writers");
  MetricsRecord r;
  r.step = 3;
  r.objective = "dmd";
  r.fidelity = -1.5;
  r.nfe = 28;
  MetricsWriter csv((dir / "m.csv").string(), false);
  csv.append(r);
  csv.append(r);
  const auto text = slurp(dir / "m.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "step,objective,fidelity,reward,reg,diversity,dynamic_degree,nfe,verify_count,wall_ms");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  MetricsWriter js((dir / "m.jsonl").string(), true);
  js.append(r);
  const auto j = nlohmann::json::parse(slurp(dir / "m.jsonl"));
  EXPECT_EQ(j.at("nfe").get<double>(), 28.0);
  EXPECT_EQ(j.size(), metrics_columns().size());
}

TEST(Metrics, EmitPlotsWritesSchemaHeaders) {
  const auto dir = scratch_dir("plots");
  MetricsRecord r;
  r.fidelity = -100;
  PlotSet ps{{r, r}, {{"base", r}, {"pathwise_dmd", r}}, {{"ode", r}, {"stochastic", r}}};
  const auto files = emit_plots(ps, (dir / "p").string());
  ASSERT_EQ(files.size(), 4u);
  for (const auto& f : files) EXPECT_EQ(slurp(f).rfind("# schema: ", 0), 0u) << f;
  EXPECT_THROW(emit_plots(PlotSet{}, (dir / "q").string()), Error);
}

TEST(Metrics, SampleFilesRoundTrip) {
  const auto dir = scratch_dir("samples");
  SampleFile sf;
  sf.label = "base";
  sf.counters = Counters{12, 3, 4};
  Rng r(2);
  for (int i = 0; i < 3; ++i) {
    auto s = seq_of(r.normals<double>(6), 2, Condition{1, {0.6, 0.8}});
    s.provenance = 1000 + i;
    sf.seqs.push_back(s);
  }
  save_samples((dir / "s.jsonl").string(), sf);
  const auto back = load_samples((dir / "s.jsonl").string());
  EXPECT_EQ(back.label, sf.label);
  EXPECT_EQ(back.counters, sf.counters);
  ASSERT_EQ(back.seqs.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back.seqs[i].frames, sf.seqs[i].frames);
    EXPECT_EQ(back.seqs[i].condition, sf.seqs[i].condition);
    EXPECT_EQ(back.seqs[i].provenance, sf.seqs[i].provenance);
  }
  std::ofstream((dir / "bad.jsonl").string()) << "{\"kind\":\"other\"}\n";
  EXPECT_THROW(load_samples((dir / "bad.jsonl").string()), Error);
}

class SearchTest : public ::testing::Test {
 protected:
  WorldSpec world = make_world(WorldParams{});
  NoiseSchedule sched = from_raw_steps({1000, 750, 500, 250}, 5.0);
  DenoiserConfig cfg = [] {
    DenoiserConfig c;
    c.cond_dim = 11;
    return c;
  }();
  DenoiserParams<double> base = init_denoiser<double>(cfg, 8);
  Denoiser<double> gen{ModelView<double>{.base = &base}};
  RewardFn<double> rf = latent_reward<double>(world.d);
  Condition cond(std::uint64_t s) const {
    Rng r(s);
    return sample_condition(world, r);
  }
};

TEST_F(SearchTest, BestOfNPicksBruteForceMax) {
  const auto c = cond(1);
  const std::size_t n = 4, chunks = 3;
  const auto res = best_of_n(gen, sched, c, n, rf, chunks, world.modes(), 77);
  ASSERT_EQ(res.decisions.size(), chunks);
  for (const auto& d : res.decisions) {
    ASSERT_EQ(d.scores.size(), n);
    EXPECT_EQ(d.scores[d.chosen], *std::max_element(d.scores.begin(), d.scores.end()));
  }
  // the final chunk's chosen score is the reward of the returned sequence
  EXPECT_EQ(res.decisions.back().scores[res.decisions.back().chosen], rf(res.seq.frames, c));
  EXPECT_EQ(res.counters.denoiser_calls, chunks * n * sched.size());
  EXPECT_EQ(res.counters.verify, chunks * n);
  EXPECT_EQ(res.extra_nfe, chunks * (n - 1) * sched.size());
}

TEST_F(SearchTest, BestOfOneIsThePlainRollout) {
  const auto c = cond(2);
  RolloutModels<double> m;
  m.gen = &gen;
  const auto plain = rollout_stochastic(m, sched, c, world.n_chunks, world.modes(), 31);
  const auto bon = best_of_n(gen, sched, c, 1, rf, world.n_chunks, world.modes(), 31);
  EXPECT_EQ(bon.seq.frames, plain.seq.frames);
  EXPECT_EQ(bon.extra_nfe, 0u);
}

TEST_F(SearchTest, SearchOverPathCounters) {
  const auto c = cond(3);
  const std::size_t k = 3, chunks = 2;
  const auto res = search_over_path(gen, sched, c, k, rf, chunks, world.modes(), 5);
  EXPECT_EQ(res.decisions.size(), chunks * sched.size());
  for (const auto& d : res.decisions) EXPECT_EQ(d.scores[d.chosen], *std::max_element(d.scores.begin(), d.scores.end()));
  EXPECT_EQ(res.counters.denoiser_calls, chunks * k * sched.size());
  EXPECT_EQ(res.counters.verify, chunks * k * sched.size());
  EXPECT_EQ(res.extra_nfe, chunks * (k - 1) * sched.size());
}

TEST_F(SearchTest, RejectsZeroCandidates) {
  EXPECT_THROW(best_of_n(gen, sched, cond(1), 0, rf, 1, world.modes(), 1), ConfigError);
  EXPECT_THROW(search_over_path(gen, sched, cond(1), 0, rf, 1, world.modes(), 1), ConfigError);
}

TEST_F(SearchTest, ThreadCountDoesNotChangeResult) {
  const auto c = cond(4);
  const auto a = best_of_n(gen, sched, c, 3, rf, 2, world.modes(), 9, 1);
  const auto b = best_of_n(gen, sched, c, 3, rf, 2, world.modes(), 9, 3);
  EXPECT_EQ(a.seq.frames, b.seq.frames);
}

namespace {

int run(std::vector<std::string> args, std::string* out = nullptr, std::string* err = nullptr) {
  args.insert(args.begin(), "arfn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return code;
}

}  // namespace

TEST(Cli, UsageAndConfigErrorsExitTwo) {
  const auto dir = scratch_dir("cli");
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"frobnicate"}), 2);
  EXPECT_EQ(run({"sample", "--sampler", "sideways", "--out", dir.string()}), 2);
  EXPECT_EQ(run({"train-refiner", "--objective", "dmd+reward", "--out", dir.string()}), 2);
  EXPECT_EQ(run({"train-refiner", "--config", (dir / "missing.ini").string(), "--out", dir.string()}), 2);
  EXPECT_EQ(run({"ablate", "--refined-steps", "300", "--out", dir.string()}), 2);
  std::ofstream(dir / "bad.ini") << "[run]\nthreads = -1\n";
  EXPECT_EQ(run({"eval", "--config", (dir / "bad.ini").string(), "--out", dir.string()}), 2);
}

TEST(Cli, MissingInputsExitOne) {
  const auto dir = scratch_dir("cli_missing");
  std::string err;
  EXPECT_EQ(run({"train-refiner", "--out", dir.string()}, nullptr, &err), 1);
  EXPECT_NE(err.find("pretrain-base"), std::string::npos);
  EXPECT_EQ(run({"eval", "--out", dir.string()}), 1);
}

TEST(Cli, HelpExitsZero) {
  std::string out;
  EXPECT_EQ(run({"--help"}, &out), 0);
  EXPECT_NE(out.find("pretrain-base"), std::string::npos);
}

TEST(Cli, EvalOfSavedSamplesIsDeterministic) {
  const auto dir = scratch_dir("cli_eval");
  const WorldSpec world = make_world(WorldParams{});
  SampleFile sf;
  sf.label = "base";
  Rng r(1);
  for (int k = 0; k < 3; ++k) {
    const auto cond = sample_condition(world, r);
    for (int i = 0; i < 2; ++i) {
      auto s = sample_video<double>(world, cond, r);
      sf.seqs.push_back(s);
    }
  }
  sf.counters = Counters{6 * 28, 0, 0};
  save_samples((dir / "samples_base.jsonl").string(), sf);
  auto ode = sf;
  ode.label = "ode";
  save_samples((dir / "samples_ode.jsonl").string(), ode);
  ASSERT_EQ(run({"eval", "--out", dir.string()}), 0);
  const auto first = slurp(dir / "metrics_eval_base.csv");
  fs::remove(dir / "metrics_eval_base.csv");
  ASSERT_EQ(run({"eval", "--out", dir.string()}), 0);
  EXPECT_EQ(slurp(dir / "metrics_eval_base.csv"), first);
  EXPECT_TRUE(fs::exists(dir / "plots" / "ode_vs_stochastic.dat"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "method_bars.dat"));
}
