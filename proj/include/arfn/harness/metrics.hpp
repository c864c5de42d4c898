#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "arfn/errors.hpp"
#include "arfn/sampler.hpp"
#include "arfn/synthdata.hpp"

namespace arfn {

struct MetricsRecord {
  std::size_t step = 0;
  std::string objective;
  double fidelity = 0;  // mean oracle log-likelihood
  double reward = 0;
  double reg = 0;
  double diversity = 0;  // mean within-condition cosine similarity
  double dynamic_degree = 0;
  double nfe = 0;  // per video
  double verify_count = 0;
  double wall_ms = 0;
  bool operator==(const MetricsRecord&) const = default;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// Mean L2 distance between frames `interval` apart, averaged over sequences.
template <class T>
double dynamic_degree(const std::vector<LatentSequence<T>>& seqs, std::size_t interval = 1) {
  if (seqs.empty()) throw Error("dynamic_degree: empty sample set");
  if (interval == 0) throw ConfigError("dynamic_degree: interval must be positive");
  double total = 0;
  for (const auto& s : seqs) {
    const std::size_t F = s.n_frames();
    if (F <= interval) throw Error("dynamic_degree: sequence shorter than the interval");
    double acc = 0;
    for (std::size_t f = 0; f + interval < F; ++f) {
      double d2 = 0;
      for (std::size_t k = 0; k < s.d; ++k) {
        const double e = static_cast<double>(s.frames[(f + interval) * s.d + k]) - static_cast<double>(s.frames[f * s.d + k]);
        d2 += e * e;
      }
      acc += std::sqrt(d2);
    }
    total += acc / static_cast<double>(F - interval);
  }
  return total / static_cast<double>(seqs.size());
}

// Mean pairwise cosine similarity of flattened sequences sharing a condition.
template <class T>
double diversity(const std::vector<LatentSequence<T>>& seqs) {
  if (seqs.empty()) throw Error("diversity: empty sample set");
  std::map<std::vector<double>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::vector<double> key{static_cast<double>(seqs[i].condition.mode)};
    key.insert(key.end(), seqs[i].condition.direction.begin(), seqs[i].condition.direction.end());
    groups[key].push_back(i);
  }
  double sum = 0;
  std::size_t pairs = 0;
  for (const auto& [key, idx] : groups) {
    if (idx.size() < 2) throw Error("diversity: every condition needs at least two samples");
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = a + 1; b < idx.size(); ++b) {
        const auto& fa = seqs[idx[a]].frames;
        const auto& fb = seqs[idx[b]].frames;
        sum += cosine(std::vector<double>(fa.begin(), fa.end()), std::vector<double>(fb.begin(), fb.end()));
        ++pairs;
      }
  }
  return sum / static_cast<double>(pairs);
}

template <class T>
MetricsRecord eval_metrics(const std::vector<LatentSequence<T>>& seqs, const WorldOracle& oracle,
                           const RewardWeights& w, const Counters& total, std::size_t dyn_interval = 1) {
  if (seqs.empty()) throw Error("eval_metrics: empty sample set");
  MetricsRecord r;
  for (const auto& s : seqs) {
    r.fidelity += oracle.oracle_loglik(s);
    r.reward += static_cast<double>(reward_value(s.frames, s.d, s.condition, w));
  }
  const double n = static_cast<double>(seqs.size());
  r.fidelity /= n;
  r.reward /= n;
  r.diversity = diversity(seqs);
  r.dynamic_degree = dynamic_degree(seqs, dyn_interval);
  r.nfe = static_cast<double>(total.nfe()) / n;
  r.verify_count = static_cast<double>(total.verify) / n;
  for (double v : {r.fidelity, r.reward, r.diversity, r.dynamic_degree})
    if (!std::isfinite(v)) throw NumericError("eval_metrics: non-finite metric");
  return r;
}

// ---- statistics --------------------------------------------------------------------

struct PairedTest {
  std::size_t n = 0;
  double mean_diff = 0, sd = 0, t = 0;
  double p_greater = 1;  // one-sided p for mean(a - b) > 0
};

inline PairedTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("paired_t_test: need two equal samples of size >= 2");
  PairedTest r;
  r.n = a.size();
  for (std::size_t i = 0; i < r.n; ++i) r.mean_diff += (a[i] - b[i]) / static_cast<double>(r.n);
  double ss = 0;
  for (std::size_t i = 0; i < r.n; ++i) ss += std::pow(a[i] - b[i] - r.mean_diff, 2);
  r.sd = std::sqrt(ss / static_cast<double>(r.n - 1));
  if (r.sd == 0) {
    r.t = r.mean_diff > 0 ? std::numeric_limits<double>::infinity()
                          : (r.mean_diff < 0 ? -std::numeric_limits<double>::infinity() : 0.0);
    r.p_greater = r.mean_diff > 0 ? 0.0 : (r.mean_diff < 0 ? 1.0 : 0.5);
    return r;
  }
  r.t = r.mean_diff / (r.sd / std::sqrt(static_cast<double>(r.n)));
  boost::math::students_t dist(static_cast<double>(r.n - 1));
  r.p_greater = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

// ---- metrics files -----------------------------------------------------------------

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{"step",      "objective",      "fidelity", "reward",       "reg",
                                             "diversity", "dynamic_degree", "nfe",      "verify_count", "wall_ms"};
  return cols;
}

inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json to_json(const MetricsRecord& r) {
  return nlohmann::json{{"step", r.step},
                        {"objective", r.objective},
                        {"fidelity", r.fidelity},
                        {"reward", r.reward},
                        {"reg", r.reg},
                        {"diversity", r.diversity},
                        {"dynamic_degree", r.dynamic_degree},
                        {"nfe", r.nfe},
                        {"verify_count", r.verify_count},
                        {"wall_ms", r.wall_ms}};
}

// Appends records; a new or empty CSV file gets the header first.
class MetricsWriter {
 public:
  MetricsWriter(std::string path, bool jsonl) : path_(std::move(path)), jsonl_(jsonl) {}

  void append(const MetricsRecord& r) const {
    const bool fresh = !std::filesystem::exists(path_) || std::filesystem::file_size(path_) == 0;
    std::ofstream f(path_, std::ios::app);
    if (!f) throw Error("cannot write " + path_);
    if (jsonl_) {
      f << to_json(r).dump() << "\n";
      return;
    }
    if (fresh) {
      const auto& c = metrics_columns();
      for (std::size_t i = 0; i < c.size(); ++i) f << (i ? "," : "") << c[i];
      f << "\n";
    }
    f << r.step << "," << r.objective << "," << fmt_num(r.fidelity) << "," << fmt_num(r.reward) << ","
      << fmt_num(r.reg) << "," << fmt_num(r.diversity) << "," << fmt_num(r.dynamic_degree) << "," << fmt_num(r.nfe)
      << "," << fmt_num(r.verify_count) << "," << fmt_num(r.wall_ms) << "\n";
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  bool jsonl_;
};

// ---- plot data ---------------------------------------------------------------------

struct LabeledRecord {
  std::string label;
  MetricsRecord record;
};

struct PlotSet {
  std::vector<MetricsRecord> training;    // training curve, one row per step record
  std::vector<LabeledRecord> methods;     // method comparison bars and the overhead scatter
  std::vector<LabeledRecord> samplers;    // ode vs stochastic
  bool empty() const { return training.empty() && methods.empty() && samplers.empty(); }
};

namespace detail {

inline void write_series(const std::filesystem::path& p, const std::string& schema, const std::vector<std::string>& rows) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f << "# schema: " << schema << "\n";
  for (const auto& r : rows) f << r << "\n";
  if (!f) throw Error("write failed: " + p.string());
}

}  // namespace detail

// Writes whitespace-separated series, one file per figure, each starting with a schema line.
// Returns the paths written.
inline std::vector<std::string> emit_plots(const PlotSet& ps, const std::string& dir) {
  if (ps.empty()) throw Error("emit_plots: no records");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw Error("emit_plots: cannot create " + dir);
  const std::filesystem::path d(dir);
  std::vector<std::string> out;
  auto put = [&](const char* name, const std::string& schema, const std::vector<std::string>& rows) {
    detail::write_series(d / name, schema, rows);
    out.push_back((d / name).string());
  };
  if (!ps.training.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : ps.training)
      rows.push_back(std::to_string(r.step) + " " + fmt_num(r.fidelity) + " " + fmt_num(r.reward) + " " + fmt_num(r.reg));
    put("training_curve.dat", "step fidelity reward reg", rows);
  }
  if (!ps.methods.empty()) {
    std::vector<std::string> bars, scatter;
    for (const auto& m : ps.methods) {
      const auto& r = m.record;
      bars.push_back(m.label + " " + fmt_num(r.fidelity) + " " + fmt_num(r.reward) + " " + fmt_num(r.diversity) + " " +
                     fmt_num(r.dynamic_degree));
      scatter.push_back(m.label + " " + fmt_num(r.nfe) + " " + fmt_num(r.verify_count) + " " + fmt_num(r.fidelity) +
                        " " + fmt_num(r.reward));
    }
    put("method_bars.dat", "method fidelity reward diversity dynamic_degree", bars);
    put("overhead_scatter.dat", "method nfe verify_count fidelity reward", scatter);
  }
  if (!ps.samplers.empty()) {
    std::vector<std::string> rows;
    for (const auto& m : ps.samplers)
      rows.push_back(m.label + " " + fmt_num(m.record.fidelity) + " " + fmt_num(m.record.reward) + " " +
                     fmt_num(m.record.dynamic_degree));
    put("ode_vs_stochastic.dat", "sampler fidelity reward dynamic_degree", rows);
  }
  return out;
}

// ---- sample files ------------------------------------------------------------------

// JSON lines: a header object then one object per sequence. Doubles are written round-trip exact.
struct SampleFile {
  std::string label;
  Counters counters;  // totals over all sequences
  std::vector<LatentSequence<double>> seqs;
};

inline void save_samples(const std::string& path, const SampleFile& sf) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << nlohmann::json{{"kind", "arfn-samples"},
                      {"label", sf.label},
                      {"count", sf.seqs.size()},
                      {"denoiser_calls", sf.counters.denoiser_calls},
                      {"refiner_calls", sf.counters.refiner_calls},
                      {"verify", sf.counters.verify}}
           .dump()
    << "\n";
  for (const auto& s : sf.seqs)
    f << nlohmann::json{{"mode", s.condition.mode}, {"direction", s.condition.direction}, {"c", s.c},
                        {"d", s.d},           {"seed", s.provenance},          {"frames", s.frames}}
             .dump()
      << "\n";
  if (!f) throw Error("write failed: " + path);
}

inline SampleFile load_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error("samples: empty file " + path);
  SampleFile sf;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.at("kind") != "arfn-samples") throw Error("samples: not a sample file: " + path);
    sf.label = h.at("label").get<std::string>();
    sf.counters.denoiser_calls = h.at("denoiser_calls").get<std::size_t>();
    sf.counters.refiner_calls = h.at("refiner_calls").get<std::size_t>();
    sf.counters.verify = h.at("verify").get<std::size_t>();
    const auto count = h.at("count").get<std::size_t>();
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      LatentSequence<double> s;
      s.condition.mode = j.at("mode").get<std::size_t>();
      s.condition.direction = j.at("direction").get<std::vector<double>>();
      s.c = j.at("c").get<std::size_t>();
      s.d = j.at("d").get<std::size_t>();
      s.provenance = j.at("seed").get<std::uint64_t>();
      s.frames = j.at("frames").get<std::vector<double>>();
      sf.seqs.push_back(std::move(s));
    }
    if (sf.seqs.size() != count) throw Error("samples: expected " + std::to_string(count) + " sequences in " + path);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("samples: malformed file: ") + e.what());
  }
  return sf;
}

}  // namespace arfn
