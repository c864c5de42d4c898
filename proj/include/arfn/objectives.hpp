#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "arfn/denoiser.hpp"
#include "arfn/optim.hpp"
#include "arfn/refiner.hpp"
#include "arfn/rng.hpp"
#include "arfn/schedule.hpp"
#include "arfn/synthdata.hpp"

namespace arfn {

enum class Objective { dmd, reward };

inline Objective parse_objective(const std::string& s) {
  if (s == "dmd") return Objective::dmd;
  if (s == "reward") return Objective::reward;
  if (s.find("dmd") != std::string::npos && s.find("reward") != std::string::npos)
    throw ConfigError("objective: dmd and reward cannot be combined");
  throw ConfigError("objective: expected dmd or reward, got '" + s + "'");
}
inline const char* objective_name(Objective o) { return o == Objective::dmd ? "dmd" : "reward"; }

// Real velocity implied by a score: x0 = (x + sigma^2 s) / (1 - sigma), v = (x0 - x) / sigma.
template <class T>
std::vector<T> velocity_from_score(const std::vector<T>& x, const std::vector<T>& s, T sigma) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T x0 = (x[i] + sigma * sigma * s[i]) / (T(1) - sigma);
    v[i] = (x0 - x[i]) / sigma;
  }
  return v;
}

// Score of a velocity model under the Gaussian forward kernel: -(x - (1 - sigma) x0_hat) / sigma^2.
template <class T>
std::vector<T> score_from_velocity(const std::vector<T>& x, const std::vector<T>& v, T sigma) {
  std::vector<T> s(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T x0 = x[i] + sigma * v[i];
    s[i] = -(x[i] - (T(1) - sigma) * x0) / (sigma * sigma);
  }
  return s;
}

// Bidirectional transformer over a whole sequence at one sigma. With a prior, the network output is a
// residual on the prior's velocity; its head starts at zero so the model starts equal to the prior.
template <class T>
class FakeScoreModel {
 public:
  FakeScoreModel(DenoiserConfig cfg, std::uint64_t seed, const WorldOracle* prior, std::size_t modes)
      : params(init_denoiser<T>(cfg, seed)), prior_(prior), modes_(modes) {
    std::fill(params.head.W.data.begin(), params.head.W.data.end(), T(0));
    std::fill(params.head.b.data.begin(), params.head.b.data.end(), T(0));
  }

  DenoiserParams<T> params;

  const WorldOracle* prior() const { return prior_; }
  std::size_t modes() const { return modes_; }

  // Network output for X [frames, d].
  DiffArray<T> net_velocity(Tape<T>& tape, const DiffArray<T>& X, T sigma, const Condition& cond, bool trainable) const {
    Denoiser<T> net(ModelView<T>{&params, trainable, nullptr, false, nullptr, false});
    const std::size_t n = X.rows();
    std::vector<std::int64_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<std::int64_t>(i);
    return net.forward_sequence(tape, X, std::vector<T>(n, sigma), pos, std::vector<std::uint8_t>(n * n, 1),
                                cond.encode<T>(modes_));
  }

  std::vector<T> net_velocity_values(const std::vector<T>& x, T sigma, const Condition& cond) const {
    Tape<T> tape(false);
    const std::size_t d = params.cfg.frame_dim;
    return net_velocity(tape, tape.constant(Shape{x.size() / d, d}, x), sigma, cond, false).to_vector();
  }

  std::vector<T> prior_velocity(const std::vector<T>& x, T sigma, const Condition& cond) const {
    if (!prior_) return std::vector<T>(x.size(), T(0));
    return velocity_from_score(x, prior_->noised_score(x, static_cast<double>(sigma), cond.mode), sigma);
  }

  std::vector<T> velocity(const std::vector<T>& x, T sigma, const Condition& cond) const {
    auto v = net_velocity_values(x, sigma, cond);
    auto p = prior_velocity(x, sigma, cond);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += p[i];
    return v;
  }

  std::vector<T> score(const std::vector<T>& x, T sigma, const Condition& cond) const {
    if (!prior_) return score_from_velocity(x, velocity(x, sigma, cond), sigma);
    // s_prior + (1 - sigma) / sigma * residual, algebraically equal to the kernel form above
    auto r = net_velocity_values(x, sigma, cond);
    auto s = prior_->noised_score(x, static_cast<double>(sigma), cond.mode);
    const T f = (T(1) - sigma) / sigma;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += f * r[i];
    return s;
  }

 private:
  const WorldOracle* prior_;
  std::size_t modes_;
};

// <stopgrad(s_fake - s_real) / m, x_sigma> with x_sigma = Psi(X, eps, sigma).
template <class T, class RealFn, class FakeFn>
DiffArray<T> dmd_surrogate_loss(const DiffArray<T>& X, T sigma, const std::vector<T>& eps, RealFn&& real_score,
                                FakeFn&& fake_score, bool per_element = true) {
  if (!(sigma > T(0) && sigma < T(1))) throw Error("dmd_surrogate_loss: sigma outside (0,1)");
  Tape<T>& tape = X.tape();
  auto xs = forward_diffuse(X, tape.constant(X.shape(), eps), sigma);
  const std::vector<T> xv = xs.to_vector();
  const std::vector<T> sr = real_score(xv, sigma);
  const std::vector<T> sf = fake_score(xv, sigma);
  const T m = per_element ? static_cast<T>(xv.size()) : T(1);
  std::vector<T> c(xv.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = (sf[i] - sr[i]) / m;
  return sum(mul(tape.constant(X.shape(), std::move(c)), xs));
}

struct DmdNoise {
  double sigma_min = 0.02;
  double sigma_max = 0.98;
  void validate() const {
    if (!(sigma_min > 0.0 && sigma_max < 1.0 && sigma_min <= sigma_max))
      throw ConfigError("dmd: sigma range must lie inside (0,1)");
  }
  bool operator==(const DmdNoise&) const = default;
};

struct Dmd1dEstimate {
  double raw = 0;         // Monte Carlo gradient of the surrogate in mu
  double weight = 0;      // E_sigma[(1 - sigma)^2 / v(sigma)], v = (1 - sigma)^2 + sigma^2
  double normalized = 0;  // raw / weight, estimates d/dmu KL(N(mu,1) || N(0,1)) = mu
};

// Generator x = mu + z against N(0,1), both noised scores analytic, through dmd_surrogate_loss.
inline Dmd1dEstimate dmd_gradient_1d(double mu, std::size_t draws, std::uint64_t seed, const DmdNoise& range = {}) {
  range.validate();
  if (draws == 0) throw ConfigError("dmd_gradient_1d: draws must be positive");
  Rng rng(stream_id(seed, 0, 0, StreamRole::dmd, 7));
  Tape<double> tape;
  auto m = tape.variable(Shape{1}, {mu});
  DiffArray<double> total;
  for (std::size_t i = 0; i < draws; ++i) {
    const double z = rng.normal(), sigma = rng.uniform(range.sigma_min, range.sigma_max);
    const std::vector<double> eps{rng.normal()};
    auto X = add_row_bias(tape.constant(Shape{1, 1}, {z}), m);
    const double v = (1 - sigma) * (1 - sigma) + sigma * sigma;
    auto l = dmd_surrogate_loss(
        X, sigma, eps, [&](const std::vector<double>& x, double) { return std::vector<double>{-x[0] / v}; },
        [&](const std::vector<double>& x, double) { return std::vector<double>{-(x[0] - (1 - sigma) * mu) / v}; });
    total = total.valid() ? add(total, l) : l;
  }
  tape.backward(scale(total, 1.0 / static_cast<double>(draws)));
  Dmd1dEstimate e;
  e.raw = m.grad()[0];
  // Simpson's rule over the sigma range
  const std::size_t n = 2000;
  const double a = range.sigma_min, b = range.sigma_max, h = (b - a) / n;
  auto w = [](double s) { return (1 - s) * (1 - s) / ((1 - s) * (1 - s) + s * s); };
  if (b > a) {
    double acc = w(a) + w(b);
    for (std::size_t k = 1; k < n; ++k) acc += (k % 2 ? 4.0 : 2.0) * w(a + k * h);
    e.weight = acc * h / 3.0 / (b - a);
  } else {
    e.weight = w(a);
  }
  e.normalized = e.raw / e.weight;
  return e;
}

// One flow-matching step on detached samples; returns the batch MSE before the update.
template <class T>
T fake_score_update(FakeScoreModel<T>& fake, AdamW<T>& opt, const std::vector<std::vector<T>>& xs,
                    const std::vector<Condition>& conds, Rng& rng, const DmdNoise& range) {
  if (xs.empty() || xs.size() != conds.size()) throw Error("fake_score_update: empty or mismatched batch");
  range.validate();
  const std::size_t d = fake.params.cfg.frame_dim;
  Tape<T> tape;
  DiffArray<T> total;
  for (std::size_t b = 0; b < xs.size(); ++b) {
    const T sigma = static_cast<T>(rng.uniform(range.sigma_min, range.sigma_max));
    const auto eps = rng.normals<T>(xs[b].size());
    const auto xsig = forward_diffuse(xs[b], eps, sigma);
    const auto pv = fake.prior_velocity(xsig, sigma, conds[b]);
    std::vector<T> target(xs[b].size());
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = xs[b][i] - eps[i] - pv[i];
    const Shape sh{xs[b].size() / d, d};
    auto pred = fake.net_velocity(tape, tape.constant(sh, xsig), sigma, conds[b], true);
    auto err = sub(pred, tape.constant(sh, std::move(target)));
    auto l = scale(sq_norm(err), T(1) / static_cast<T>(err.size() * xs.size()));
    total = total.valid() ? add(total, l) : l;
  }
  tape.backward(total);
  std::vector<std::vector<T>> grads;
  for (auto* p : opt.params()) grads.push_back(tape.param_grad(*p));
  opt.step(grads);
  return total.item();
}

// -fidelity + reg_weight * sum 0.5 |delta|^2
template <class T>
DiffArray<T> refiner_loss(const DiffArray<T>& fidelity, const DiffArray<T>& reg, T reg_weight) {
  if (reg_weight < T(0)) throw ConfigError("refiner_loss: negative regulariser weight");
  return add(scale(fidelity, T(-1)), scale(reg, reg_weight));
}

}  // namespace arfn
