#pragma once

// Linear-Gaussian latent-video world. Each mode k is a Gaussian over the flattened sequence,
// so the noised marginal at any sigma is an exact Gaussian mixture.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "arfn/diffnum.hpp"
#include "arfn/errors.hpp"
#include "arfn/rng.hpp"

namespace arfn {

struct WorldParams {
  std::size_t d = 8;
  std::size_t c = 3;
  std::size_t n_chunks = 7;
  std::size_t modes = 3;
  double rho = 0.9;  // spectral radius of each transition (scaled random orthogonal)
  double q = 0.25;
  double p0 = 1.0;
  double drift_norm = 1.0;
  std::uint64_t seed = 1;

  bool operator==(const WorldParams&) const = default;
};

struct WorldSpec {
  std::size_t d = 0, c = 0, n_chunks = 0;
  std::vector<Eigen::MatrixXd> A;
  std::vector<Eigen::VectorXd> b;
  double q = 0.0, p0 = 0.0;
  std::vector<double> weights;

  std::size_t modes() const { return A.size(); }
  std::size_t frames() const { return c * n_chunks; }
  std::size_t dim() const { return frames() * d; }
  std::size_t chunk_size() const { return c * d; }
  std::size_t cond_dim() const { return modes() + d; }

  void validate() const {
    if (A.empty() || A.size() != b.size() || A.size() != weights.size())
      throw ConfigError("world: mode count mismatch");
    if (!(q > 0.0) || !(p0 > 0.0)) throw ConfigError("world: q and p0 must be positive");
    double ws = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw ConfigError("world: mode weights must be positive");
      ws += w;
    }
    if (std::abs(ws - 1.0) > 1e-9) throw ConfigError("world: mode weights must sum to 1");
    for (std::size_t k = 0; k < A.size(); ++k) {
      if (A[k].rows() != static_cast<Eigen::Index>(d) || A[k].cols() != static_cast<Eigen::Index>(d) ||
          b[k].size() != static_cast<Eigen::Index>(d))
        throw ConfigError("world: transition extent mismatch");
      Eigen::EigenSolver<Eigen::MatrixXd> es(A[k], false);
      if (es.eigenvalues().cwiseAbs().maxCoeff() >= 1.0) throw ConfigError("world: spectral radius must be < 1");
    }
  }
};

inline WorldSpec make_world(const WorldParams& p) {
  if (p.d == 0 || p.c == 0 || p.n_chunks == 0 || p.modes == 0) throw ConfigError("world: zero extent");
  if (!(p.rho >= 0.0 && p.rho < 1.0)) throw ConfigError("world: rho must lie in [0,1)");
  WorldSpec s;
  s.d = p.d;
  s.c = p.c;
  s.n_chunks = p.n_chunks;
  s.q = p.q;
  s.p0 = p.p0;
  Rng rng(stream_id(p.seed, 0, 0, StreamRole::world));
  const auto d = static_cast<Eigen::Index>(p.d);
  for (std::size_t k = 0; k < p.modes; ++k) {
    Eigen::MatrixXd M(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) M(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
    Eigen::MatrixXd Q = qr.householderQ();
    s.A.push_back(p.rho * Q);
    Eigen::VectorXd bb(d);
    for (Eigen::Index i = 0; i < d; ++i) bb(i) = rng.normal();
    s.b.push_back(p.drift_norm * bb / bb.norm());
  }
  s.weights.assign(p.modes, 1.0 / static_cast<double>(p.modes));
  s.validate();
  return s;
}

struct Condition {
  std::size_t mode = 0;
  std::vector<double> direction;

  // one-hot mode followed by the unit direction
  template <class T>
  std::vector<T> encode(std::size_t modes) const {
    std::vector<T> v(modes + direction.size(), T(0));
    v.at(mode) = T(1);
    for (std::size_t i = 0; i < direction.size(); ++i) v[modes + i] = static_cast<T>(direction[i]);
    return v;
  }
  bool operator==(const Condition&) const = default;
};

inline Condition sample_condition(const WorldSpec& spec, Rng& rng) {
  Condition c;
  double u = rng.uniform(), acc = 0.0;
  c.mode = spec.modes() - 1;
  for (std::size_t k = 0; k < spec.modes(); ++k) {
    acc += spec.weights[k];
    if (u < acc) {
      c.mode = k;
      break;
    }
  }
  c.direction.resize(spec.d);
  double n2 = 0.0;
  for (auto& e : c.direction) {
    e = rng.normal();
    n2 += e * e;
  }
  for (auto& e : c.direction) e /= std::sqrt(n2);
  return c;
}

template <class T>
struct LatentSequence {
  std::size_t c = 0, d = 0;
  std::vector<T> frames;  // [n_frames, d] row-major
  Condition condition;
  std::uint64_t provenance = 0;

  std::size_t n_frames() const { return d ? frames.size() / d : 0; }
  std::size_t n_chunks() const { return c ? n_frames() / c : 0; }
  std::vector<T> chunk(std::size_t i) const {
    const std::size_t cs = c * d;
    return std::vector<T>(frames.begin() + static_cast<std::ptrdiff_t>(i * cs),
                          frames.begin() + static_cast<std::ptrdiff_t>((i + 1) * cs));
  }
};

template <class T>
LatentSequence<T> sample_video(const WorldSpec& spec, const Condition& cond, Rng& rng) {
  if (cond.mode >= spec.modes()) throw ConfigError("sample_video: invalid mode index");
  const auto d = static_cast<Eigen::Index>(spec.d);
  LatentSequence<T> seq;
  seq.c = spec.c;
  seq.d = spec.d;
  seq.condition = cond;
  seq.provenance = rng.id();
  seq.frames.resize(spec.dim());
  Eigen::VectorXd x(d);
  for (Eigen::Index i = 0; i < d; ++i) x(i) = spec.p0 * rng.normal();
  for (std::size_t f = 0; f < spec.frames(); ++f) {
    if (f) {
      Eigen::VectorXd nz(d);
      for (Eigen::Index i = 0; i < d; ++i) nz(i) = spec.q * rng.normal();
      x = spec.A[cond.mode] * x + spec.b[cond.mode] + nz;
    }
    for (Eigen::Index i = 0; i < d; ++i) seq.frames[f * spec.d + static_cast<std::size_t>(i)] = static_cast<T>(x(i));
  }
  return seq;
}

// Closed-form moments of every mode with a cached eigendecomposition of each covariance.
class WorldOracle {
 public:
  explicit WorldOracle(const WorldSpec& spec) : spec_(spec) {
    spec_.validate();
    const std::size_t F = spec.frames(), d = spec.d;
    const auto D = static_cast<Eigen::Index>(spec.dim());
    const auto di = static_cast<Eigen::Index>(d);
    for (std::size_t k = 0; k < spec.modes(); ++k) {
      Eigen::VectorXd m = Eigen::VectorXd::Zero(D);
      std::vector<Eigen::MatrixXd> P(F);
      P[0] = spec.p0 * spec.p0 * Eigen::MatrixXd::Identity(di, di);
      for (std::size_t f = 1; f < F; ++f) {
        const auto o = static_cast<Eigen::Index>(f * d);
        m.segment(o, di) = spec.A[k] * m.segment(o - di, di) + spec.b[k];
        P[f] = spec.A[k] * P[f - 1] * spec.A[k].transpose() +
               spec.q * spec.q * Eigen::MatrixXd::Identity(di, di);
      }
      Eigen::MatrixXd C(D, D);
      for (std::size_t f = 0; f < F; ++f) {
        Eigen::MatrixXd Apow = Eigen::MatrixXd::Identity(di, di);
        for (std::size_t g = f + 1; g-- > 0;) {
          // Cov(x_f, x_g) = A^(f-g) P_g for g <= f
          Eigen::MatrixXd blk = Apow * P[g];
          C.block(static_cast<Eigen::Index>(f * d), static_cast<Eigen::Index>(g * d), di, di) = blk;
          C.block(static_cast<Eigen::Index>(g * d), static_cast<Eigen::Index>(f * d), di, di) = blk.transpose();
          Apow = Apow * spec.A[k];
        }
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
      if (es.info() != Eigen::Success) throw NumericError("world oracle: eigendecomposition failed");
      means_.push_back(m);
      covs_.push_back(C);
      U_.push_back(es.eigenvectors());
      lam_.push_back(es.eigenvalues());
    }
  }

  const WorldSpec& spec() const { return spec_; }
  const Eigen::VectorXd& mean(std::size_t k) const { return means_.at(k); }
  const Eigen::MatrixXd& cov(std::size_t k) const { return covs_.at(k); }

  // Log-density of mode k's noised Gaussian at x, together with its score.
  double component(std::size_t k, const Eigen::VectorXd& x, double sigma, Eigen::VectorXd* score) const {
    const double a = 1.0 - sigma;
    Eigen::VectorXd lam = a * a * lam_[k].array() + sigma * sigma;
    if (lam.minCoeff() <= 1e-300) throw NumericError("noised_score: singular covariance at sigma = 0");
    Eigen::VectorXd z = U_[k].transpose() * (x - a * means_[k]);
    Eigen::VectorXd zs = z.array() / lam.array();
    if (score) *score = -(U_[k] * zs);
    const double D = static_cast<double>(x.size());
    return -0.5 * z.dot(zs) - 0.5 * lam.array().log().sum() - 0.5 * D * std::log(2.0 * std::numbers::pi);
  }

  // Exact score of the noised mixture; a known mode restricts it to one component.
  Eigen::VectorXd noised_score(const Eigen::VectorXd& x, double sigma, std::optional<std::size_t> mode = {}) const {
    check(x, sigma);
    if (mode) {
      Eigen::VectorXd s;
      component(*mode, x, sigma, &s);
      return s;
    }
    const std::size_t K = spec_.modes();
    std::vector<double> lp(K);
    std::vector<Eigen::VectorXd> sc(K);
    for (std::size_t k = 0; k < K; ++k) lp[k] = component(k, x, sigma, &sc[k]) + std::log(spec_.weights[k]);
    const double mx = *std::max_element(lp.begin(), lp.end());
    double z = 0.0;
    for (auto& e : lp) z += (e = std::exp(e - mx));
    Eigen::VectorXd out = Eigen::VectorXd::Zero(x.size());
    for (std::size_t k = 0; k < K; ++k) out += (lp[k] / z) * sc[k];
    return out;
  }

  double log_density(const Eigen::VectorXd& x, double sigma = 0.0, std::optional<std::size_t> mode = {}) const {
    check(x, sigma);
    if (mode) return component(*mode, x, sigma, nullptr);
    const std::size_t K = spec_.modes();
    std::vector<double> lp(K);
    for (std::size_t k = 0; k < K; ++k) lp[k] = component(k, x, sigma, nullptr) + std::log(spec_.weights[k]);
    const double mx = *std::max_element(lp.begin(), lp.end());
    double z = 0.0;
    for (double e : lp) z += std::exp(e - mx);
    return mx + std::log(z);
  }

  template <class T>
  std::vector<T> noised_score(const std::vector<T>& x, double sigma, std::optional<std::size_t> mode = {}) const {
    Eigen::VectorXd s = noised_score(to_eigen(x), sigma, mode);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(s(static_cast<Eigen::Index>(i)));
    return out;
  }

  // Mixture log-density of a complete clean sequence.
  template <class T>
  double oracle_loglik(const LatentSequence<T>& seq) const {
    if (seq.frames.size() != spec_.dim()) throw ShapeError("oracle_loglik", {Shape{seq.frames.size()}, Shape{spec_.dim()}});
    return log_density(to_eigen(seq.frames), 0.0);
  }

  template <class T>
  static Eigen::VectorXd to_eigen(const std::vector<T>& x) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) v(static_cast<Eigen::Index>(i)) = static_cast<double>(x[i]);
    return v;
  }

 private:
  void check(const Eigen::VectorXd& x, double sigma) const {
    if (static_cast<std::size_t>(x.size()) != spec_.dim())
      throw ShapeError("noised_score", {Shape{static_cast<std::size_t>(x.size())}, Shape{spec_.dim()}});
    if (!(sigma >= 0.0 && sigma <= 1.0)) throw Error("noised_score: sigma outside [0,1]");
  }

  WorldSpec spec_;
  std::vector<Eigen::VectorXd> means_;
  std::vector<Eigen::MatrixXd> covs_;
  std::vector<Eigen::MatrixXd> U_;
  std::vector<Eigen::VectorXd> lam_;
};

// ---- reward --------------------------------------------------------------------

struct RewardWeights {
  double align = 0.25;
  double smooth = 0.1;
  double magnitude = 0.1;
  double smooth_scale = 1.0;      // s0 in -msd / (msd + s0)
  double magnitude_scale = 0.25;  // m0 in tanh(mean step / m0)

  bool operator==(const RewardWeights&) const = default;
};

template <class T>
struct RewardTerms {
  DiffArray<T> align, smooth, magnitude, total;
};

// X is [frames, d]. Terms that need more frames than provided contribute zero.
template <class T>
RewardTerms<T> reward_terms(const DiffArray<T>& X, const Condition& cond, const RewardWeights& w) {
  if (w.align < 0 || w.smooth < 0 || w.magnitude < 0) throw ConfigError("reward: weights must be non-negative");
  if (X.shape().size() != 2 || X.cols() != cond.direction.size())
    throw ShapeError("reward", {X.shape(), Shape{cond.direction.size()}});
  Tape<T>& tape = X.tape();
  const std::size_t F = X.rows(), d = X.cols();
  RewardTerms<T> r;
  r.align = tape.scalar_constant(T(0));
  r.smooth = tape.scalar_constant(T(0));
  r.magnitude = tape.scalar_constant(T(0));
  if (F >= 2) {
    std::vector<T> dir(d);
    for (std::size_t i = 0; i < d; ++i) dir[i] = static_cast<T>(cond.direction[i]);
    auto disp = sub(slice_rows(X, F - 1, F), slice_rows(X, 0, 1));
    auto dot = sum(mul(disp, tape.constant(Shape{1, d}, dir)));
    auto nrm = sqrt(add_scalar(sq_norm(disp), T(1e-12)));
    r.align = div(dot, nrm);

    auto step = sub(slice_rows(X, 1, F), slice_rows(X, 0, F - 1));
    auto dist = sqrt(add_scalar(sum_rows(mul(step, step)), T(1e-12)));
    r.magnitude = tanh(scale(mean(dist), T(1) / static_cast<T>(w.magnitude_scale)));
  }
  if (F >= 3) {
    auto d2 = add(sub(slice_rows(X, 2, F), scale(slice_rows(X, 1, F - 1), T(2))), slice_rows(X, 0, F - 2));
    auto msd = mean(sum_rows(mul(d2, d2)));
    r.smooth = scale(div(msd, add_scalar(msd, static_cast<T>(w.smooth_scale))), T(-1));
  }
  r.total = add(add(scale(r.align, static_cast<T>(w.align)), scale(r.smooth, static_cast<T>(w.smooth))),
                scale(r.magnitude, static_cast<T>(w.magnitude)));
  return r;
}

template <class T>
DiffArray<T> reward(const DiffArray<T>& X, const Condition& cond, const RewardWeights& w) {
  return reward_terms(X, cond, w).total;
}

template <class T>
T reward_value(const std::vector<T>& frames, std::size_t d, const Condition& cond, const RewardWeights& w) {
  Tape<T> tape(false);
  auto X = tape.constant(Shape{frames.size() / d, d}, frames);
  return reward(X, cond, w).item();
}

}  // namespace arfn
