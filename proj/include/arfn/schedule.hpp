#pragma once

#include <cstddef>
#include <vector>

#include "arfn/diffnum.hpp"
#include "arfn/errors.hpp"

namespace arfn {

// sigma[0] is the first (noisiest) sampling step. Step index j in 1..T maps to sigma[T - j].
struct NoiseSchedule {
  std::vector<int> raw_steps;
  std::vector<double> sigma;
  double shift = 1.0;
  int t_max = 1000;

  std::size_t size() const { return sigma.size(); }
  double sigma_at(std::size_t j) const { return sigma.at(sigma.size() - j); }
  int raw_at(std::size_t j) const { return raw_steps.at(raw_steps.size() - j); }
  // Step index j of a raw timestep, 0 if absent.
  std::size_t index_of_raw(int raw) const {
    for (std::size_t k = 0; k < raw_steps.size(); ++k)
      if (raw_steps[k] == raw) return raw_steps.size() - k;
    return 0;
  }
};

inline double shift_sigma(double s_raw, double shift) { return shift * s_raw / (1.0 + (shift - 1.0) * s_raw); }

inline NoiseSchedule from_raw_steps(const std::vector<int>& raw_steps, double shift, int t_max = 1000) {
  if (!(shift > 0.0)) throw ConfigError("schedule: shift must be positive");
  if (raw_steps.empty()) throw ConfigError("schedule: no steps");
  if (raw_steps.front() != t_max) throw ConfigError("schedule: first step must equal t_max");
  for (std::size_t k = 0; k < raw_steps.size(); ++k) {
    if (raw_steps[k] <= 0 || raw_steps[k] > t_max) throw ConfigError("schedule: step outside (0, t_max]");
    if (k && raw_steps[k] >= raw_steps[k - 1]) throw ConfigError("schedule: steps must strictly descend");
  }
  NoiseSchedule s;
  s.raw_steps = raw_steps;
  s.shift = shift;
  s.t_max = t_max;
  for (int r : raw_steps) {
    const double sr = static_cast<double>(r) / t_max;
    s.sigma.push_back(r == t_max ? 1.0 : shift_sigma(sr, shift));
  }
  return s;
}

// (1 - sigma) x0 + sigma eps
template <class T>
std::vector<T> forward_diffuse(const std::vector<T>& x0, const std::vector<T>& eps, T sigma) {
  if (x0.size() != eps.size()) throw ShapeError("forward_diffuse", {Shape{x0.size()}, Shape{eps.size()}});
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = (T(1) - sigma) * x0[i] + sigma * eps[i];
  return out;
}

template <class T>
DiffArray<T> forward_diffuse(const DiffArray<T>& x0, const DiffArray<T>& eps, T sigma) {
  if (x0.shape() != eps.shape()) throw ShapeError("forward_diffuse", {x0.shape(), eps.shape()});
  return add(scale(x0, T(1) - sigma), scale(eps, sigma));
}

// x + sigma v
template <class T>
std::vector<T> predict_clean(const std::vector<T>& x, const std::vector<T>& v, T sigma) {
  if (x.size() != v.size()) throw ShapeError("predict_clean", {Shape{x.size()}, Shape{v.size()}});
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + sigma * v[i];
  return out;
}

template <class T>
DiffArray<T> predict_clean(const DiffArray<T>& x, const DiffArray<T>& v, T sigma) {
  if (x.shape() != v.shape()) throw ShapeError("predict_clean", {x.shape(), v.shape()});
  return add(x, scale(v, sigma));
}

}  // namespace arfn
