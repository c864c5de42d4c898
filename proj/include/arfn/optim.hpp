#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "arfn/diffnum.hpp"
#include "arfn/errors.hpp"

namespace arfn {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool operator==(const AdamWConfig&) const = default;
};

template <class T, class P>
std::vector<Tensor<T>*> collect_params(P& params) {
  std::vector<Tensor<T>*> out;
  params.visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

// Adam moments with bias correction and weight decay applied directly to the weights.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  const std::vector<Tensor<T>*>& params() const { return params_; }
  std::size_t steps_taken() const { return t_; }
  AdamWConfig& config() { return cfg_; }

  void step(const std::vector<std::vector<T>>& grads) {
    if (grads.size() != params_.size())
      throw ShapeError("optimizer_step", {Shape{params_.size()}, Shape{grads.size()}}, "parameter count");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (grads[i].size() != params_[i]->size() || m_[i].size() != params_[i]->size())
        throw ShapeError("optimizer_step", {params_[i]->shape, Shape{grads[i].size()}, Shape{m_[i].size()}});
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i]->data;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = static_cast<double>(grads[i][k]);
        double p = static_cast<double>(w[k]);
        p -= cfg_.lr * cfg_.weight_decay * p;
        m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
        v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m_[i][k] / bc1, vh = v_[i][k] / bc2;
        p -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        w[k] = static_cast<T>(p);
      }
    }
  }

 private:
  std::vector<Tensor<T>*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

template <class T>
void optimizer_step(AdamW<T>& opt, const std::vector<std::vector<T>>& grads) {
  opt.step(grads);
}

}  // namespace arfn
