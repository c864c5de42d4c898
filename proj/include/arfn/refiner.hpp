#pragma once

// Noise refiner: the base denoiser's forward path with its own LoRA adapters and a zero-initialised
// output head. Its context holds clean history plus the latest clean estimate at the query positions.

#include <cstdint>
#include <vector>

#include "arfn/denoiser.hpp"

namespace arfn {

template <class T>
struct RefinerParams {
  LoraSet<T> lora;
  Linear<T> head;

  template <class F>
  void visit(F&& f) {
    lora.visit(f);
    f("head.W", head.W);
    f("head.b", head.b);
  }
  template <class F>
  void visit(F&& f) const {
    lora.visit(f);
    f("head.W", head.W);
    f("head.b", head.b);
  }
};

template <class T>
RefinerParams<T> init_refiner(const DenoiserParams<T>& base, std::size_t rank, double alpha, std::uint64_t seed) {
  RefinerParams<T> r;
  r.lora = make_lora(base, rank, alpha, seed);
  r.head.W = Tensor<T>(Shape{base.cfg.frame_dim, base.cfg.width});
  r.head.b = Tensor<T>(Shape{base.cfg.frame_dim});
  return r;
}

struct ContextFlags {
  bool history = true;
  bool reflect = true;
  bool operator==(const ContextFlags&) const = default;
};

// Reflective KV cache for one rollout: condition prefix, history under the refiner's weights, and the
// reflect block rebuilt at every denoising step.
template <class T>
struct ReflectiveContext {
  KVCache<T> cache;
  ContextFlags flags;
  T sigma = T(1);
};

template <class T>
class Refiner {
 public:
  Refiner(const DenoiserParams<T>& base, const RefinerParams<T>& params, bool trainable = false)
      : params_(&params),
        net_(ModelView<T>{&base, false, &params.lora, trainable, &params.head, trainable}) {}

  const Denoiser<T>& net() const { return net_; }
  const RefinerParams<T>& params() const { return *params_; }

  void begin(ReflectiveContext<T>& ctx, const std::vector<T>& cond, ContextFlags flags) const {
    ctx.flags = flags;
    net_.begin(ctx.cache, cond);
  }

  void append_history(ReflectiveContext<T>& ctx, const std::vector<T>& clean, std::int64_t pos0) const {
    if (ctx.flags.history)
      net_.append_history(ctx.cache, clean, pos0);
    else
      ctx.cache.drop(CacheRole::reflect);
  }

  void set_reflect(ReflectiveContext<T>& ctx, const std::vector<T>& x0, std::int64_t pos0) const {
    if (ctx.flags.reflect) net_.set_reflect(ctx.cache, x0, pos0);
  }

  // Residual for the noise chunk eps at sigma. require_reflect rejects a context missing its reflect block.
  DiffArray<T> refine(Tape<T>& tape, const DiffArray<T>& eps, T sigma, const ReflectiveContext<T>& ctx,
                      std::int64_t pos0, bool require_reflect) const {
    if (require_reflect && ctx.flags.reflect) {
      const std::size_t n = eps.rows();
      std::size_t found = 0;
      for (std::size_t i = 0; i < ctx.cache.size(); ++i)
        if (ctx.cache.roles[i] == CacheRole::reflect) {
          if (ctx.cache.positions[i] < pos0 || ctx.cache.positions[i] >= pos0 + static_cast<std::int64_t>(n))
            throw Error("refine: reflect block positions differ from the noise positions");
          ++found;
        }
      if (found != n) throw Error("refine: missing reflect block");
    }
    return net_.forward(tape, eps, sigma, ctx.cache, pos0);
  }

  std::vector<T> refine_values(const std::vector<T>& eps, T sigma, const ReflectiveContext<T>& ctx, std::int64_t pos0,
                               bool require_reflect) const {
    Tape<T> tape(false);
    const std::size_t d = net_.config().frame_dim;
    return refine(tape, tape.constant(Shape{eps.size() / d, d}, eps), sigma, ctx, pos0, require_reflect).to_vector();
  }

 private:
  const RefinerParams<T>* params_;
  Denoiser<T> net_;
};

// 0.5 * sum(delta^2); equals KL(N(delta, I) || N(0, I)).
template <class T>
DiffArray<T> regularizer(const DiffArray<T>& delta) {
  return scale(sq_norm(delta), T(0.5));
}

template <class T>
T regularizer(const std::vector<T>& delta) {
  T s = T(0);
  for (T e : delta) s += e * e;
  return T(0.5) * s;
}

}  // namespace arfn
