#pragma once

// Numerical self-checks shared by the CLI and the test suites: reverse-mode gradients against central
// differences for every op, and cached chunk forwards against full recomputation.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "arfn/denoiser.hpp"
#include "arfn/diffnum.hpp"
#include "arfn/refiner.hpp"
#include "arfn/rng.hpp"

namespace arfn {

struct FdCase {
  std::string name;
  Shape shape;
  bool positive = false;  // inputs drawn away from zero
  std::function<DiffArray<double>(Tape<double>&, const DiffArray<double>&, Rng&)> fn;
};

struct FdReport {
  std::string name;
  std::size_t points = 0;
  double worst = 0;
};

namespace detail {

inline DiffArray<double> rand_const(Tape<double>& t, Shape s, Rng& r) {
  return t.constant(s, r.normals<double>(numel(s)));
}

// Contracts y with fixed random weights so every output element reaches the loss with its own weight.
inline DiffArray<double> weigh(Tape<double>& t, const DiffArray<double>& y, Rng& r) {
  if (y.size() == 1) return sum(y);
  return sum(mul(y, rand_const(t, y.shape(), r)));
}

}  // namespace detail

// One case per op and operand position, plus a full denoiser forward against its cached context.
inline std::vector<FdCase> fd_cases() {
  using D = DiffArray<double>;
  using Tp = Tape<double>;
  using detail::rand_const;
  using detail::weigh;
  std::vector<FdCase> c;
  auto add_case = [&](std::string n, Shape s, auto f, bool pos = false) { c.push_back(FdCase{std::move(n), s, pos, f}); };
  const Shape m{4, 6};
  add_case("add", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, mul(add(x, rand_const(t, x.shape(), r)), x), r); });
  add_case("sub", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, mul(sub(rand_const(t, x.shape(), r), x), x), r); });
  add_case("mul", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, mul(x, rand_const(t, x.shape(), r)), r); });
  add_case("div.num", m, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, div(x, add_scalar(mul(rand_const(t, x.shape(), r), rand_const(t, x.shape(), r)), 2.0)), r);
  });
  add_case("div.den", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, div(rand_const(t, x.shape(), r), x), r); }, true);
  add_case("scalar_mul.scalar", Shape{1}, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, mul(mul(x, rand_const(t, Shape{3, 5}, r)), x), r);
  });
  add_case("scalar_mul.tensor", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, mul(rand_const(t, Shape{1}, r), mul(x, x)), r); });
  add_case("scale", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, mul(scale(x, -1.7), x), r); });
  add_case("add_scalar", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, mul(add_scalar(x, 0.3), x), r); });
  add_case("add_row_bias.x", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, silu(add_row_bias(x, rand_const(t, Shape{6}, r))), r); });
  add_case("add_row_bias.b", Shape{6}, [](Tp& t, const D& x, Rng& r) { return weigh(t, silu(add_row_bias(rand_const(t, Shape{4, 6}, r), x)), r); });
  add_case("matmul.a", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, tanh(matmul(x, rand_const(t, Shape{6, 3}, r))), r); });
  add_case("matmul.b", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, tanh(matmul(rand_const(t, Shape{5, 4}, r), x)), r); });
  add_case("matmul_bt.a", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, tanh(matmul_bt(x, rand_const(t, Shape{3, 6}, r))), r); });
  add_case("matmul_bt.b", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, tanh(matmul_bt(rand_const(t, Shape{5, 6}, r), x)), r); });
  add_case("matmul_bt.self", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, matmul_bt(x, x), r); });
  add_case("concat_rows", m, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, silu(concat_rows<double>({rand_const(t, Shape{2, 6}, r), x, x})), r);
  });
  add_case("slice_rows", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, silu(slice_rows(x, 1, 3)), r); });
  add_case("concat_cols", m, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, silu(concat_cols<double>({x, rand_const(t, Shape{4, 2}, r), x})), r);
  });
  add_case("slice_cols", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, silu(slice_cols(x, 2, 5)), r); });
  add_case("sum", m, [](Tp& t, const D& x, Rng& r) { return mul(sum(mul(x, rand_const(t, x.shape(), r))), sum(x)); });
  add_case("mean", m, [](Tp& t, const D& x, Rng& r) { return mul(mean(mul(x, rand_const(t, x.shape(), r))), mean(x)); });
  add_case("sum_rows", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, tanh(sum_rows(x)), r); });
  add_case("softmax_rows", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, softmax_rows(x), r); });
  add_case("softmax_rows.masked", m, [](Tp& t, const D& x, Rng& r) {
    std::vector<std::uint8_t> mask(24, 1);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 2; j < 6; ++j) mask[i * 6 + j] = 0;
    return weigh(t, softmax_rows(x, &mask), r);
  });
  add_case("rmsnorm_rows.x", m, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, rmsnorm_rows(x, add_scalar(rand_const(t, Shape{6}, r), 1.0), 1e-6), r);
  });
  add_case("rmsnorm_rows.gain", Shape{6}, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, rmsnorm_rows(rand_const(t, Shape{4, 6}, r), x, 1e-6), r);
  });
  add_case("silu", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, silu(x), r); });
  add_case("tanh", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, tanh(x), r); });
  add_case("sqrt", m, [](Tp& t, const D& x, Rng& r) { return weigh(t, sqrt(add_scalar(mul(x, x), 0.5)), r); });
  add_case("sq_norm", m, [](Tp& t, const D& x, Rng& r) { return mul(sq_norm(x), sum(mul(x, rand_const(t, x.shape(), r)))); });
  add_case("rope", Shape{4, 8}, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, mul(rope(x, {-2, 0, 5, 11}, 4, 10000.0), x), r);
  });
  add_case("rope.odd_head", Shape{3, 6}, [](Tp& t, const D& x, Rng& r) {
    return weigh(t, mul(rope(x, {1, 2, 3}, 3, 100.0), x), r);
  });
  add_case("denoiser.chunk", Shape{3, 4}, [](Tp& t, const D& x, Rng& r) {
    DenoiserConfig cfg;
    cfg.frame_dim = 4;
    cfg.chunk_frames = 3;
    cfg.cond_dim = 5;
    cfg.width = 8;
    cfg.time_dim = 4;
    static thread_local DenoiserParams<double> p = init_denoiser<double>(cfg, 11);
    Denoiser<double> net(ModelView<double>{.base = &p});
    KVCache<double> cache;
    net.begin(cache, r.normals<double>(5));
    net.append_history(cache, r.normals<double>(12), 0);
    return weigh(t, net.forward(t, x, 0.6, cache, 3), r);
  });
  return c;
}

// Runs every case at `points` random inputs; the reported error is max |a - c| / (|a| + |c| + floor).
inline std::vector<FdReport> finite_difference_suite(std::uint64_t seed, std::size_t points = 3, double step = 1e-5,
                                                     double floor = 1e-6) {
  std::vector<FdReport> out;
  const auto cases = fd_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const auto& cs = cases[ci];
    FdReport rep{cs.name, 0, 0.0};
    for (std::size_t p = 0; p < points; ++p) {
      Rng pr(stream_id(seed, ci, p, StreamRole::eval, 1));
      auto x = pr.normals<double>(numel(cs.shape));
      if (cs.positive)
        for (auto& v : x) v = (v < 0 ? -1.0 : 1.0) * (0.5 + std::abs(v));
      const std::uint64_t cseed = stream_id(seed, ci, p, StreamRole::eval, 2);
      auto f = [&](Tape<double>& t, const DiffArray<double>& xv) {
        Rng r(cseed);
        return cs.fn(t, xv, r);
      };
      rep.worst = std::max(rep.worst, finite_diff_check<double>(f, x, step, floor, cs.shape));
      ++rep.points;
    }
    out.push_back(rep);
  }
  return out;
}

struct KvReport {
  double history = 0;          // denoiser chunk forward with cached history
  double reflect = 0;          // refiner forward with history and reflect block
  double rope_offset = 0;      // attention scores under a shared position shift
  double incremental = 0;      // appending chunk by chunk vs one recomputed prefix
};

namespace detail {

// Reference mask: cached blocks attend themselves and earlier blocks; the query block sees everything.
inline std::vector<std::uint8_t> block_causal_mask(const std::vector<std::size_t>& block_of, std::size_t query_block) {
  const std::size_t n = block_of.size();
  std::vector<std::uint8_t> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m[i * n + j] = block_of[i] == query_block ? 1 : (block_of[j] <= block_of[i] ? 1 : 0);
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff", {Shape{a.size()}, Shape{b.size()}});
  double w = 0;
  for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
  return w;
}

}  // namespace detail

inline KvReport kv_cache_suite(std::uint64_t seed) {
  DenoiserConfig cfg;
  cfg.cond_dim = 11;
  const std::size_t c = cfg.chunk_frames, d = cfg.frame_dim, ce = c * d;
  auto base = init_denoiser<double>(cfg, seed);
  auto ref = init_refiner(base, 4, 4.0, seed + 1);
  Rng r(stream_id(seed, 0, 0, StreamRole::eval, 3));
  // non-zero adapters and head so the refiner path differs from the base
  ref.visit([&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.data) v = 0.2 * r.normal();
  });
  const auto cond = r.normals<double>(cfg.cond_dim);
  const std::size_t nh = 3;
  std::vector<std::vector<double>> hist;
  for (std::size_t i = 0; i < nh; ++i) hist.push_back(r.normals<double>(ce));
  const auto x = r.normals<double>(ce);
  const auto x0 = r.normals<double>(ce);
  const double sigma = 0.7;
  KvReport rep;

  auto reference = [&](const Denoiser<double>& net, bool with_reflect) {
    Tape<double> t(false);
    std::vector<double> frames, sig;
    std::vector<std::int64_t> pos;
    std::vector<std::size_t> block;
    auto push = [&](const std::vector<double>& f, double s, std::int64_t p0, std::size_t b) {
      frames.insert(frames.end(), f.begin(), f.end());
      for (std::size_t k = 0; k < c; ++k) {
        sig.push_back(s);
        pos.push_back(p0 + static_cast<std::int64_t>(k));
        block.push_back(b);
      }
    };
    for (std::size_t i = 0; i < nh; ++i) push(hist[i], 0.0, static_cast<std::int64_t>(i * c), i);
    const auto q0 = static_cast<std::int64_t>(nh * c);
    if (with_reflect) push(x0, 0.0, q0, nh);
    push(x, sigma, q0, nh + 1);
    const std::size_t n = block.size();
    auto out = net.forward_sequence(t, t.constant(Shape{n, d}, frames), sig, pos,
                                    detail::block_causal_mask(block, nh + 1), cond);
    return slice_rows(out, n - c, n).to_vector();
  };

  {
    Denoiser<double> net(ModelView<double>{.base = &base});
    KVCache<double> cache;
    net.begin(cache, cond);
    for (std::size_t i = 0; i < nh; ++i) net.append_history(cache, hist[i], static_cast<std::int64_t>(i * c));
    const auto cached = net.forward_values(x, sigma, cache, static_cast<std::int64_t>(nh * c));
    rep.history = detail::max_abs_diff(cached, reference(net, false));

    // same history appended again after a reflect block was set and dropped
    KVCache<double> c2;
    net.begin(c2, cond);
    for (std::size_t i = 0; i < nh; ++i) {
      net.set_reflect(c2, x0, static_cast<std::int64_t>(i * c));
      net.append_history(c2, hist[i], static_cast<std::int64_t>(i * c));
    }
    rep.incremental = detail::max_abs_diff(net.forward_values(x, sigma, c2, static_cast<std::int64_t>(nh * c)), cached);
  }
  {
    Refiner<double> refiner(base, ref, false);
    ReflectiveContext<double> ctx;
    refiner.begin(ctx, cond, ContextFlags{true, true});
    for (std::size_t i = 0; i < nh; ++i) refiner.append_history(ctx, hist[i], static_cast<std::int64_t>(i * c));
    const auto q0 = static_cast<std::int64_t>(nh * c);
    refiner.set_reflect(ctx, x0, q0);
    const auto cached = refiner.refine_values(x, sigma, ctx, q0, true);
    rep.reflect = detail::max_abs_diff(cached, reference(refiner.net(), true));
  }
  {
    // q.k after rotation depends on positions only through their difference
    Tape<double> t(false);
    const auto qv = r.normals<double>(4 * 8), kv = r.normals<double>(4 * 8);
    auto scores = [&](std::int64_t off) {
      std::vector<std::int64_t> p{0 + off, 3 + off, 4 + off, 9 + off};
      return matmul_bt(rope(t.constant(Shape{4, 8}, qv), p, 8, 10000.0), rope(t.constant(Shape{4, 8}, kv), p, 8, 10000.0))
          .to_vector();
    };
    rep.rope_offset = detail::max_abs_diff(scores(0), scores(17));
  }
  return rep;
}

}  // namespace arfn
