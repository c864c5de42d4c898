#pragma once

// Causal chunk transformer. One token per latent frame, condition as two prefix tokens at
// positions -2 and -1, rotary positions per frame, timestep embedding added to every token.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "arfn/diffnum.hpp"
#include "arfn/errors.hpp"
#include "arfn/rng.hpp"

namespace arfn {

struct DenoiserConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t width = 32;
  std::size_t mlp_mult = 2;
  std::size_t time_dim = 16;
  std::size_t frame_dim = 8;
  std::size_t chunk_frames = 3;
  std::size_t cond_dim = 11;
  std::size_t max_frames = 64;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return width / heads; }

  void validate() const {
    if (!layers || !heads || !width || !frame_dim || !chunk_frames || !cond_dim || !time_dim || !mlp_mult)
      throw ConfigError("denoiser: zero extent");
    if (width % heads) throw ConfigError("denoiser: width must be divisible by heads");
    if (time_dim % 2) throw ConfigError("denoiser: time embedding dim must be even");
  }
  bool operator==(const DenoiserConfig&) const = default;
};

template <class T>
struct Linear {
  Tensor<T> W;  // [out, in]
  Tensor<T> b;  // [out] or empty
  bool has_bias() const { return b.size() > 0; }
  std::size_t in() const { return W.shape[1]; }
  std::size_t out() const { return W.shape[0]; }
};

enum LoraSlot : std::size_t { slot_q, slot_k, slot_v, slot_o, slot_f1, slot_f2, n_lora_slots };
inline const char* lora_slot_name(std::size_t s) {
  static const char* names[] = {"q", "k", "v", "o", "f1", "f2"};
  return names[s];
}

template <class T>
struct Block {
  Tensor<T> g1, g2;
  std::array<Linear<T>, n_lora_slots> lin;  // q, k, v, o, f1, f2
};

template <class T>
struct DenoiserParams {
  DenoiserConfig cfg;
  Linear<T> inp, temb, cond0, cond1;
  std::vector<Block<T>> blocks;
  Tensor<T> gf;
  Linear<T> head;

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    auto lin = [&](const std::string& n, auto& l) {
      f(n + ".W", l.W);
      if (l.has_bias()) f(n + ".b", l.b);
    };
    lin("inp", s.inp);
    lin("temb", s.temb);
    lin("cond0", s.cond0);
    lin("cond1", s.cond1);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      f(p + "g1", s.blocks[i].g1);
      f(p + "g2", s.blocks[i].g2);
      for (std::size_t k = 0; k < n_lora_slots; ++k) lin(p + lora_slot_name(k), s.blocks[i].lin[k]);
    }
    f("gf", s.gf);
    lin("head", s.head);
  }
};

namespace detail {
template <class T>
Linear<T> make_linear(std::size_t in, std::size_t out, bool bias, Rng& rng) {
  Linear<T> l;
  l.W = Tensor<T>(Shape{out, in});
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& e : l.W.data) e = static_cast<T>(sd * rng.normal());
  if (bias) l.b = Tensor<T>(Shape{out});
  return l;
}
template <class T>
Tensor<T> ones(std::size_t n) {
  Tensor<T> t(Shape{n});
  std::fill(t.data.begin(), t.data.end(), T(1));
  return t;
}
}  // namespace detail

template <class T>
DenoiserParams<T> init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(stream_id(seed, 0, 0, StreamRole::init_params));
  const std::size_t w = cfg.width, hidden = cfg.mlp_mult * w;
  DenoiserParams<T> p;
  p.cfg = cfg;
  p.inp = detail::make_linear<T>(cfg.frame_dim, w, true, rng);
  p.temb = detail::make_linear<T>(cfg.time_dim, w, true, rng);
  p.cond0 = detail::make_linear<T>(cfg.cond_dim, w, true, rng);
  p.cond1 = detail::make_linear<T>(cfg.cond_dim, w, true, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Block<T> b;
    b.g1 = detail::ones<T>(w);
    b.g2 = detail::ones<T>(w);
    for (std::size_t s = slot_q; s <= slot_o; ++s) b.lin[s] = detail::make_linear<T>(w, w, false, rng);
    b.lin[slot_f1] = detail::make_linear<T>(w, hidden, true, rng);
    b.lin[slot_f2] = detail::make_linear<T>(hidden, w, true, rng);
    p.blocks.push_back(std::move(b));
  }
  p.gf = detail::ones<T>(w);
  p.head = detail::make_linear<T>(w, cfg.frame_dim, true, rng);
  return p;
}

// ---- LoRA ------------------------------------------------------------------------

template <class T>
struct LoraAdapter {
  Tensor<T> A;  // [r, in]
  Tensor<T> B;  // [out, r]
  T scale = T(1);
};

template <class T>
struct LoraSet {
  std::size_t rank = 0;
  double alpha = 0.0;
  std::vector<std::array<LoraAdapter<T>, n_lora_slots>> blocks;

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
      for (std::size_t k = 0; k < n_lora_slots; ++k) {
        const std::string p = "block" + std::to_string(i) + "." + lora_slot_name(k);
        f(p + ".A", s.blocks[i][k].A);
        f(p + ".B", s.blocks[i][k].B);
      }
  }
};

// Down-projections random, up-projections zero: the adapted model starts equal to the base.
template <class T>
LoraSet<T> make_lora(const DenoiserParams<T>& base, std::size_t rank, double alpha, std::uint64_t seed) {
  if (rank == 0) throw ConfigError("lora: rank must be positive");
  Rng rng(stream_id(seed, 1, 0, StreamRole::init_params));
  LoraSet<T> s;
  s.rank = rank;
  s.alpha = alpha;
  for (const auto& blk : base.blocks) {
    std::array<LoraAdapter<T>, n_lora_slots> a;
    for (std::size_t k = 0; k < n_lora_slots; ++k) {
      const std::size_t in = blk.lin[k].in(), out = blk.lin[k].out();
      a[k].A = Tensor<T>(Shape{rank, in});
      const double sd = 1.0 / std::sqrt(static_cast<double>(in));
      for (auto& e : a[k].A.data) e = static_cast<T>(sd * rng.normal());
      a[k].B = Tensor<T>(Shape{out, rank});
      a[k].scale = static_cast<T>(alpha / static_cast<double>(rank));
    }
    s.blocks.push_back(std::move(a));
  }
  return s;
}

template <class T>
void check_lora(const DenoiserParams<T>& base, const LoraSet<T>& lora) {
  if (lora.blocks.size() != base.blocks.size())
    throw ShapeError("attach_lora", {Shape{base.blocks.size()}, Shape{lora.blocks.size()}}, "layer count");
  for (std::size_t i = 0; i < base.blocks.size(); ++i)
    for (std::size_t k = 0; k < n_lora_slots; ++k) {
      const auto& W = base.blocks[i].lin[k].W;
      const auto& a = lora.blocks[i][k];
      if (a.A.shape.size() != 2 || a.B.shape.size() != 2 || a.A.shape[1] != W.shape[1] ||
          a.B.shape[0] != W.shape[0] || a.A.shape[0] != a.B.shape[1])
        throw ShapeError("attach_lora", {W.shape, a.A.shape, a.B.shape});
    }
}

// ---- KV cache ---------------------------------------------------------------------

enum class CacheRole : std::uint8_t { condition, history, reflect };

template <class T>
struct KVCache {
  std::size_t width = 0;
  std::vector<std::vector<T>> K, V;  // per layer, [size, width], keys already rotated
  std::vector<std::int64_t> positions;
  std::vector<CacheRole> roles;
  std::int64_t history_end = 0;  // next history position

  std::size_t size() const { return positions.size(); }
  std::size_t count(CacheRole r) const { return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), r)); }

  void reset(std::size_t layers, std::size_t w) {
    width = w;
    K.assign(layers, {});
    V.assign(layers, {});
    positions.clear();
    roles.clear();
    history_end = 0;
  }

  void append(CacheRole role, const std::vector<std::int64_t>& pos, const std::vector<std::vector<T>>& k,
              const std::vector<std::vector<T>>& v) {
    for (std::size_t l = 0; l < K.size(); ++l) {
      K[l].insert(K[l].end(), k[l].begin(), k[l].end());
      V[l].insert(V[l].end(), v[l].begin(), v[l].end());
    }
    positions.insert(positions.end(), pos.begin(), pos.end());
    roles.insert(roles.end(), pos.size(), role);
  }

  void drop(CacheRole role) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < roles.size(); ++i)
      if (roles[i] != role) keep.push_back(i);
    if (keep.size() == roles.size()) return;
    for (std::size_t l = 0; l < K.size(); ++l) {
      std::vector<T> nk, nv;
      for (std::size_t i : keep) {
        nk.insert(nk.end(), K[l].begin() + static_cast<std::ptrdiff_t>(i * width),
                  K[l].begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
        nv.insert(nv.end(), V[l].begin() + static_cast<std::ptrdiff_t>(i * width),
                  V[l].begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
      }
      K[l] = std::move(nk);
      V[l] = std::move(nv);
    }
    std::vector<std::int64_t> np;
    std::vector<CacheRole> nr;
    for (std::size_t i : keep) {
      np.push_back(positions[i]);
      nr.push_back(roles[i]);
    }
    positions = std::move(np);
    roles = std::move(nr);
  }
};

// ---- forward ----------------------------------------------------------------------

// Which tensors a forward reads and which of them collect gradient.
template <class T>
struct ModelView {
  const DenoiserParams<T>* base = nullptr;
  bool base_trainable = false;
  const LoraSet<T>* lora = nullptr;
  bool lora_trainable = false;
  const Linear<T>* head = nullptr;  // replaces base->head when set
  bool head_trainable = false;
};

template <class T>
std::vector<T> timestep_features(T sigma, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> f(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const T freq = std::exp(-std::log(T(10000)) * static_cast<T>(i) / static_cast<T>(half));
    const T a = T(1000) * sigma * freq;
    f[i] = std::sin(a);
    f[half + i] = std::cos(a);
  }
  return f;
}

template <class T>
class Denoiser {
 public:
  explicit Denoiser(ModelView<T> view) : v_(view) {
    if (!v_.base) throw Error("denoiser: no base parameters");
    if (v_.lora) check_lora(*v_.base, *v_.lora);
  }

  const DenoiserConfig& config() const { return v_.base->cfg; }
  const ModelView<T>& view() const { return v_; }

  // Clears the cache and stores the condition prefix.
  void begin(KVCache<T>& cache, const std::vector<T>& cond) const {
    const auto& cfg = config();
    if (cond.size() != cfg.cond_dim) throw ShapeError("denoiser.begin", {Shape{cond.size()}, Shape{cfg.cond_dim}});
    cache.reset(cfg.layers, cfg.width);
    Tape<T> tape(false);
    auto h = cond_tokens(tape, tape.constant(Shape{1, cfg.cond_dim}, cond));
    std::vector<std::vector<T>> k, v;
    run_blocks(tape, h, {-2, -1}, nullptr, nullptr, &k, &v);
    cache.append(CacheRole::condition, {-2, -1}, k, v);
  }

  // Output for the c query frames at positions pos0.. attending to every cached token and to each other.
  DiffArray<T> forward(Tape<T>& tape, const DiffArray<T>& x, T sigma, const KVCache<T>& cache,
                       std::int64_t pos0) const {
    check_chunk("forward", x);
    if (pos0 < cache.history_end)
      throw Error("forward: query position " + std::to_string(pos0) + " overlaps cached history ending at " +
                  std::to_string(cache.history_end));
    const std::size_t n = x.rows();
    auto h = embed(tape, x, std::vector<T>(n, sigma));
    auto out = run_blocks(tape, h, chunk_positions(pos0, n), &cache, nullptr, nullptr, nullptr);
    return output(tape, out);
  }

  std::vector<T> forward_values(const std::vector<T>& x, T sigma, const KVCache<T>& cache, std::int64_t pos0) const {
    Tape<T> tape(false);
    return forward(tape, tape.constant(Shape{x.size() / config().frame_dim, config().frame_dim}, x), sigma, cache,
                   pos0)
        .to_vector();
  }

  void append_history(KVCache<T>& cache, const std::vector<T>& clean, std::int64_t pos0) const {
    if (pos0 != cache.history_end)
      throw Error("append_history: positions must continue the history at " + std::to_string(cache.history_end) +
                  ", got " + std::to_string(pos0));
    cache.drop(CacheRole::reflect);
    const std::size_t n = append_block(cache, clean, pos0, CacheRole::history);
    cache.history_end = pos0 + static_cast<std::int64_t>(n);
  }

  // Replaces the reflect block with the clean estimate placed at the query positions.
  void set_reflect(KVCache<T>& cache, const std::vector<T>& x0, std::int64_t pos0) const {
    cache.drop(CacheRole::reflect);
    append_block(cache, x0, pos0, CacheRole::reflect);
  }

  // Full recomputation without a cache: condition tokens first, then frames with per-row sigma and
  // position. mask is [n, n] over frame tokens (nonzero = may attend); condition tokens are always visible.
  DiffArray<T> forward_sequence(Tape<T>& tape, const DiffArray<T>& X, const std::vector<T>& sigmas,
                                const std::vector<std::int64_t>& positions, const std::vector<std::uint8_t>& mask,
                                const std::vector<T>& cond) const {
    const auto& cfg = config();
    const std::size_t n = X.rows();
    if (X.shape().size() != 2 || X.cols() != cfg.frame_dim || sigmas.size() != n || positions.size() != n ||
        mask.size() != n * n)
      throw ShapeError("forward_sequence", {X.shape(), Shape{sigmas.size()}, Shape{positions.size()}, Shape{mask.size()}});
    auto h = concat_rows<T>({cond_tokens(tape, tape.constant(Shape{1, cfg.cond_dim}, cond)), embed(tape, X, sigmas)});
    std::vector<std::int64_t> pos{-2, -1};
    pos.insert(pos.end(), positions.begin(), positions.end());
    const std::size_t N = n + 2;
    std::vector<std::uint8_t> full(N * N, 0);
    for (std::size_t i = 0; i < N; ++i) {
      full[i * N] = full[i * N + 1] = 1;
      if (i >= 2)
        for (std::size_t j = 0; j < n; ++j) full[i * N + 2 + j] = mask[(i - 2) * n + j];
    }
    auto out = run_blocks(tape, h, pos, nullptr, &full, nullptr, nullptr);
    return output(tape, slice_rows(out, 2, N));
  }

 private:
  void check_chunk(const char* op, const DiffArray<T>& x) const {
    if (x.shape().size() != 2 || x.cols() != config().frame_dim || x.rows() == 0)
      throw ShapeError(op, {x.shape(), Shape{config().chunk_frames, config().frame_dim}}, "width mismatch");
  }

  static std::vector<std::int64_t> chunk_positions(std::int64_t pos0, std::size_t n) {
    std::vector<std::int64_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = pos0 + static_cast<std::int64_t>(i);
    return p;
  }

  std::size_t append_block(KVCache<T>& cache, const std::vector<T>& frames, std::int64_t pos0, CacheRole role) const {
    const auto& cfg = config();
    if (frames.size() % cfg.frame_dim) throw ShapeError("append", {Shape{frames.size()}, Shape{cfg.frame_dim}});
    const std::size_t n = frames.size() / cfg.frame_dim;
    if (pos0 < 0 || static_cast<std::size_t>(pos0) + n > cfg.max_frames)
      throw Error("append: position beyond max_frames");
    Tape<T> tape(false);
    auto h = embed(tape, tape.constant(Shape{n, cfg.frame_dim}, frames), std::vector<T>(n, T(0)));
    std::vector<std::vector<T>> k, v;
    const auto pos = chunk_positions(pos0, n);
    run_blocks(tape, h, pos, &cache, nullptr, &k, &v);
    cache.append(role, pos, k, v);
    return n;
  }

  DiffArray<T> lin(Tape<T>& tape, const DiffArray<T>& x, const Linear<T>& l, bool trainable,
                   const LoraAdapter<T>* ad = nullptr) const {
    auto y = matmul_bt(x, tape.param(l.W, trainable));
    if (l.has_bias()) y = add_row_bias(y, tape.param(l.b, trainable));
    if (ad) {
      auto low = matmul_bt(x, tape.param(ad->A, v_.lora_trainable));
      y = add(y, scale(matmul_bt(low, tape.param(ad->B, v_.lora_trainable)), ad->scale));
    }
    return y;
  }

  DiffArray<T> embed(Tape<T>& tape, const DiffArray<T>& X, const std::vector<T>& sigmas) const {
    const auto& cfg = config();
    const std::size_t n = X.rows();
    std::vector<T> feats;
    feats.reserve(n * cfg.time_dim);
    for (T s : sigmas) {
      auto f = timestep_features(s, cfg.time_dim);
      feats.insert(feats.end(), f.begin(), f.end());
    }
    auto te = lin(tape, tape.constant(Shape{n, cfg.time_dim}, std::move(feats)), v_.base->temb, v_.base_trainable);
    return add(lin(tape, X, v_.base->inp, v_.base_trainable), te);
  }

  DiffArray<T> cond_tokens(Tape<T>& tape, const DiffArray<T>& c) const {
    return concat_rows<T>({lin(tape, c, v_.base->cond0, v_.base_trainable), lin(tape, c, v_.base->cond1, v_.base_trainable)});
  }

  DiffArray<T> output(Tape<T>& tape, const DiffArray<T>& h) const {
    const auto& cfg = config();
    auto x = rmsnorm_rows(h, tape.param(v_.base->gf, v_.base_trainable), static_cast<T>(cfg.norm_eps));
    if (v_.head) return lin(tape, x, *v_.head, v_.head_trainable);
    return lin(tape, x, v_.base->head, v_.base_trainable);
  }

  // Queries h at positions pos attend to all of ctx (if any) followed by themselves under self_mask.
  DiffArray<T> run_blocks(Tape<T>& tape, DiffArray<T> h, const std::vector<std::int64_t>& pos, const KVCache<T>* ctx,
                          const std::vector<std::uint8_t>* self_mask, std::vector<std::vector<T>>* k_out,
                          std::vector<std::vector<T>>* v_out) const {
    const auto& cfg = config();
    const std::size_t nq = h.rows(), nc = ctx ? ctx->size() : 0, nk = nc + nq;
    const std::size_t hd = cfg.head_dim();
    const T eps = static_cast<T>(cfg.norm_eps);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<std::uint8_t> mask;
    if (self_mask) {
      mask.assign(nq * nk, 1);
      for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = 0; j < nq; ++j) mask[i * nk + nc + j] = (*self_mask)[i * nq + j];
    }
    if (k_out) k_out->clear();
    if (v_out) v_out->clear();
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& blk = v_.base->blocks[l];
      auto ad = [&](std::size_t s) -> const LoraAdapter<T>* { return v_.lora ? &v_.lora->blocks[l][s] : nullptr; };
      const bool bt = v_.base_trainable;
      auto x = rmsnorm_rows(h, tape.param(blk.g1, bt), eps);
      auto q = rope(lin(tape, x, blk.lin[slot_q], bt, ad(slot_q)), pos, hd, static_cast<T>(cfg.rope_base));
      auto k = rope(lin(tape, x, blk.lin[slot_k], bt, ad(slot_k)), pos, hd, static_cast<T>(cfg.rope_base));
      auto v = lin(tape, x, blk.lin[slot_v], bt, ad(slot_v));
      if (k_out) k_out->push_back(k.to_vector());
      if (v_out) v_out->push_back(v.to_vector());
      if (nc) {
        k = concat_rows<T>({tape.constant(Shape{nc, cfg.width}, ctx->K[l]), k});
        v = concat_rows<T>({tape.constant(Shape{nc, cfg.width}, ctx->V[l]), v});
      }
      std::vector<DiffArray<T>> heads;
      for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
        const std::size_t c0 = hh * hd, c1 = c0 + hd;
        auto qh = cfg.heads == 1 ? q : slice_cols(q, c0, c1);
        auto kh = cfg.heads == 1 ? k : slice_cols(k, c0, c1);
        auto vh = cfg.heads == 1 ? v : slice_cols(v, c0, c1);
        auto att = softmax_rows(scale(matmul_bt(qh, kh), inv_sqrt), self_mask ? &mask : nullptr);
        heads.push_back(matmul(att, vh));
      }
      auto a = cfg.heads == 1 ? heads[0] : concat_cols(heads);
      h = add(h, lin(tape, a, blk.lin[slot_o], bt, ad(slot_o)));
      x = rmsnorm_rows(h, tape.param(blk.g2, bt), eps);
      h = add(h, lin(tape, silu(lin(tape, x, blk.lin[slot_f1], bt, ad(slot_f1))), blk.lin[slot_f2], bt, ad(slot_f2)));
    }
    return h;
  }

  ModelView<T> v_;
};

}  // namespace arfn
