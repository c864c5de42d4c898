#pragma once

// Reverse-mode differentiation over an explicit tape of op records.
// Arrays are rank 0..2 (scalars, vectors, row-major matrices). Rows index frames/tokens.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "arfn/errors.hpp"

namespace arfn {

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size()) throw ShapeError("tensor", {shape, Shape{data.size()}});
  }
  std::size_t size() const { return data.size(); }
};

enum class OpKind : std::uint8_t {
  add,
  sub,
  mul,
  scalar_mul,
  scale,
  add_scalar,
  add_row_bias,
  matmul,
  matmul_bt,
  concat_rows,
  slice_rows,
  concat_cols,
  slice_cols,
  sum,
  mean,
  sum_rows,
  softmax_rows,
  rmsnorm_rows,
  silu,
  sq_norm,
  rope,
  tanh,
  sqrt,
  div,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_bt: return "matmul_bt";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_rows: return "sum_rows";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::rmsnorm_rows: return "rmsnorm_rows";
    case OpKind::silu: return "silu";
    case OpKind::sq_norm: return "sq_norm";
    case OpKind::rope: return "rope";
    case OpKind::tanh: return "tanh";
    case OpKind::sqrt: return "sqrt";
    case OpKind::div: return "div";
  }
  return "?";
}

template <class T>
class Tape;

template <class T>
class DiffArray {
 public:
  DiffArray() = default;
  DiffArray(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t tape_id() const { return id_; }
  const Shape& shape() const { return tape_->node(id_).shape; }
  std::size_t size() const { return tape_->node(id_).value.size(); }
  std::size_t rows() const { return shape().empty() ? 1 : shape()[0]; }
  std::size_t cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
  std::span<const T> values() const { return tape_->node(id_).value; }
  std::vector<T> to_vector() const { return tape_->node(id_).value; }
  T item() const { return tape_->node(id_).value.at(0); }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  // Zero when backward never reached this array.
  std::vector<T> grad() const {
    const auto& n = tape_->node(id_);
    return n.grad.empty() ? std::vector<T>(n.value.size(), T(0)) : n.grad;
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  struct Record {
    OpKind kind;
    std::vector<std::size_t> inputs;
    std::size_t output;
    T scalar = T(0);
    std::vector<std::int64_t> ints;
    std::vector<T> saved;
    std::vector<std::uint8_t> mask;
  };

  // A non-recording tape evaluates values only; nothing requires grad on it.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  bool consumed() const { return consumed_; }
  std::size_t record_count() const { return records_.size(); }
  std::size_t node_count() const { return nodes_.size(); }

  DiffArray<T> variable(Shape s, std::vector<T> v) { return leaf(std::move(s), std::move(v), record_); }
  DiffArray<T> constant(Shape s, std::vector<T> v) { return leaf(std::move(s), std::move(v), false); }
  DiffArray<T> scalar_constant(T v) { return leaf(Shape{}, {v}, false); }

  // One leaf per tensor per tape; repeated lookups return the same node.
  DiffArray<T> param(const Tensor<T>& t, bool trainable) {
    auto it = params_.find(&t);
    if (it != params_.end()) return DiffArray<T>(this, it->second);
    auto a = leaf(t.shape, t.data, trainable && record_);
    params_.emplace(&t, a.tape_id());
    return a;
  }

  // Gradient of a registered parameter; zeros when absent from this tape.
  std::vector<T> param_grad(const Tensor<T>& t) const {
    auto it = params_.find(&t);
    if (it == params_.end()) return std::vector<T>(t.size(), T(0));
    const auto& n = nodes_[it->second];
    return n.grad.empty() ? std::vector<T>(t.size(), T(0)) : n.grad;
  }
  bool has_param(const Tensor<T>& t) const { return params_.count(&t) != 0; }

  void backward(const DiffArray<T>& loss);

  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }

  std::size_t push_node(Shape s, bool rg) {
    Node n;
    n.value.assign(numel(s), T(0));
    n.shape = std::move(s);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }
  void push_record(Record r) { records_.push_back(std::move(r)); }

 private:
  DiffArray<T> leaf(Shape s, std::vector<T> v, bool rg) {
    if (numel(s) != v.size()) throw ShapeError("leaf", {s, Shape{v.size()}});
    Node n;
    n.shape = std::move(s);
    n.value = std::move(v);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return DiffArray<T>(this, nodes_.size() - 1);
  }

  void backprop(const Record& r);
  std::vector<T>* grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return &n.grad;
  }

  bool record_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<Record> records_;
  std::unordered_map<const Tensor<T>*, std::size_t> params_;
};

namespace detail {

template <class T>
Tape<T>& same_tape(const char* op, std::initializer_list<const DiffArray<T>*> xs) {
  Tape<T>* t = nullptr;
  for (auto* x : xs) {
    if (!x->valid()) throw Error(std::string(op) + ": invalid array");
    if (t && &x->tape() != t) throw Error(std::string(op) + ": operands live on different tapes");
    t = &x->tape();
  }
  return *t;
}

template <class T>
bool any_grad(std::initializer_list<const DiffArray<T>*> xs) {
  for (auto* x : xs)
    if (x->requires_grad()) return true;
  return false;
}

inline bool is_matrix(const Shape& s) { return s.size() == 2; }

template <class T>
struct Out {
  DiffArray<T> arr;
  bool rg;
  typename Tape<T>::Node* node;
};

template <class T>
Out<T> make_out(Tape<T>& tape, Shape s, bool rg) {
  std::size_t id = tape.push_node(std::move(s), rg && tape.recording());
  return {DiffArray<T>(&tape, id), rg && tape.recording(), &tape.node(id)};
}

template <class T>
void record(Tape<T>& tape, OpKind k, std::vector<std::size_t> in, std::size_t out, T scalar = T(0),
            std::vector<std::int64_t> ints = {}, std::vector<T> saved = {}, std::vector<std::uint8_t> mask = {}) {
  typename Tape<T>::Record r{k, std::move(in), out, scalar, std::move(ints), std::move(saved), std::move(mask)};
  tape.push_record(std::move(r));
}

// C[n,m] (+)= A[n,k] * B[k,m]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* c = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      const T* b = B + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += a * b[j];
    }
  }
}

// C[n,m] (+)= A[n,k] * B[m,k]^T
template <class T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = A + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const T* b = B + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      C[i * m + j] += s;
    }
  }
}

// C[k,m] (+)= A[n,k]^T * B[n,m]
template <class T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* b = B + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      T* c = C + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += a * b[j];
    }
  }
}

template <class T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

// ---- elementwise -------------------------------------------------------------

template <class T>
DiffArray<T> binary_same(OpKind k, const DiffArray<T>& a, const DiffArray<T>& b) {
  auto& tape = detail::same_tape<T>(op_name(k), {&a, &b});
  if (a.shape() != b.shape()) throw ShapeError(op_name(k), {a.shape(), b.shape()});
  auto o = detail::make_out(tape, a.shape(), detail::any_grad<T>({&a, &b}));
  auto av = a.values();
  auto bv = b.values();
  auto& ov = o.node->value;
  const std::size_t n = ov.size();
  switch (k) {
    case OpKind::add: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
    case OpKind::sub: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
    case OpKind::mul: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
    case OpKind::div: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i]; break;
    default: throw Error("binary_same: unsupported op");
  }
  if (o.rg) detail::record<T>(tape, k, {a.tape_id(), b.tape_id()}, o.arr.tape_id());
  return o.arr;
}

template <class T>
DiffArray<T> add(const DiffArray<T>& a, const DiffArray<T>& b) { return binary_same(OpKind::add, a, b); }
template <class T>
DiffArray<T> sub(const DiffArray<T>& a, const DiffArray<T>& b) { return binary_same(OpKind::sub, a, b); }
template <class T>
DiffArray<T> div(const DiffArray<T>& a, const DiffArray<T>& b) { return binary_same(OpKind::div, a, b); }

// Elementwise product; a single-element operand broadcasts over the other.
template <class T>
DiffArray<T> mul(const DiffArray<T>& a, const DiffArray<T>& b) {
  if (a.shape() == b.shape()) return binary_same(OpKind::mul, a, b);
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  if (!a_scalar && !b_scalar) throw ShapeError("mul", {a.shape(), b.shape()});
  const DiffArray<T>& s = a_scalar ? a : b;
  const DiffArray<T>& x = a_scalar ? b : a;
  auto& tape = detail::same_tape<T>("mul", {&s, &x});
  auto o = detail::make_out(tape, x.shape(), detail::any_grad<T>({&s, &x}));
  const T sv = s.values()[0];
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) o.node->value[i] = sv * xv[i];
  if (o.rg) detail::record<T>(tape, OpKind::scalar_mul, {s.tape_id(), x.tape_id()}, o.arr.tape_id());
  return o.arr;
}

template <class T>
DiffArray<T> unary(OpKind k, const DiffArray<T>& x, T scalar = T(0)) {
  auto& tape = detail::same_tape<T>(op_name(k), {&x});
  auto o = detail::make_out(tape, x.shape(), x.requires_grad());
  auto xv = x.values();
  auto& ov = o.node->value;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    switch (k) {
      case OpKind::scale: ov[i] = scalar * xv[i]; break;
      case OpKind::add_scalar: ov[i] = xv[i] + scalar; break;
      case OpKind::silu: ov[i] = xv[i] * detail::sigmoid(xv[i]); break;
      case OpKind::tanh: ov[i] = std::tanh(xv[i]); break;
      case OpKind::sqrt: ov[i] = std::sqrt(xv[i]); break;
      default: throw Error("unary: unsupported op");
    }
  }
  if (o.rg) detail::record<T>(tape, k, {x.tape_id()}, o.arr.tape_id(), scalar);
  return o.arr;
}

template <class T>
DiffArray<T> scale(const DiffArray<T>& x, T s) { return unary(OpKind::scale, x, s); }
template <class T>
DiffArray<T> add_scalar(const DiffArray<T>& x, T s) { return unary(OpKind::add_scalar, x, s); }
template <class T>
DiffArray<T> silu(const DiffArray<T>& x) { return unary(OpKind::silu, x); }
template <class T>
DiffArray<T> tanh(const DiffArray<T>& x) { return unary(OpKind::tanh, x); }
template <class T>
DiffArray<T> sqrt(const DiffArray<T>& x) { return unary(OpKind::sqrt, x); }

// x[n,m] + b[m] on every row.
template <class T>
DiffArray<T> add_row_bias(const DiffArray<T>& x, const DiffArray<T>& b) {
  auto& tape = detail::same_tape<T>("add_row_bias", {&x, &b});
  if (!detail::is_matrix(x.shape()) || b.size() != x.cols() || b.shape().size() != 1)
    throw ShapeError("add_row_bias", {x.shape(), b.shape()});
  auto o = detail::make_out(tape, x.shape(), detail::any_grad<T>({&x, &b}));
  const std::size_t n = x.rows(), m = x.cols();
  auto xv = x.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) o.node->value[i * m + j] = xv[i * m + j] + bv[j];
  if (o.rg) detail::record<T>(tape, OpKind::add_row_bias, {x.tape_id(), b.tape_id()}, o.arr.tape_id());
  return o.arr;
}

// ---- matrix products ---------------------------------------------------------

template <class T>
DiffArray<T> matmul(const DiffArray<T>& a, const DiffArray<T>& b) {
  auto& tape = detail::same_tape<T>("matmul", {&a, &b});
  if (!detail::is_matrix(a.shape()) || !detail::is_matrix(b.shape()) || a.cols() != b.rows())
    throw ShapeError("matmul", {a.shape(), b.shape()});
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  auto o = detail::make_out(tape, Shape{n, m}, detail::any_grad<T>({&a, &b}));
  detail::gemm_nn(a.values().data(), b.values().data(), o.node->value.data(), n, k, m);
  if (o.rg) detail::record<T>(tape, OpKind::matmul, {a.tape_id(), b.tape_id()}, o.arr.tape_id());
  return o.arr;
}

// a[n,k] * b[m,k]^T; the workhorse for x W^T with W stored [out,in].
template <class T>
DiffArray<T> matmul_bt(const DiffArray<T>& a, const DiffArray<T>& b) {
  auto& tape = detail::same_tape<T>("matmul_bt", {&a, &b});
  if (!detail::is_matrix(a.shape()) || !detail::is_matrix(b.shape()) || a.cols() != b.cols())
    throw ShapeError("matmul_bt", {a.shape(), b.shape()});
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  auto o = detail::make_out(tape, Shape{n, m}, detail::any_grad<T>({&a, &b}));
  detail::gemm_nt(a.values().data(), b.values().data(), o.node->value.data(), n, k, m);
  if (o.rg) detail::record<T>(tape, OpKind::matmul_bt, {a.tape_id(), b.tape_id()}, o.arr.tape_id());
  return o.arr;
}

// ---- structural --------------------------------------------------------------

template <class T>
DiffArray<T> concat_rows(const std::vector<DiffArray<T>>& xs) {
  if (xs.empty()) throw Error("concat_rows: no inputs");
  Tape<T>& tape = xs[0].tape();
  const std::size_t m = xs[0].cols();
  std::size_t n = 0;
  bool rg = false;
  std::vector<Shape> shapes;
  for (const auto& x : xs) shapes.push_back(x.shape());
  for (const auto& x : xs) {
    if (&x.tape() != &tape) throw Error("concat_rows: operands live on different tapes");
    if (!detail::is_matrix(x.shape()) || x.cols() != m) throw ShapeError("concat_rows", shapes);
    n += x.rows();
    rg = rg || x.requires_grad();
  }
  auto o = detail::make_out(tape, Shape{n, m}, rg);
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (const auto& x : xs) {
    auto v = x.values();
    std::copy(v.begin(), v.end(), o.node->value.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
    ids.push_back(x.tape_id());
  }
  if (o.rg) detail::record<T>(tape, OpKind::concat_rows, std::move(ids), o.arr.tape_id());
  return o.arr;
}

template <class T>
DiffArray<T> slice_rows(const DiffArray<T>& x, std::size_t r0, std::size_t r1) {
  auto& tape = detail::same_tape<T>("slice_rows", {&x});
  if (!detail::is_matrix(x.shape()) || r0 > r1 || r1 > x.rows())
    throw ShapeError("slice_rows", {x.shape(), Shape{r0, r1}});
  const std::size_t m = x.cols();
  auto o = detail::make_out(tape, Shape{r1 - r0, m}, x.requires_grad());
  auto v = x.values();
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(r0 * m), v.begin() + static_cast<std::ptrdiff_t>(r1 * m),
            o.node->value.begin());
  if (o.rg)
    detail::record<T>(tape, OpKind::slice_rows, {x.tape_id()}, o.arr.tape_id(), T(0),
                      {static_cast<std::int64_t>(r0), static_cast<std::int64_t>(r1)});
  return o.arr;
}

template <class T>
DiffArray<T> concat_cols(const std::vector<DiffArray<T>>& xs) {
  if (xs.empty()) throw Error("concat_cols: no inputs");
  Tape<T>& tape = xs[0].tape();
  const std::size_t n = xs[0].rows();
  std::size_t m = 0;
  bool rg = false;
  std::vector<Shape> shapes;
  for (const auto& x : xs) shapes.push_back(x.shape());
  for (const auto& x : xs) {
    if (&x.tape() != &tape) throw Error("concat_cols: operands live on different tapes");
    if (!detail::is_matrix(x.shape()) || x.rows() != n) throw ShapeError("concat_cols", shapes);
    m += x.cols();
    rg = rg || x.requires_grad();
  }
  auto o = detail::make_out(tape, Shape{n, m}, rg);
  std::vector<std::size_t> ids;
  std::size_t c0 = 0;
  for (const auto& x : xs) {
    auto v = x.values();
    const std::size_t mx = x.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < mx; ++j) o.node->value[i * m + c0 + j] = v[i * mx + j];
    c0 += mx;
    ids.push_back(x.tape_id());
  }
  if (o.rg) detail::record<T>(tape, OpKind::concat_cols, std::move(ids), o.arr.tape_id());
  return o.arr;
}

template <class T>
DiffArray<T> slice_cols(const DiffArray<T>& x, std::size_t c0, std::size_t c1) {
  auto& tape = detail::same_tape<T>("slice_cols", {&x});
  if (!detail::is_matrix(x.shape()) || c0 > c1 || c1 > x.cols())
    throw ShapeError("slice_cols", {x.shape(), Shape{c0, c1}});
  const std::size_t n = x.rows(), m = x.cols(), w = c1 - c0;
  auto o = detail::make_out(tape, Shape{n, w}, x.requires_grad());
  auto v = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) o.node->value[i * w + j] = v[i * m + c0 + j];
  if (o.rg)
    detail::record<T>(tape, OpKind::slice_cols, {x.tape_id()}, o.arr.tape_id(), T(0),
                      {static_cast<std::int64_t>(c0), static_cast<std::int64_t>(c1)});
  return o.arr;
}

// ---- reductions --------------------------------------------------------------

template <class T>
DiffArray<T> reduce(OpKind k, const DiffArray<T>& x) {
  auto& tape = detail::same_tape<T>(op_name(k), {&x});
  auto o = detail::make_out(tape, Shape{}, x.requires_grad());
  auto v = x.values();
  T s = T(0);
  if (k == OpKind::sq_norm)
    for (T e : v) s += e * e;
  else
    for (T e : v) s += e;
  if (k == OpKind::mean) {
    if (v.empty()) throw ShapeError("mean", {x.shape()}, "empty input");
    s /= static_cast<T>(v.size());
  }
  o.node->value[0] = s;
  if (o.rg) detail::record<T>(tape, k, {x.tape_id()}, o.arr.tape_id());
  return o.arr;
}

template <class T>
DiffArray<T> sum(const DiffArray<T>& x) { return reduce(OpKind::sum, x); }
template <class T>
DiffArray<T> mean(const DiffArray<T>& x) { return reduce(OpKind::mean, x); }
template <class T>
DiffArray<T> sq_norm(const DiffArray<T>& x) { return reduce(OpKind::sq_norm, x); }

// [n,m] -> [n]
template <class T>
DiffArray<T> sum_rows(const DiffArray<T>& x) {
  auto& tape = detail::same_tape<T>("sum_rows", {&x});
  if (!detail::is_matrix(x.shape())) throw ShapeError("sum_rows", {x.shape()});
  const std::size_t n = x.rows(), m = x.cols();
  auto o = detail::make_out(tape, Shape{n}, x.requires_grad());
  auto v = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < m; ++j) s += v[i * m + j];
    o.node->value[i] = s;
  }
  if (o.rg) detail::record<T>(tape, OpKind::sum_rows, {x.tape_id()}, o.arr.tape_id());
  return o.arr;
}

// ---- normalisation and attention pieces -------------------------------------

// Row softmax with max subtraction. mask (same extent as x, nonzero = keep) drops entries;
// every row must keep at least one.
template <class T>
DiffArray<T> softmax_rows(const DiffArray<T>& x, const std::vector<std::uint8_t>* mask = nullptr) {
  auto& tape = detail::same_tape<T>("softmax_rows", {&x});
  if (!detail::is_matrix(x.shape())) throw ShapeError("softmax_rows", {x.shape()});
  if (mask && mask->size() != x.size()) throw ShapeError("softmax_rows", {x.shape(), Shape{mask->size()}}, "mask");
  const std::size_t n = x.rows(), m = x.cols();
  auto o = detail::make_out(tape, x.shape(), x.requires_grad());
  auto v = x.values();
  auto& y = o.node->value;
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < m; ++j)
      if (!mask || (*mask)[i * m + j]) {
        mx = std::max(mx, v[i * m + j]);
        any = true;
      }
    if (!any) throw ShapeError("softmax_rows", {x.shape()}, "row with every entry masked");
    T s = T(0);
    for (std::size_t j = 0; j < m; ++j) {
      const bool keep = !mask || (*mask)[i * m + j];
      y[i * m + j] = keep ? std::exp(v[i * m + j] - mx) : T(0);
      s += y[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] /= s;
  }
  if (o.rg) detail::record<T>(tape, OpKind::softmax_rows, {x.tape_id()}, o.arr.tape_id());
  return o.arr;
}

// Row-wise x / sqrt(mean(x^2) + eps) * gain.
template <class T>
DiffArray<T> rmsnorm_rows(const DiffArray<T>& x, const DiffArray<T>& gain, T eps) {
  auto& tape = detail::same_tape<T>("rmsnorm_rows", {&x, &gain});
  if (!detail::is_matrix(x.shape()) || gain.size() != x.cols() || gain.shape().size() != 1)
    throw ShapeError("rmsnorm_rows", {x.shape(), gain.shape()});
  const std::size_t n = x.rows(), m = x.cols();
  auto o = detail::make_out(tape, x.shape(), detail::any_grad<T>({&x, &gain}));
  auto v = x.values();
  auto g = gain.values();
  std::vector<T> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    T ss = T(0);
    for (std::size_t j = 0; j < m; ++j) ss += v[i * m + j] * v[i * m + j];
    inv[i] = T(1) / std::sqrt(ss / static_cast<T>(m) + eps);
    for (std::size_t j = 0; j < m; ++j) o.node->value[i * m + j] = v[i * m + j] * inv[i] * g[j];
  }
  if (o.rg)
    detail::record<T>(tape, OpKind::rmsnorm_rows, {x.tape_id(), gain.tape_id()}, o.arr.tape_id(), eps, {},
                      std::move(inv));
  return o.arr;
}

// Rotary embedding on [n, w] viewed as heads of width head_dim; row i is at positions[i].
// Pairs (2p, 2p+1) inside each head rotate by pos * base^(-2p/head_dim); an odd last column is left as is.
template <class T>
DiffArray<T> rope(const DiffArray<T>& x, const std::vector<std::int64_t>& positions, std::size_t head_dim, T base) {
  auto& tape = detail::same_tape<T>("rope", {&x});
  if (!detail::is_matrix(x.shape()) || positions.size() != x.rows() || head_dim == 0 || x.cols() % head_dim)
    throw ShapeError("rope", {x.shape(), Shape{positions.size(), head_dim}});
  const std::size_t n = x.rows(), m = x.cols(), half = head_dim / 2;
  auto o = detail::make_out(tape, x.shape(), x.requires_grad());
  auto v = x.values();
  // saved holds cos/sin per (row, pair)
  std::vector<T> cs(n * half * 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < half; ++p) {
      const T inv = std::pow(base, -T(2) * static_cast<T>(p) / static_cast<T>(head_dim));
      const T ang = static_cast<T>(positions[i]) * inv;
      cs[(i * half + p) * 2] = std::cos(ang);
      cs[(i * half + p) * 2 + 1] = std::sin(ang);
    }
  std::copy(v.begin(), v.end(), o.node->value.begin());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h0 = 0; h0 < m; h0 += head_dim)
      for (std::size_t p = 0; p < half; ++p) {
        const T c = cs[(i * half + p) * 2], s = cs[(i * half + p) * 2 + 1];
        const T a = v[i * m + h0 + 2 * p], b = v[i * m + h0 + 2 * p + 1];
        o.node->value[i * m + h0 + 2 * p] = a * c - b * s;
        o.node->value[i * m + h0 + 2 * p + 1] = a * s + b * c;
      }
  if (o.rg)
    detail::record<T>(tape, OpKind::rope, {x.tape_id()}, o.arr.tape_id(), T(0),
                      {static_cast<std::int64_t>(head_dim)}, std::move(cs));
  return o.arr;
}

// Value-equal copy that backward never crosses.
template <class T>
DiffArray<T> detach(const DiffArray<T>& x) {
  return x.tape().constant(x.shape(), x.to_vector());
}

// ---- backward ----------------------------------------------------------------

template <class T>
void Tape<T>::backward(const DiffArray<T>& loss) {
  if (!record_) throw Error("backward: tape is not recording");
  if (consumed_) throw Error("backward: tape already consumed");
  if (&loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (loss.size() != 1) throw ShapeError("backward", {loss.shape()}, "loss must be scalar");
  consumed_ = true;
  Node& ln = nodes_[loss.tape_id()];
  if (!ln.requires_grad) return;
  ln.grad.assign(1, T(1));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (nodes_[it->output].grad.empty()) continue;  // nothing flowed here
    backprop(*it);
  }
}

template <class T>
void Tape<T>::backprop(const Record& r) {
  const std::vector<T>& g = nodes_[r.output].grad;
  const std::vector<T>& y = nodes_[r.output].value;
  const std::size_t n0 = r.inputs.empty() ? 0 : r.inputs[0];
  auto in_val = [&](std::size_t k) -> const std::vector<T>& { return nodes_[r.inputs[k]].value; };
  auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[r.inputs[k]].shape; };
  const std::size_t N = g.size();

  switch (r.kind) {
    case OpKind::add:
    case OpKind::sub: {
      if (auto* ga = grad_slot(r.inputs[0]))
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i];
      if (auto* gb = grad_slot(r.inputs[1])) {
        const T sgn = r.kind == OpKind::add ? T(1) : T(-1);
        for (std::size_t i = 0; i < N; ++i) (*gb)[i] += sgn * g[i];
      }
      break;
    }
    case OpKind::mul: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      if (auto* ga = grad_slot(r.inputs[0]))
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] * b[i];
      if (auto* gb = grad_slot(r.inputs[1]))
        for (std::size_t i = 0; i < N; ++i) (*gb)[i] += g[i] * a[i];
      break;
    }
    case OpKind::div: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      if (auto* ga = grad_slot(r.inputs[0]))
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] / b[i];
      if (auto* gb = grad_slot(r.inputs[1]))
        for (std::size_t i = 0; i < N; ++i) (*gb)[i] -= g[i] * a[i] / (b[i] * b[i]);
      break;
    }
    case OpKind::scalar_mul: {
      const T s = in_val(0)[0];
      const auto& x = in_val(1);
      if (auto* gs = grad_slot(r.inputs[0])) {
        T acc = T(0);
        for (std::size_t i = 0; i < N; ++i) acc += g[i] * x[i];
        (*gs)[0] += acc;
      }
      if (auto* gx = grad_slot(r.inputs[1]))
        for (std::size_t i = 0; i < N; ++i) (*gx)[i] += s * g[i];
      break;
    }
    case OpKind::scale:
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < N; ++i) (*gx)[i] += r.scalar * g[i];
      break;
    case OpKind::add_scalar:
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < N; ++i) (*gx)[i] += g[i];
      break;
    case OpKind::silu: {
      const auto& x = in_val(0);
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < N; ++i) {
          const T s = detail::sigmoid(x[i]);
          (*gx)[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
        }
      break;
    }
    case OpKind::tanh:
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < N; ++i) (*gx)[i] += g[i] * (T(1) - y[i] * y[i]);
      break;
    case OpKind::sqrt:
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < N; ++i) (*gx)[i] += g[i] / (T(2) * y[i]);
      break;
    case OpKind::add_row_bias: {
      const std::size_t m = in_shape(1)[0];
      if (auto* gx = grad_slot(r.inputs[0]))
        for (std::size_t i = 0; i < N; ++i) (*gx)[i] += g[i];
      if (auto* gb = grad_slot(r.inputs[1]))
        for (std::size_t i = 0; i < N; ++i) (*gb)[i % m] += g[i];
      break;
    }
    case OpKind::matmul: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      const std::size_t n = in_shape(0)[0], k = in_shape(0)[1], m = in_shape(1)[1];
      if (auto* ga = grad_slot(r.inputs[0])) detail::gemm_nt(g.data(), b.data(), ga->data(), n, m, k);
      if (auto* gb = grad_slot(r.inputs[1])) detail::gemm_tn(a.data(), g.data(), gb->data(), n, k, m);
      break;
    }
    case OpKind::matmul_bt: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      const std::size_t n = in_shape(0)[0], k = in_shape(0)[1], m = in_shape(1)[0];
      if (auto* ga = grad_slot(r.inputs[0])) detail::gemm_nn(g.data(), b.data(), ga->data(), n, m, k);
      if (auto* gb = grad_slot(r.inputs[1])) detail::gemm_tn(g.data(), a.data(), gb->data(), n, m, k);
      break;
    }
    case OpKind::concat_rows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < r.inputs.size(); ++k) {
        const std::size_t sz = nodes_[r.inputs[k]].value.size();
        if (auto* gx = grad_slot(r.inputs[k]))
          for (std::size_t i = 0; i < sz; ++i) (*gx)[i] += g[off + i];
        off += sz;
      }
      break;
    }
    case OpKind::slice_rows: {
      const std::size_t m = in_shape(0)[1], r0 = static_cast<std::size_t>(r.ints[0]);
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < N; ++i) (*gx)[r0 * m + i] += g[i];
      break;
    }
    case OpKind::concat_cols: {
      const std::size_t n = nodes_[r.output].shape[0], m = nodes_[r.output].shape[1];
      std::size_t c0 = 0;
      for (std::size_t k = 0; k < r.inputs.size(); ++k) {
        const std::size_t mx = nodes_[r.inputs[k]].shape[1];
        if (auto* gx = grad_slot(r.inputs[k]))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < mx; ++j) (*gx)[i * mx + j] += g[i * m + c0 + j];
        c0 += mx;
      }
      break;
    }
    case OpKind::slice_cols: {
      const std::size_t n = in_shape(0)[0], m = in_shape(0)[1], c0 = static_cast<std::size_t>(r.ints[0]);
      const std::size_t w = static_cast<std::size_t>(r.ints[1]) - c0;
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) (*gx)[i * m + c0 + j] += g[i * w + j];
      break;
    }
    case OpKind::sum:
    case OpKind::mean: {
      auto* gx = grad_slot(n0);
      if (!gx) break;
      const T s = r.kind == OpKind::mean ? g[0] / static_cast<T>(gx->size()) : g[0];
      for (auto& e : *gx) e += s;
      break;
    }
    case OpKind::sq_norm: {
      const auto& x = in_val(0);
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += T(2) * x[i] * g[0];
      break;
    }
    case OpKind::sum_rows: {
      const std::size_t m = in_shape(0)[1];
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[i / m];
      break;
    }
    case OpKind::softmax_rows: {
      const std::size_t n = in_shape(0)[0], m = in_shape(0)[1];
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < n; ++i) {
          T dot = T(0);
          for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
          for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
        }
      break;
    }
    case OpKind::rmsnorm_rows: {
      const auto& x = in_val(0);
      const auto& gain = in_val(1);
      const std::size_t n = in_shape(0)[0], m = in_shape(0)[1];
      const auto& inv = r.saved;
      if (auto* gx = grad_slot(r.inputs[0]))
        for (std::size_t i = 0; i < n; ++i) {
          T dot = T(0);
          for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * gain[j] * x[i * m + j];
          const T c = dot * inv[i] * inv[i] * inv[i] / static_cast<T>(m);
          for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[i * m + j] * gain[j] * inv[i] - x[i * m + j] * c;
        }
      if (auto* gg = grad_slot(r.inputs[1]))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) (*gg)[j] += g[i * m + j] * x[i * m + j] * inv[i];
      break;
    }
    case OpKind::rope: {
      const std::size_t n = in_shape(0)[0], m = in_shape(0)[1];
      const std::size_t hd = static_cast<std::size_t>(r.ints[0]), half = hd / 2;
      const auto& cs = r.saved;
      if (auto* gx = grad_slot(n0))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t h0 = 0; h0 < m; h0 += hd) {
            if (hd % 2) (*gx)[i * m + h0 + hd - 1] += g[i * m + h0 + hd - 1];
            for (std::size_t p = 0; p < half; ++p) {
              const T c = cs[(i * half + p) * 2], s = cs[(i * half + p) * 2 + 1];
              const T ga = g[i * m + h0 + 2 * p], gb = g[i * m + h0 + 2 * p + 1];
              (*gx)[i * m + h0 + 2 * p] += ga * c + gb * s;
              (*gx)[i * m + h0 + 2 * p + 1] += -ga * s + gb * c;
            }
          }
      break;
    }
  }
}

// ---- finite-difference oracle ------------------------------------------------

// f maps (tape, input) to a scalar. Returns max_i |a_i - c_i| / (|a_i| + |c_i| + eps_abs)
// between the tape gradient a and central differences c.
template <class T, class F>
T finite_diff_check(F&& f, const std::vector<T>& point, T step, T eps_abs = T(1e-8), Shape shape = {}) {
  if (!(step > T(0))) throw Error("finite_diff_check: step must be positive");
  for (T v : point)
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite input");
  if (shape.empty()) shape = Shape{point.size()};
  std::vector<T> analytic;
  {
    Tape<T> tape;
    auto x = tape.variable(shape, point);
    auto loss = f(tape, x);
    tape.backward(loss);
    analytic = x.grad();
  }
  auto eval = [&](const std::vector<T>& p) {
    Tape<T> tape(false);
    auto x = tape.constant(shape, p);
    return f(tape, x).item();
  };
  T worst = T(0);
  std::vector<T> p = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    p[i] = point[i] + step;
    const T up = eval(p);
    p[i] = point[i] - step;
    const T dn = eval(p);
    p[i] = point[i];
    const T c = (up - dn) / (T(2) * step);
    const T err = std::abs(analytic[i] - c) / (std::abs(analytic[i]) + std::abs(c) + eps_abs);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace arfn
