#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation of one forward pass in execution order, so
// the node list is already topologically sorted. backward() walks it in
// reverse once, accumulating gradients additively into each input; the tape
// is consumed afterwards.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pqe/error.hpp"
#include "pqe/rng.hpp"
#include "pqe/tensor.hpp"

namespace pqe::ad {

template <class T>
class Tape;

/// Handle to a tensor recorded on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape; }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of the leaves that required them, keyed by leaf id.
template <class T>
class Gradients {
 public:
  const Tensor<T>& operator[](const Var<T>& v) const {
    auto it = grads_.find(v.id());
    if (it == grads_.end()) throw ValidationError("no gradient recorded for tensor " + std::to_string(v.id()));
    return it->second;
  }
  bool contains(const Var<T>& v) const { return grads_.count(v.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape<T>;
  std::map<std::size_t, Tensor<T>> grads_;
};

template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Records an operation. The output requires a gradient iff any input does;
  /// otherwise the backward rule is dropped.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      require(&in.tape() == this, "operands live on different tapes");
      rg = rg || requires_grad(in);
    }
    nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(fn) : nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      require(&in.tape() == this, "operands live on different tapes");
      rg = rg || requires_grad(in);
    }
    nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(fn) : nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Attaches the backward rule after the fact; ignored when `v` needs no gradient.
  void set_backward(const Var<T>& v, BackwardFn fn) {
    Node& n = nodes_.at(v.id());
    if (n.requires_grad && !n.is_leaf) n.backward = std::move(fn);
  }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of `v`, zero-initialized on first use. Only valid during backward.
  std::span<T> grad(const Var<T>& v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Runs the reverse pass from a scalar loss and returns the leaf gradients.
  Gradients<T> backward(const Var<T>& loss) {
    require(!consumed_, "backward: tape already consumed");
    require(&loss.tape() == this, "backward: loss is not on this tape");
    require(loss.value().size() == 1, "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    require(requires_grad(loss), "backward: loss does not depend on any differentiable tensor");
    consumed_ = true;

    grad(loss)[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The rule may grow other nodes' buffers but never this one's.
      n.backward(*this, std::span<const T>(n.grad));
    }

    Gradients<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!n.is_leaf || !n.requires_grad) continue;
      Tensor<T> g(n.value.shape);
      if (!n.grad.empty()) g.data = std::move(n.grad);
      out.grads_.emplace(i, std::move(g));
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  bool consumed_ = false;
};

namespace detail {

template <class T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  require(&a.tape() == &b.tape(), "operands live on different tapes");
}

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  require(a >= 0 && a < r, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
inline std::array<std::size_t, 3> around_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      if (aip == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m,k] += G[m,n] * B[k,n]^T
template <class T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gi = g + i * n;
    T* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * G[m,n]
template <class T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      if (aip == T(0)) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b's shape equals a's or is a trailing suffix of it (broadcast).
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size())),
          "add: cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  const std::size_t inner = element_count(sb);
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  return a.tape().record(std::move(out), {a, b}, [a, b, inner](Tape<T>& t, std::span<const T> g) {
    if (a.requires_grad()) {
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    if (a.requires_grad()) {
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    if (a.requires_grad()) {
      auto ga = t.grad(a);
      const auto& bv = b.value().data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad(b);
      const auto& av = a.value().data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= factor;
  return a.tape().record(std::move(out), {a}, [a, factor](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

/// max(0, x); the subgradient at 0 is 0.
template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    const auto& av = a.value().data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > T(0)) ga[i] += g[i];
    }
  });
}

/// Inverted dropout. Identity when not training or when rate == 0.
template <class T>
Var<T> dropout(const Var<T>& a, double rate, bool training, Stream& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return a;
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(a.value().size());
  for (auto& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_scale;
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return a.tape().record(std::move(out), {a}, [a, mask = std::move(mask)](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().data) acc += v;
  return a.tape().record(Tensor<T>::scalar(acc), {a}, [a](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (auto& v : ga) v += g[0];
  });
}

/// Mean over the last axis; the axis is dropped.
template <class T>
Var<T> mean_last(const Var<T>& a) {
  const Shape& s = a.shape();
  require(!s.empty(), "mean_last: rank-0 input");
  const std::size_t d = s.back();
  const std::size_t rows = a.value().size() / d;
  Tensor<T> out(Shape(s.begin(), s.end() - 1));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += a.value()[r * d + j];
    out[r] = acc / T(d);
  }
  return a.tape().record(std::move(out), {a}, [a, d, rows](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t r = 0; r < rows; ++r) {
      const T share = g[r] / T(d);
      for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += share;
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(element_count(shape) == a.value().size(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor<T> out(std::move(shape), a.value().data);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Swaps the last two axes.
template <class T>
Var<T> transpose_last(const Var<T>& a) {
  const Shape& s = a.shape();
  require(s.size() >= 2, "transpose_last: rank must be >= 2");
  const std::size_t m = s[s.size() - 2], n = s.back();
  const std::size_t batch = a.value().size() / (m * n);
  Shape os = s;
  std::swap(os[os.size() - 2], os.back());
  Tensor<T> out(os);
  const auto& av = a.value().data;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = av[b * m * n + i * n + j];
    }
  }
  return a.tape().record(std::move(out), {a}, [a, batch, m, n](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
      }
    }
  });
}

/// Elements [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::norm_axis(axis, a.shape().size());
  const auto [outer, extent, inner] = detail::around_axis(a.shape(), ax);
  require(begin < end && end <= extent, "slice: range out of bounds");
  Shape os = a.shape();
  os[ax] = end - begin;
  Tensor<T> out(os);
  const std::size_t w = (end - begin) * inner;
  const auto& av = a.value().data;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<long>(o * extent * inner + begin * inner), w,
                out.data.begin() + static_cast<long>(o * w));
  }
  return a.tape().record(std::move(out), {a},
                         [a, outer = outer, extent = extent, inner = inner, begin, w](Tape<T>& t, std::span<const T> g) {
                           auto ga = t.grad(a);
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < w; ++i) ga[o * extent * inner + begin * inner + i] += g[o * w + i];
                           }
                         });
}

/// Joins tensors along `axis`; all other extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts.front().shape();
  const std::size_t ax = detail::norm_axis(axis, s0.size());
  Shape os = s0;
  os[ax] = 0;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    const Shape& s = p.shape();
    require(s.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(i == ax || s[i] == s0[i], "concat: extent mismatch " + shape_str(s) + " vs " + shape_str(s0));
    }
    os[ax] += s[ax];
  }
  const auto [outer, total, inner] = detail::around_axis(os, ax);
  Tensor<T> out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t w = p.shape()[ax] * inner;
    const auto& pv = p.value().data;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<long>(o * w), w,
                  out.data.begin() + static_cast<long>(o * total * inner + off * inner));
    }
    off += p.shape()[ax];
  }
  return parts.front().tape().record(
      std::move(out), parts,
      [parts, offsets, ax, outer = outer, total = total, inner = inner](Tape<T>& t, std::span<const T> g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!parts[k].requires_grad()) continue;
          auto gp = t.grad(parts[k]);
          const std::size_t w = parts[k].shape()[ax] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < w; ++i) gp[o * w + i] += g[o * total * inner + offsets[k] * inner + i];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., m, k] x b[k, n] (b shared across the batch) or
/// a[..., m, k] x b[..., k, n] (matching leading axes).
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() >= 2 && sb.size() >= 2, "matmul: operands must have rank >= 2");
  const std::size_t k = sa.back();
  require(sb[sb.size() - 2] == k, "matmul: inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t n = sb.back();
  const bool shared_b = sb.size() == 2;
  if (!shared_b) {
    require(sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin()),
            "matmul: batch axes differ: " + shape_str(sa) + " x " + shape_str(sb));
  }
  // With a shared right operand the batch folds into the row count.
  const std::size_t m = shared_b ? a.value().size() / k : sa[sa.size() - 2];
  const std::size_t batch = shared_b ? 1 : a.value().size() / (m * k);

  Shape os = sa;
  os.back() = n;
  Tensor<T> out(os);
  const T* av = a.value().data.data();
  const T* bv = b.value().data.data();
  for (std::size_t p = 0; p < batch; ++p) {
    detail::gemm_nn(av + p * m * k, bv + p * k * n, out.data.data() + p * m * n, m, k, n);
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n, batch](Tape<T>& t, std::span<const T> g) {
    const T* av = a.value().data.data();
    const T* bv = b.value().data.data();
    if (a.requires_grad()) {
      T* ga = t.grad(a).data();
      for (std::size_t p = 0; p < batch; ++p) detail::gemm_nt(g.data() + p * m * n, bv + p * k * n, ga + p * m * k, m, k, n);
    }
    if (b.requires_grad()) {
      T* gb = t.grad(b).data();
      for (std::size_t p = 0; p < batch; ++p) detail::gemm_tn(av + p * m * k, g.data() + p * m * n, gb + p * k * n, m, k, n);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`, stabilized by subtracting the maximum.
template <class T>
Var<T> softmax(const Var<T>& a, int axis = -1) {
  const std::size_t ax = detail::norm_axis(axis, a.shape().size());
  const auto [outer, n, inner] = detail::around_axis(a.shape(), ax);
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  auto y = a.tape().record(std::move(out), {a}, nullptr);
  // The rule reads the recorded output, so it is attached once y exists.
  a.tape().set_backward(y, [a, y, outer = outer, n = n, inner = inner](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    const auto& ys = y.value().data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * ys[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          ga[idx] += ys[idx] * (g[idx] - dot);
        }
      }
    }
  });
  return y;
}

namespace detail {

/// exp for float via 2^n * p(r) with |r| <= ln2/2; branch-free so loops over it vectorize.
inline float exp_poly(float x) {
  x = x < -87.0f ? -87.0f : x;
  x = x > 88.0f ? 88.0f : x;
  // round to nearest via the 1.5 * 2^23 shifter
  const float n = (x * 1.44269504f + 12582912.0f) - 12582912.0f;
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

/// In-place exp over a row; float takes the polynomial path.
template <class T>
void exp_inplace(T* x, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    for (std::size_t j = 0; j < n; ++j) x[j] = exp_poly(x[j]);
  } else {
    for (std::size_t j = 0; j < n; ++j) x[j] = std::exp(x[j]);
  }
}

/// Row maximum with eight independent lanes.
template <class T>
T row_max(const T* a, std::size_t n) {
  T acc[8];
  std::size_t j = 0;
  for (std::size_t l = 0; l < 8; ++l) acc[l] = n ? a[0] : T(0);
  for (; j + 8 <= n; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] = a[j + l] > acc[l] ? a[j + l] : acc[l];
  }
  T mx = acc[0];
  for (std::size_t l = 1; l < 8; ++l) mx = acc[l] > mx ? acc[l] : mx;
  for (; j < n; ++j) mx = a[j] > mx ? a[j] : mx;
  return mx;
}

template <class T>
T row_sum(const T* a, std::size_t n) {
  T acc[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l];
  }
  T s = 0;
  for (; j < n; ++j) s += a[j];
  for (std::size_t l = 0; l < 8; ++l) s += acc[l];
  return s;
}

/// Dot product with eight independent partial sums.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
  }
  T s = 0;
  for (; j < n; ++j) s += a[j] * b[j];
  for (std::size_t l = 0; l < 8; ++l) s += acc[l];
  return s;
}

/// [rows, cols] -> [cols, rows]
template <class T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace detail

/// softmax(q k^T * scale) v along the key axis, as one fused operation.
/// q [..., n, dk], k [..., m, dk], v [..., m, dv] with identical leading axes.
/// Only the probability matrix is kept for the backward pass.
template <class T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, T scale) {
  detail::check_same_tape(q, k);
  detail::check_same_tape(q, v);
  const Shape& sq = q.shape();
  const Shape& sk = k.shape();
  const Shape& sv = v.shape();
  require(sq.size() >= 2 && sk.size() == sq.size() && sv.size() == sq.size(), "attention: operand ranks differ");
  require(std::equal(sq.begin(), sq.end() - 2, sk.begin()) && std::equal(sq.begin(), sq.end() - 2, sv.begin()),
          "attention: batch axes differ");
  const std::size_t n = sq[sq.size() - 2], dk = sq.back();
  const std::size_t m = sk[sk.size() - 2], dv = sv.back();
  require(sk.back() == dk, "attention: query/key widths differ");
  require(sv[sv.size() - 2] == m, "attention: key/value lengths differ");
  const std::size_t batch = q.value().size() / (n * dk);

  Shape os = sq;
  os.back() = dv;
  Tensor<T> out(os);
  std::vector<T> probs(batch * n * m);
  std::vector<T> kt(dk * m), vt(dv * m);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* qb = q.value().data.data() + b * n * dk;
    detail::transpose_into(k.value().data.data() + b * m * dk, m, dk, kt.data());
    detail::transpose_into(v.value().data.data() + b * m * dv, m, dv, vt.data());
    for (std::size_t i = 0; i < n; ++i) {
      T* pi = probs.data() + (b * n + i) * m;
      for (std::size_t c = 0; c < dk; ++c) {
        const T qc = qb[i * dk + c] * scale;
        const T* kc = kt.data() + c * m;
        if (c == 0) {
          for (std::size_t j = 0; j < m; ++j) pi[j] = qc * kc[j];
        } else {
          for (std::size_t j = 0; j < m; ++j) pi[j] += qc * kc[j];
        }
      }
      const T mx = detail::row_max(pi, m);
      for (std::size_t j = 0; j < m; ++j) pi[j] -= mx;
      detail::exp_inplace(pi, m);
      const T z = detail::row_sum(pi, m);
      const T inv = T(1) / z;
      for (std::size_t j = 0; j < m; ++j) pi[j] *= inv;
      T* oi = out.data.data() + (b * n + i) * dv;
      for (std::size_t c = 0; c < dv; ++c) oi[c] = detail::dot(pi, vt.data() + c * m, m);
    }
  }
  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, scale, batch, n, m, dk, dv, probs = std::move(probs)](Tape<T>& t, std::span<const T> g) {
        T* gq = q.requires_grad() ? t.grad(q).data() : nullptr;
        T* gk = k.requires_grad() ? t.grad(k).data() : nullptr;
        T* gv = v.requires_grad() ? t.grad(v).data() : nullptr;
        std::vector<T> ds(m), kt(dk * m), vt(dv * m), gkt(dk * m), gvt(dv * m);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* qb = q.value().data.data() + b * n * dk;
          detail::transpose_into(k.value().data.data() + b * m * dk, m, dk, kt.data());
          detail::transpose_into(v.value().data.data() + b * m * dv, m, dv, vt.data());
          std::fill(gkt.begin(), gkt.end(), T(0));
          std::fill(gvt.begin(), gvt.end(), T(0));
          for (std::size_t i = 0; i < n; ++i) {
            const T* pi = probs.data() + (b * n + i) * m;
            const T* gi = g.data() + (b * n + i) * dv;
            // dP_ij = g_i . v_j ;  dS_ij = P_ij (dP_ij - sum_j P_ij dP_ij)
            for (std::size_t c = 0; c < dv; ++c) {
              const T gc = gi[c];
              const T* vc = vt.data() + c * m;
              if (c == 0) {
                for (std::size_t j = 0; j < m; ++j) ds[j] = gc * vc[j];
              } else {
                for (std::size_t j = 0; j < m; ++j) ds[j] += gc * vc[j];
              }
            }
            const T mean = detail::dot(pi, ds.data(), m);
            for (std::size_t j = 0; j < m; ++j) ds[j] = pi[j] * (ds[j] - mean) * scale;
            if (gv) {
              for (std::size_t c = 0; c < dv; ++c) {
                const T gc = gi[c];
                T* gvc = gvt.data() + c * m;
                for (std::size_t j = 0; j < m; ++j) gvc[j] += pi[j] * gc;
              }
            }
            if (gq) {
              T* gqi = gq + (b * n + i) * dk;
              for (std::size_t c = 0; c < dk; ++c) gqi[c] += detail::dot(ds.data(), kt.data() + c * m, m);
            }
            if (gk) {
              for (std::size_t c = 0; c < dk; ++c) {
                const T qc = qb[i * dk + c];
                T* gkc = gkt.data() + c * m;
                for (std::size_t j = 0; j < m; ++j) gkc[j] += ds[j] * qc;
              }
            }
          }
          if (gk) {
            T* gkb = gk + b * m * dk;
            for (std::size_t j = 0; j < m; ++j) {
              for (std::size_t c = 0; c < dk; ++c) gkb[j * dk + c] += gkt[c * m + j];
            }
          }
          if (gv) {
            T* gvb = gv + b * m * dv;
            for (std::size_t j = 0; j < m; ++j) {
              for (std::size_t c = 0; c < dv; ++c) gvb[j * dv + c] += gvt[c * m + j];
            }
          }
        }
      });
}

/// Normalizes over the last axis to zero mean / unit variance (eps added to the
/// variance), then applies gain and bias of the last-axis extent.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-6)) {
  detail::check_same_tape(x, gain);
  detail::check_same_tape(x, bias);
  const Shape& s = x.shape();
  require(!s.empty(), "layer_norm: rank-0 input");
  const std::size_t d = s.back();
  require(gain.shape() == Shape{d} && bias.shape() == Shape{d},
          "layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  const std::size_t rows = x.value().size() / d;
  std::vector<T> xhat(x.value().size());
  std::vector<T> inv_std(rows);
  Tensor<T> out(s);
  const auto& xv = x.value().data;
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return x.tape().record(std::move(out), {x, gain, bias},
                         [x, gain, bias, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                             Tape<T>& t, std::span<const T> g) {
                           if (gain.requires_grad()) {
                             auto gg = t.grad(gain);
                             for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                           }
                           if (bias.requires_grad()) {
                             auto gb = t.grad(bias);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                           }
                           if (!x.requires_grad()) return;
                           auto gx = t.grad(x);
                           const auto& gv = gain.value().data;
                           std::vector<T> dh(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                             T mean_dh = 0, mean_dh_h = 0;
                             for (std::size_t j = 0; j < d; ++j) {
                               dh[j] = g[r * d + j] * gv[j];
                               mean_dh += dh[j];
                               mean_dh_h += dh[j] * xhat[r * d + j];
                             }
                             mean_dh /= T(d);
                             mean_dh_h /= T(d);
                             for (std::size_t j = 0; j < d; ++j) {
                               gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                             }
                           }
                         });
}

}  // namespace pqe::ad
