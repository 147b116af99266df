#pragma once

// Transformer-encoder classifier over raw single-channel signals.
//
//   [B, seq] -> [B, seq, 1]
//   N x { y1 = x  + drop(MHA(LN(x)))
//         y2 = y1 + drop(FF(LN(y1))) }        FF = pointwise d -> ff (ReLU) -> d
//   mean over the channel axis -> [B, seq]
//   dense(mlp) + ReLU -> drop(mlp_dropout) -> ... -> dense(num_classes)
//
// There is no positional encoding.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "pqe/autodiff.hpp"
#include "pqe/binary_io.hpp"
#include "pqe/error.hpp"
#include "pqe/rng.hpp"
#include "pqe/tensor.hpp"

namespace pqe {

struct ModelConfig {
  std::size_t seq_len = 2000;
  std::size_t d_model = 1;
  std::size_t num_blocks = 4;
  std::size_t num_heads = 1;
  std::size_t head_size = 256;
  std::size_t ff_dim = 4;
  std::vector<std::size_t> mlp_units{128};
  double mlp_dropout = 0.4;
  double block_dropout = 0.25;
  std::size_t num_classes = 10;

  void validate() const {
    require(seq_len >= 1 && d_model >= 1 && num_heads >= 1 && head_size >= 1 && ff_dim >= 1 && num_classes >= 1,
            "model extents must be >= 1");
    for (auto u : mlp_units) require(u >= 1, "mlp units must be >= 1");
    require(mlp_dropout >= 0.0 && mlp_dropout < 1.0, "mlp_dropout must be in [0, 1)");
    require(block_dropout >= 0.0 && block_dropout < 1.0, "block_dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form trainable parameter count.
inline std::size_t parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, hs = c.num_heads * c.head_size;
  const std::size_t per_block = 3 * (d * hs + hs) + (hs * d + d) + 2 * (2 * d) + (d * c.ff_dim + c.ff_dim) +
                                (c.ff_dim * d + d);
  std::size_t head = 0, fan_in = c.seq_len;
  for (auto u : c.mlp_units) {
    head += fan_in * u + u;
    fan_in = u;
  }
  head += fan_in * c.num_classes + c.num_classes;
  return c.num_blocks * per_block + head;
}

enum class ParamKind : std::uint8_t { weight, bias, gain };

struct ParamSlot {
  std::string name;
  Shape shape;
  ParamKind kind;
};

/// Tensor declaration order shared by init, forward, and the parameter file.
inline std::vector<ParamSlot> param_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, hs = c.num_heads * c.head_size;
  std::vector<ParamSlot> out;
  for (std::size_t b = 0; b < c.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    out.push_back({p + "ln1.gain", {d}, ParamKind::gain});
    out.push_back({p + "ln1.bias", {d}, ParamKind::bias});
    out.push_back({p + "attn.wq", {d, hs}, ParamKind::weight});
    out.push_back({p + "attn.bq", {hs}, ParamKind::bias});
    out.push_back({p + "attn.wk", {d, hs}, ParamKind::weight});
    out.push_back({p + "attn.bk", {hs}, ParamKind::bias});
    out.push_back({p + "attn.wv", {d, hs}, ParamKind::weight});
    out.push_back({p + "attn.bv", {hs}, ParamKind::bias});
    out.push_back({p + "attn.wo", {hs, d}, ParamKind::weight});
    out.push_back({p + "attn.bo", {d}, ParamKind::bias});
    out.push_back({p + "ln2.gain", {d}, ParamKind::gain});
    out.push_back({p + "ln2.bias", {d}, ParamKind::bias});
    out.push_back({p + "ff.w1", {d, c.ff_dim}, ParamKind::weight});
    out.push_back({p + "ff.b1", {c.ff_dim}, ParamKind::bias});
    out.push_back({p + "ff.w2", {c.ff_dim, d}, ParamKind::weight});
    out.push_back({p + "ff.b2", {d}, ParamKind::bias});
  }
  std::size_t fan_in = c.seq_len;
  for (std::size_t i = 0; i < c.mlp_units.size(); ++i) {
    const std::string p = "mlp" + std::to_string(i) + ".";
    out.push_back({p + "w", {fan_in, c.mlp_units[i]}, ParamKind::weight});
    out.push_back({p + "b", {c.mlp_units[i]}, ParamKind::bias});
    fan_in = c.mlp_units[i];
  }
  out.push_back({"out.w", {fan_in, c.num_classes}, ParamKind::weight});
  out.push_back({"out.b", {c.num_classes}, ParamKind::bias});
  return out;
}

inline constexpr std::size_t kTensorsPerBlock = 16;

template <class T>
struct ModelParams {
  ModelConfig config;
  std::vector<Tensor<T>> tensors;  // param_layout order

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out{config, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
template <class T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<T> p{config, {}};
  const auto layout = param_layout(config);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& slot = layout[i];
    Tensor<T> t(slot.shape);
    if (slot.kind == ParamKind::gain) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else if (slot.kind == ParamKind::weight) {
      const double bound = std::sqrt(6.0 / static_cast<double>(slot.shape[0] + slot.shape[1]));
      Stream rng(seed, i);
      for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

enum class AttentionRoute {
  /// softmax((X~ (Wq~ Wk~^T)) X~^T / sqrt(S)) (X~ (Wv~ Wo_h)), X~ = [x, 1], W~ = [W; b].
  factored,
  /// Explicit Q, K, V projections, per-head attention, concat, output projection.
  direct,
};

struct ForwardOptions {
  bool training = false;
  Stream* rng = nullptr;  // required when training with non-zero dropout
  AttentionRoute route = AttentionRoute::factored;
  std::vector<std::string>* trace = nullptr;  // stage names, in execution order
};

namespace detail {

inline void trace(const ForwardOptions& o, const char* stage) {
  if (o.trace) o.trace->emplace_back(stage);
}

template <class T>
ad::Var<T> maybe_dropout(const ad::Var<T>& x, double rate, const ForwardOptions& o) {
  if (!o.training || rate == 0.0) return x;
  require(o.rng != nullptr, "training forward pass needs a dropout stream");
  return ad::dropout(x, rate, true, *o.rng);
}

/// [..., d] -> [..., d + 1] with a trailing column of ones.
template <class T>
ad::Var<T> append_ones(const ad::Var<T>& x) {
  Shape s = x.shape();
  s.back() = 1;
  return ad::concat<T>({x, x.tape().constant(Tensor<T>(s, T(1)))}, -1);
}

/// [W; b] for W [r, c] and b [c].
template <class T>
ad::Var<T> stack_bias(const ad::Var<T>& w, const ad::Var<T>& b) {
  return ad::concat<T>({w, ad::reshape(b, Shape{1, b.shape()[0]})}, 0);
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d_k)) V over the key axis; batched over leading axes.
template <class T>
ad::Var<T> attention(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v) {
  require(q.shape().back() == k.shape().back(), "attention: query/key widths differ");
  require(k.shape()[k.shape().size() - 2] == v.shape()[v.shape().size() - 2], "attention: key/value lengths differ");
  return ad::scaled_dot_attention(q, k, v, T(1) / std::sqrt(static_cast<T>(q.shape().back())));
}

/// Per-block view over bound parameter handles.
template <class T>
struct BlockVars {
  std::span<const ad::Var<T>> v;
  const ad::Var<T>& ln1_gain() const { return v[0]; }
  const ad::Var<T>& ln1_bias() const { return v[1]; }
  const ad::Var<T>& wq() const { return v[2]; }
  const ad::Var<T>& bq() const { return v[3]; }
  const ad::Var<T>& wk() const { return v[4]; }
  const ad::Var<T>& bk() const { return v[5]; }
  const ad::Var<T>& wv() const { return v[6]; }
  const ad::Var<T>& bv() const { return v[7]; }
  const ad::Var<T>& wo() const { return v[8]; }
  const ad::Var<T>& bo() const { return v[9]; }
  const ad::Var<T>& ln2_gain() const { return v[10]; }
  const ad::Var<T>& ln2_bias() const { return v[11]; }
  const ad::Var<T>& ff_w1() const { return v[12]; }
  const ad::Var<T>& ff_b1() const { return v[13]; }
  const ad::Var<T>& ff_w2() const { return v[14]; }
  const ad::Var<T>& ff_b2() const { return v[15]; }
};

/// Multi-head self-attention of x [..., seq, d_model] back to d_model.
template <class T>
ad::Var<T> multi_head(const ad::Var<T>& x, const BlockVars<T>& p, std::size_t num_heads,
                      AttentionRoute route = AttentionRoute::factored) {
  const std::size_t width = p.wq().shape()[1];
  require(num_heads >= 1 && width % num_heads == 0, "multi_head: projection width not divisible by head count");
  const std::size_t s = width / num_heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(s));

  if (route == AttentionRoute::direct) {
    auto q = ad::add(ad::matmul(x, p.wq()), p.bq());
    auto k = ad::add(ad::matmul(x, p.wk()), p.bk());
    auto v = ad::add(ad::matmul(x, p.wv()), p.bv());
    std::vector<ad::Var<T>> heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
      heads.push_back(attention(ad::slice(q, -1, h * s, (h + 1) * s), ad::slice(k, -1, h * s, (h + 1) * s),
                                ad::slice(v, -1, h * s, (h + 1) * s)));
    }
    auto joined = num_heads == 1 ? heads.front() : ad::concat(heads, -1);
    return ad::add(ad::matmul(joined, p.wo()), p.bo());
  }

  auto xa = detail::append_ones(x);
  auto wq = detail::stack_bias(p.wq(), p.bq());
  auto wk = detail::stack_bias(p.wk(), p.bk());
  auto wv = detail::stack_bias(p.wv(), p.bv());
  ad::Var<T> out;
  for (std::size_t h = 0; h < num_heads; ++h) {
    auto qh = num_heads == 1 ? wq : ad::slice(wq, 1, h * s, (h + 1) * s);
    auto kh = num_heads == 1 ? wk : ad::slice(wk, 1, h * s, (h + 1) * s);
    auto vh = num_heads == 1 ? wv : ad::slice(wv, 1, h * s, (h + 1) * s);
    auto oh = num_heads == 1 ? p.wo() : ad::slice(p.wo(), 0, h * s, (h + 1) * s);
    auto bilinear = ad::matmul(qh, ad::transpose_last(kh));  // [d+1, d+1]
    auto values = ad::matmul(xa, ad::matmul(vh, oh));          // [..., seq, d]
    auto head = ad::scaled_dot_attention(ad::matmul(xa, bilinear), xa, values, inv);
    out = h == 0 ? head : ad::add(out, head);
  }
  return ad::add(out, p.bo());
}

/// Pre-norm encoder block over x [..., seq, d_model].
template <class T>
ad::Var<T> encoder_block(const ad::Var<T>& x, const BlockVars<T>& p, const ModelConfig& config,
                         const ForwardOptions& o = {}) {
  using detail::trace;
  trace(o, "layer_norm");
  auto h = ad::layer_norm(x, p.ln1_gain(), p.ln1_bias());
  trace(o, "multi_head_attention");
  h = multi_head(h, p, config.num_heads, o.route);
  trace(o, "dropout");
  h = detail::maybe_dropout(h, config.block_dropout, o);
  trace(o, "residual_add");
  auto y1 = ad::add(x, h);

  trace(o, "layer_norm");
  auto f = ad::layer_norm(y1, p.ln2_gain(), p.ln2_bias());
  trace(o, "pointwise_ff_expand");
  f = ad::relu(ad::add(ad::matmul(f, p.ff_w1()), p.ff_b1()));
  trace(o, "pointwise_ff_project");
  f = ad::add(ad::matmul(f, p.ff_w2()), p.ff_b2());
  trace(o, "dropout");
  f = detail::maybe_dropout(f, config.block_dropout, o);
  trace(o, "residual_add");
  return ad::add(y1, f);
}

/// Logits [B, num_classes] for a batch [B, seq_len] of raw signals.
template <class T>
ad::Var<T> forward(const ModelConfig& config, std::span<const ad::Var<T>> params, const ad::Var<T>& batch,
                   const ForwardOptions& o = {}) {
  using detail::trace;
  require(params.size() == param_layout(config).size(), "forward: parameter list does not match the config");
  require(config.d_model == 1, "forward: raw-signal input needs d_model = 1");
  const Shape& s = batch.shape();
  require(s.size() == 2 && s[1] == config.seq_len,
          "forward: expected batch [B, " + std::to_string(config.seq_len) + "], got " + shape_str(s));

  trace(o, "input");
  auto x = ad::reshape(batch, Shape{s[0], s[1], 1});
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    x = encoder_block(x, BlockVars<T>{params.subspan(b * kTensorsPerBlock, kTensorsPerBlock)}, config, o);
  }
  trace(o, "channel_average_pool");
  x = ad::mean_last(x);
  std::size_t at = config.num_blocks * kTensorsPerBlock;
  for (std::size_t i = 0; i < config.mlp_units.size(); ++i) {
    trace(o, "dense");
    x = ad::relu(ad::add(ad::matmul(x, params[at]), params[at + 1]));
    trace(o, "dropout");
    x = detail::maybe_dropout(x, config.mlp_dropout, o);
    at += 2;
  }
  trace(o, "dense");
  return ad::add(ad::matmul(x, params[at]), params[at + 1]);
}

template <class T>
std::vector<ad::Var<T>> bind(ad::Tape<T>& tape, const ModelParams<T>& p, bool requires_grad) {
  std::vector<ad::Var<T>> vars;
  vars.reserve(p.tensors.size());
  for (const auto& t : p.tensors) vars.push_back(tape.leaf(t, requires_grad));
  return vars;
}

/// Inference-mode logits, row-major [B, num_classes].
template <class T>
Tensor<T> predict_logits(const ModelParams<T>& p, const Tensor<T>& batch) {
  ad::Tape<T> tape;
  const auto vars = bind(tape, p, false);
  return forward<T>(p.config, vars, tape.constant(batch)).value();
}

/// Stage names executed by one forward pass (the model's layer list).
inline std::vector<std::string> layer_stages(const ModelConfig& config) {
  ModelConfig tiny = config;
  tiny.seq_len = std::min<std::size_t>(config.seq_len, 4);
  tiny.head_size = 1;
  ad::Tape<double> tape;
  const auto p = init_params<double>(tiny, 0);
  const auto vars = bind(tape, p, false);
  std::vector<std::string> stages;
  ForwardOptions o;
  o.trace = &stages;
  forward<double>(tiny, vars, tape.constant(Tensor<double>(Shape{1, tiny.seq_len})), o);
  return stages;
}

// ---------------------------------------------------------------------------
// Parameter file: "PQEW" | version u32 | config | tensor count u32 |
// per tensor (name, rank u8, dims u32..., f32 data) | CRC32 of all prior bytes.

inline constexpr std::uint32_t kParamsVersion = 1;

namespace detail {

inline void put_config(io::Writer& w, const ModelConfig& c) {
  w.put(static_cast<std::uint32_t>(c.seq_len));
  w.put(static_cast<std::uint32_t>(c.d_model));
  w.put(static_cast<std::uint32_t>(c.num_blocks));
  w.put(static_cast<std::uint32_t>(c.num_heads));
  w.put(static_cast<std::uint32_t>(c.head_size));
  w.put(static_cast<std::uint32_t>(c.ff_dim));
  w.put(static_cast<std::uint32_t>(c.mlp_units.size()));
  for (auto u : c.mlp_units) w.put(static_cast<std::uint32_t>(u));
  w.put_f64(c.mlp_dropout);
  w.put_f64(c.block_dropout);
  w.put(static_cast<std::uint32_t>(c.num_classes));
}

inline ModelConfig get_config(io::Reader& r) {
  ModelConfig c;
  c.seq_len = r.get<std::uint32_t>();
  c.d_model = r.get<std::uint32_t>();
  c.num_blocks = r.get<std::uint32_t>();
  c.num_heads = r.get<std::uint32_t>();
  c.head_size = r.get<std::uint32_t>();
  c.ff_dim = r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  require(n <= 64, "parameter file: implausible mlp depth");
  c.mlp_units.resize(n);
  for (auto& u : c.mlp_units) u = r.get<std::uint32_t>();
  c.mlp_dropout = r.get_f64();
  c.block_dropout = r.get_f64();
  c.num_classes = r.get<std::uint32_t>();
  return c;
}

}  // namespace detail

template <class T>
void save_params(const std::string& path, const ModelParams<T>& p) {
  const auto layout = param_layout(p.config);
  require(layout.size() == p.tensors.size(), "save_params: tensor list does not match the config");
  io::Writer w;
  w.put_bytes(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>("PQEW"), 4));
  w.put(kParamsVersion);
  detail::put_config(w, p.config);
  w.put(static_cast<std::uint32_t>(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = p.tensors[i];
    require(t.shape == layout[i].shape, "save_params: tensor " + layout[i].name + " has the wrong shape");
    w.put_string(layout[i].name);
    w.put(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put(static_cast<std::uint32_t>(d));
    for (T v : t.data) w.put_f32(static_cast<float>(v));
  }
  w.put(io::crc32_of(w.bytes()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  io::write_all(out, w.bytes());
  if (!out) throw IoError("write failed: " + path);
}

/// Loads a parameter file; the stored config must equal `expected` when given.
template <class T>
ModelParams<T> load_params(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [] { throw IoError("parameter file truncated"); };
  if (bytes.size() < 12) fail();
  const std::span<const unsigned char> all(bytes);
  const auto body = all.first(all.size() - 4);
  io::Reader tr(all.last(4), fail);
  if (tr.get<std::uint32_t>() != io::crc32_of(body)) throw IoError("parameter file checksum mismatch: " + path);

  io::Reader r(body, fail);
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "PQEW")) throw IoError("not a parameter file: " + path);
  require(r.get<std::uint32_t>() == kParamsVersion, "unsupported parameter file version");
  ModelParams<T> p{detail::get_config(r), {}};
  p.config.validate();
  if (expected && !(*expected == p.config)) {
    throw ValidationError("parameter file config does not match the requested model config");
  }
  const auto layout = param_layout(p.config);
  require(r.get<std::uint32_t>() == layout.size(), "parameter file tensor count does not match its config");
  for (const auto& slot : layout) {
    require(r.get_string() == slot.name, "parameter file tensor order differs at " + slot.name);
    Shape s(r.get<std::uint8_t>());
    for (auto& d : s) d = r.get<std::uint32_t>();
    require(s == slot.shape, "parameter file shape mismatch at " + slot.name);
    Tensor<T> t(s);
    for (auto& v : t.data) v = static_cast<T>(r.get_f32());
    p.tensors.push_back(std::move(t));
  }
  return p;
}

}  // namespace pqe
