#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pqe/autodiff.hpp"
#include "pqe/dataset.hpp"
#include "pqe/error.hpp"
#include "pqe/key_value.hpp"
#include "pqe/model.hpp"
#include "pqe/rng.hpp"

namespace pqe {

/// Mean sparse-label cross-entropy of logits [B, C], via log-sum-exp.
template <class T>
ad::Var<T> cross_entropy(const ad::Var<T>& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  require(s.size() == 2, "cross_entropy: logits must be [B, C]");
  const std::size_t batch = s[0], classes = s[1];
  require(labels.size() == batch, "cross_entropy: label count does not match batch");
  for (int l : labels) require(l >= 0 && static_cast<std::size_t>(l) < classes, "cross_entropy: label out of range");

  const auto& z = logits.value().data;
  std::vector<T> probs(z.size());
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z.data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T sum = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - mx);
      sum += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= sum;
    total += (mx + std::log(sum)) - row[labels[b]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor<T>::scalar(total / T(batch)), {logits},
      [logits, batch, classes, probs = std::move(probs), lab = std::move(lab)](ad::Tape<T>& t, std::span<const T> g) {
        auto gl = t.grad(logits);
        const T w = g[0] / T(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < classes; ++c) {
            const T target = static_cast<int>(c) == lab[b] ? T(1) : T(0);
            gl[b * classes + c] += w * (probs[b * classes + c] - target);
          }
        }
      });
}

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double momentum = 0.0;

  void validate() const {
    require(learning_rate > 0.0, "learning rate must be positive");
    require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "Adam betas must lie in (0, 1)");
    require(epsilon > 0.0, "Adam epsilon must be positive");
    require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  }
};

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ValidationError("unknown optimizer '" + s + "' (adam | sgd)");
}

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;

  static AdamState zeros_like(std::span<const Tensor<T>> params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape);
      s.v.emplace_back(p.shape);
    }
    return s;
  }
};

namespace detail {
template <class T>
void check_aligned(std::span<const Tensor<T>> params, std::span<const Tensor<T>> grads) {
  require(params.size() == grads.size(), "optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].shape == grads[i].shape, "optimizer: shape mismatch at tensor " + std::to_string(i));
  }
}
}  // namespace detail

/// One bias-corrected Adam update at step t (t >= 1).
template <class T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state, std::uint64_t t,
               const OptimizerConfig& cfg) {
  detail::check_aligned<T>(params, grads);
  require(t >= 1, "adam_step: t must be >= 1");
  require(state.m.size() == params.size() && state.v.size() == params.size(), "adam_step: state does not match");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(state.m[i].shape == params[i].shape, "adam_step: state shape mismatch");
    auto& w = params[i].data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const auto& g = grads[i].data;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mhat = double(m[j]) / c1;
      const double vhat = double(v[j]) / c2;
      w[j] -= static_cast<T>(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  }
  state.step = t;
}

/// w <- w - lr g, or heavy-ball momentum when cfg.momentum > 0.
template <class T>
void sgd_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, const OptimizerConfig& cfg,
              std::vector<Tensor<T>>* velocity = nullptr) {
  detail::check_aligned<T>(params, grads);
  const T lr = T(cfg.learning_rate);
  if (cfg.momentum == 0.0) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].size(); ++j) params[i][j] -= lr * grads[i][j];
    }
    return;
  }
  if (velocity == nullptr) throw ValidationError("sgd_step: momentum needs a velocity buffer");
  if (velocity->empty()) {
    for (const auto& p : params) velocity->emplace_back(p.shape);
  }
  const T mu = T(cfg.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      T& vel = (*velocity)[i][j];
      vel = mu * vel - lr * grads[i][j];
      params[i][j] += vel;
    }
  }
}

/// Adam or SGD with its state.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads) {
    if (cfg_.kind == OptimizerKind::adam) {
      if (adam_.m.empty()) adam_ = AdamState<T>::zeros_like(params);
      adam_step<T>(params, grads, adam_, adam_.step + 1, cfg_);
    } else {
      sgd_step<T>(params, grads, cfg_, &velocity_);
    }
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  AdamState<T> adam_;
  std::vector<Tensor<T>> velocity_;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::size_t patience = 10;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t dropout_seed = 0;
  bool restore_best = true;

  void validate() const {
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch size must be >= 1");
    require(patience >= 1, "patience must be >= 1");
  }
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = 0.0, val_acc = 0.0;

  bool operator==(const EpochStats&) const = default;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::size_t stopped_epoch = 0;
  std::size_t best_epoch = 0;
  double wall_seconds = 0.0;

  double best_val_loss() const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : epochs) best = std::min(best, e.val_loss);
    return best;
  }

  /// One line per epoch: epoch train_loss train_acc val_loss val_acc.
  /// Wall time is left out so that reruns compare byte-for-byte.
  std::string to_text() const {
    std::ostringstream os;
    os << "# stopped_epoch = " << stopped_epoch << "\n# best_epoch = " << best_epoch << "\n";
    os << "# epoch train_loss train_acc val_loss val_acc\n";
    for (const auto& e : epochs) {
      os << e.epoch << ' ' << kv::format(e.train_loss) << ' ' << kv::format(e.train_acc) << ' '
         << kv::format(e.val_loss) << ' ' << kv::format(e.val_acc) << '\n';
    }
    return os.str();
  }

  bool same_trajectory(const TrainReport& o) const {
    return epochs == o.epochs && stopped_epoch == o.stopped_epoch && best_epoch == o.best_epoch;
  }
};

/// Patience rule on validation loss. Ties are not improvements.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when training should stop after this epoch.
  bool observe(std::size_t epoch, double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch;
      wait_ = 0;
      improved_ = true;
      return false;
    }
    improved_ = false;
    return ++wait_ >= patience_;
  }

  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t wait_ = 0;
  bool improved_ = false;
};

/// Copies rows `indices` of the store into a [B, seq_len] tensor.
template <class T>
Tensor<T> gather_batch(const SignalStore& store, std::span<const std::size_t> indices, std::vector<int>* labels) {
  Tensor<T> out(Shape{indices.size(), store.seq_len});
  if (labels) labels->clear();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto sig = store.signal(indices[b]);
    std::copy(sig.begin(), sig.end(), out.data.begin() + static_cast<long>(b * store.seq_len));
    if (labels) labels->push_back(store.labels[indices[b]]);
  }
  return out;
}

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<int> truth;
};

template <class T>
int argmax_row(std::span<const T> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Inference-mode loss, accuracy and predictions over `indices`.
template <class T>
Evaluation evaluate(const ModelParams<T>& params, const SignalStore& store, std::span<const std::size_t> indices,
                    std::size_t chunk = 256) {
  Evaluation ev;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<int> labels;
  for (std::size_t at = 0; at < indices.size(); at += chunk) {
    const auto part = indices.subspan(at, std::min(chunk, indices.size() - at));
    const auto batch = gather_batch<T>(store, part, &labels);
    ad::Tape<T> tape;
    const auto vars = bind(tape, params, false);
    const auto logits = forward<T>(params.config, vars, tape.constant(batch));
    loss_sum += double(cross_entropy(logits, labels).value()[0]) * double(part.size());
    const std::size_t classes = params.config.num_classes;
    for (std::size_t b = 0; b < part.size(); ++b) {
      const int pred = argmax_row<T>(std::span<const T>(logits.value().data).subspan(b * classes, classes));
      ev.predictions.push_back(pred);
      ev.truth.push_back(labels[b]);
      correct += pred == labels[b];
    }
  }
  if (!indices.empty()) {
    ev.loss = loss_sum / double(indices.size());
    ev.accuracy = double(correct) / double(indices.size());
  }
  return ev;
}

/// One optimizer step on a batch; returns (loss, correct predictions).
template <class T>
std::pair<double, std::size_t> train_step(ModelParams<T>& params, Optimizer<T>& opt, const Tensor<T>& batch,
                                          std::span<const int> labels, Stream& dropout_rng) {
  ad::Tape<T> tape;
  const auto vars = bind(tape, params, true);
  ForwardOptions o;
  o.training = true;
  o.rng = &dropout_rng;
  const auto logits = forward<T>(params.config, vars, tape.constant(batch), o);
  const auto loss = cross_entropy(logits, labels);
  const double loss_value = loss.value()[0];
  if (!std::isfinite(loss_value)) throw DivergenceError("training diverged: non-finite loss");
  std::size_t correct = 0;
  const std::size_t classes = params.config.num_classes;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    correct += argmax_row<T>(std::span<const T>(logits.value().data).subspan(b * classes, classes)) == labels[b];
  }
  const auto grads = tape.backward(loss);
  std::vector<Tensor<T>> g;
  g.reserve(vars.size());
  for (const auto& v : vars) g.push_back(grads[v]);
  opt.step(params.tensors, g);
  // ReLU maps NaN to 0, so a poisoned weight need not surface in the loss.
  for (const auto& t : params.tensors) {
    for (T v : t.data) {
      if (!std::isfinite(v)) throw DivergenceError("training diverged: non-finite parameter");
    }
  }
  return {loss_value, correct};
}

struct TrainResult {
  ModelParams<float> params;
  TrainReport report;
};

/// Mini-batch training with per-epoch validation and early stopping on
/// validation loss. Returns the best-epoch parameters when restore_best is set.
inline TrainResult train(ModelParams<float> params, const SignalStore& store, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, const TrainConfig& tc, const OptimizerConfig& oc,
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  tc.validate();
  require(!train_idx.empty() && !val_idx.empty(), "train: training and validation splits must be non-empty");
  require(store.seq_len == params.config.seq_len, "train: store seq_len " + std::to_string(store.seq_len) +
                                                      " does not match model seq_len " +
                                                      std::to_string(params.config.seq_len));
  const auto start = std::chrono::steady_clock::now();
  Optimizer<float> opt(oc);
  EarlyStopping stopper(tc.patience);
  TrainResult result{params, {}};
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::vector<int> labels;
  std::uint64_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::sort(order.begin(), order.end());
    Stream shuffle_rng(derive_key(tc.shuffle_seed, epoch));
    shuffle(std::span<std::size_t>(order), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t at = 0; at < order.size(); at += tc.batch_size) {
      const auto part = std::span<const std::size_t>(order).subspan(at, std::min(tc.batch_size, order.size() - at));
      const auto batch = gather_batch<float>(store, part, &labels);
      Stream dropout_rng(derive_key(tc.dropout_seed, ++global_step));
      const auto [loss, ok] = train_step(params, opt, batch, labels, dropout_rng);
      loss_sum += loss * double(part.size());
      correct += ok;
    }

    const auto val = evaluate(params, store, val_idx);
    if (!std::isfinite(val.loss)) throw DivergenceError("training diverged: non-finite validation loss");
    EpochStats stats{epoch, loss_sum / double(order.size()), double(correct) / double(order.size()), val.loss,
                     val.accuracy};
    result.report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);

    const bool stop = stopper.observe(epoch, val.loss);
    if (stopper.improved()) result.params = params;
    result.report.stopped_epoch = epoch;
    if (stop) break;
  }
  result.report.best_epoch = stopper.best_epoch();
  if (!tc.restore_best) result.params = params;
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace pqe
