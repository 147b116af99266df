#pragma once

// End-to-end runs shared by the CLI and the acceptance checks: build a
// dataset, train one configuration, evaluate it, sweep scenario presets, and
// gradient-check a small model layer by layer.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pqe/dataset.hpp"
#include "pqe/eval.hpp"
#include "pqe/gradcheck.hpp"
#include "pqe/model.hpp"
#include "pqe/run_config.hpp"
#include "pqe/train.hpp"

namespace pqe {

inline Dataset make_dataset(const RunConfig& c) { return generate_dataset(c.dataset_config()); }

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("split must be train, val or test, got '" + s + "'");
}

struct RunOutcome {
  TrainResult trained;
  ConfusionMatrix confusion;
  MetricReport metrics;
};

/// Confusion matrix and metrics of `params` on one split of `store`.
inline std::pair<ConfusionMatrix, MetricReport> evaluate_split(const ModelParams<float>& params,
                                                               const SignalStore& store,
                                                               const SplitAssignment& split, Split which) {
  const auto idx = split.indices(which);
  require(!idx.empty(), "evaluation split is empty");
  const auto ev = evaluate(params, store, idx);
  auto cm = confusion(ev.predictions, ev.truth, params.config.num_classes);
  auto report = metric_report(cm);
  return {std::move(cm), std::move(report)};
}

/// Splits, initializes, trains and scores on the test split.
inline RunOutcome run_experiment(const RunConfig& c, const SignalStore& store,
                                 const std::function<void(const EpochStats&)>& on_epoch = {}) {
  c.validate();
  ModelConfig mc = c.model_config();
  mc.seq_len = store.seq_len;
  const auto split = stratified_split(store.labels, c.split_seed);
  auto trained = train(init_params<float>(mc, c.init_seed), store, split.indices(Split::train),
                       split.indices(Split::val), c.training, c.optimizer, on_epoch);
  auto [cm, report] = evaluate_split(trained.params, store, split, Split::test);
  return {std::move(trained), std::move(cm), std::move(report)};
}

// ---------------------------------------------------------------------------
// Single-batch overfit probe

struct OverfitResult {
  std::size_t steps = 0;  // optimizer steps taken
  double final_loss = 0.0;
  bool reached = false;
  std::vector<double> losses;  // inference-mode batch loss after each step
};

/// Adam steps on one fixed batch until the inference-mode loss on that batch
/// drops below `target` or `max_steps` is spent.
inline OverfitResult overfit_batch(const RunConfig& c, const SignalStore& store, std::span<const std::size_t> batch_idx,
                                   double target, std::size_t max_steps) {
  c.validate();
  ModelConfig mc = c.model_config();
  mc.seq_len = store.seq_len;
  auto params = init_params<float>(mc, c.init_seed);
  Optimizer<float> opt(c.optimizer);
  std::vector<int> labels;
  const auto batch = gather_batch<float>(store, batch_idx, &labels);
  OverfitResult r;
  while (r.steps < max_steps) {
    Stream dropout_rng(derive_key(c.training.dropout_seed, ++r.steps));
    train_step(params, opt, batch, labels, dropout_rng);
    r.final_loss = evaluate(params, store, batch_idx).loss;
    r.losses.push_back(r.final_loss);
    if (r.final_loss < target) {
      r.reached = true;
      break;
    }
  }
  return r;
}

/// First record of each of the first `n` classes: a batch with no repeated label.
inline std::vector<std::size_t> one_per_class(const SignalStore& store, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.labels[i] == k) {
        out.push_back(i);
        break;
      }
    }
  }
  require(out.size() == n, "store lacks some of the requested classes");
  return out;
}

// ---------------------------------------------------------------------------
// Scenario sweep

struct SweepRow {
  std::string name;
  std::string description;
  double diag_overall = 0.0;
  double eq6_weighted = 0.0;
  std::size_t best_epoch = 0;
  std::size_t stopped_epoch = 0;
  double wall_seconds = 0.0;
};

/// Base run followed by each named preset, all on the same dataset and split.
/// Presets only touch model, optimizer and training keys.
inline std::vector<SweepRow> run_sweep(
    const RunConfig& base, const std::vector<std::string>& scenarios, const SignalStore& store,
    const std::function<void(const std::string&, const RunOutcome&)>& on_run = {},
    const std::function<void(const std::string&, const EpochStats&)>& on_epoch = {}) {
  std::vector<std::pair<std::string, std::string>> runs{{"base", "reference hyper-parameters"}};
  for (const auto& s : scenarios) runs.emplace_back(s, find_scenario(s).description);

  std::vector<SweepRow> rows;
  for (const auto& [name, description] : runs) {
    const RunConfig c = name == "base" ? base : find_scenario(name).apply(base);
    const std::string tag = name;
    auto outcome = run_experiment(c, store, [&](const EpochStats& e) {
      if (on_epoch) on_epoch(tag, e);
    });
    rows.push_back({name, description, outcome.metrics.diag_overall, outcome.metrics.eq6_weighted,
                    outcome.trained.report.best_epoch, outcome.trained.report.stopped_epoch,
                    outcome.trained.report.wall_seconds});
    if (on_run) on_run(name, outcome);
  }
  return rows;
}

/// Scenario | description | accuracy columns, one row per run.
inline std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "scenario" << std::setw(28) << "variation" << std::right << std::setw(14)
     << "diag_overall" << std::setw(14) << "eq6_weighted" << std::setw(7) << "best" << std::setw(9) << "stopped"
     << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << r.name << std::setw(28) << r.description << std::right << std::setw(13)
       << r.diag_overall * 100.0 << '%' << std::setw(13) << r.eq6_weighted * 100.0 << '%' << std::setw(7)
       << r.best_epoch << std::setw(9) << r.stopped_epoch << '\n';
  }
  return os.str();
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "scenario,variation,diag_overall,eq6_weighted,best_epoch,stopped_epoch\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.description << ',' << kv::format(r.diag_overall) << ',' << kv::format(r.eq6_weighted)
       << ',' << r.best_epoch << ',' << r.stopped_epoch << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Gradient check of a whole (small) model

/// seq_len 8, one block, narrow head: small enough for central differences
/// over every parameter.
inline RunConfig gradcheck_defaults() {
  RunConfig c;
  c.sample_rate = 40.0;  // 8 samples over 0.2 s
  c.model.num_blocks = 1;
  c.model.head_size = 8;
  c.model.mlp_units = {16};
  return c;
}

struct LayerGradCheck {
  std::string layer;   // parameter name prefix, e.g. block0.attn
  std::string tensor;  // worst tensor within the layer
  ad::GradCheckResult worst;
};

/// Cross-entropy of a random 4-signal batch at jittered initial parameters, in training mode with a fixed
/// dropout mask, checked at 64-bit against central differences. One entry per
/// layer, in parameter order.
inline std::vector<LayerGradCheck> gradcheck_model(const RunConfig& c, std::size_t batch = 4) {
  c.validate();
  const ModelConfig mc = c.model_config();
  const auto layout = param_layout(mc);
  Stream rng(c.init_seed, 0x67726164ULL);  // "grad"
  // Glorot init plus jitter so zero biases and unit gains are not special.
  // Uniform [-1, 1] weights saturate the softmax and bury out.w under roundoff.
  auto inputs = init_params<double>(mc, c.init_seed).tensors;
  for (auto& t : inputs) {
    for (auto& v : t.data) v += rng.uniform(-0.1, 0.1);
  }
  Tensor<double> x(Shape{batch, mc.seq_len});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  std::vector<int> labels(batch);
  for (auto& l : labels) l = static_cast<int>(rng.below(mc.num_classes));
  const std::uint64_t mask_key = rng.next_u64();

  const auto per_input = ad::check_gradients_per_input(
      [&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) {
        Stream mask(mask_key);
        ForwardOptions o;
        o.training = true;
        o.rng = &mask;
        return cross_entropy(forward<double>(mc, v, t.constant(x), o), labels);
      },
      inputs);

  std::vector<LayerGradCheck> out;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& name = layout[i].name;
    const std::string layer = name.substr(0, name.rfind('.'));
    if (out.empty() || out.back().layer != layer) out.push_back({layer, name, per_input[i]});
    if (per_input[i].max_rel_error > out.back().worst.max_rel_error) {
      out.back().tensor = name;
      out.back().worst = per_input[i];
    }
  }
  return out;
}

inline std::string gradcheck_table(const std::vector<LayerGradCheck>& layers) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "layer" << std::setw(18) << "worst tensor" << std::right << std::setw(7)
     << "index" << std::setw(14) << "rel_error" << std::setw(16) << "analytic" << std::setw(16) << "numeric" << '\n';
  os << std::scientific << std::setprecision(3);
  for (const auto& l : layers) {
    os << std::left << std::setw(14) << l.layer << std::setw(18) << l.tensor << std::right << std::setw(7)
       << l.worst.worst_index << std::setw(14) << l.worst.max_rel_error << std::setw(16) << l.worst.analytic
       << std::setw(16) << l.worst.numeric << '\n';
  }
  return os.str();
}

}  // namespace pqe
