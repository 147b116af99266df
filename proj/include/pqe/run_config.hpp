#pragma once

// Flat key = value run configuration shared by every CLI subcommand, plus the
// hyper-parameter scenario presets used by the sweep.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pqe/dataset.hpp"
#include "pqe/error.hpp"
#include "pqe/key_value.hpp"
#include "pqe/model.hpp"
#include "pqe/train.hpp"

namespace pqe {

struct RunConfig {
  // dataset
  std::string mode = "A";
  std::uint64_t count = 100000;
  std::uint64_t data_seed = 0;
  double sample_rate = 10000.0;
  double duration = 0.2;
  std::uint64_t split_seed = 0;
  // model (seq_len follows from sample_rate * duration)
  ModelConfig model;
  std::uint64_t init_seed = 0;
  // optimizer
  OptimizerConfig optimizer;
  // training
  TrainConfig training;

  std::size_t seq_len() const { return static_cast<std::size_t>(std::llround(sample_rate * duration)); }

  DatasetConfig dataset_config() const {
    auto c = DatasetConfig::for_mode(mode, count, data_seed);
    c.sample_rate = sample_rate;
    c.duration = duration;
    return c;
  }

  ModelConfig model_config() const {
    ModelConfig m = model;
    m.seq_len = seq_len();
    return m;
  }

  void validate() const {
    require(mode == "A" || mode == "B", "mode must be A or B");
    require(count > 0 && count % kNumClasses == 0, "count must be a positive multiple of 10");
    require(sample_rate > 0.0 && duration > 0.0 && seq_len() > 0, "sample_rate * duration must give >= 1 sample");
    model_config().validate();
    optimizer.validate();
    training.validate();
  }
};

/// Desk-scale starting point for sweeps: 1 kHz sampling (200 samples),
/// 5,000 perturbed signals, 30 epochs.
inline RunConfig desk_sweep_defaults() {
  RunConfig c;
  c.mode = "B";
  c.count = 5000;
  c.sample_rate = 1000.0;
  c.training.epochs = 30;
  return c;
}

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

inline std::string join_units(const std::vector<std::size_t>& u) {
  std::string s;
  for (std::size_t i = 0; i < u.size(); ++i) s += (i ? "," : "") + std::to_string(u[i]);
  return s;
}

inline std::vector<std::size_t> split_units(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(kv::to_int<std::size_t>(key, item));
  require(!out.empty(), key + ": expected a comma-separated list of unit counts");
  return out;
}

/// Key bound to a field through `access(RunConfig&) -> Field&`.
template <class Access>
ConfigKey field_key(std::string name, std::string help, Access access) {
  using Field = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  return {name, std::move(help),
          [name, access](RunConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<Field>) {
              access(c) = kv::to_double(name, v);
            } else {
              access(c) = kv::to_int<Field>(name, v);
            }
          },
          [access](const RunConfig& c) {
            RunConfig copy = c;
            if constexpr (std::is_floating_point_v<Field>) {
              return kv::format(access(copy));
            } else {
              return std::to_string(access(copy));
            }
          }};
}

}  // namespace detail

/// Every accepted key in file order. Defaults come from a default-constructed RunConfig.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&k](std::string name, std::string help, auto access) {
      k.push_back(detail::field_key(std::move(name), std::move(help), access));
    };

    k.push_back({"mode", "dataset: A (clean) or B (noise, DC offset, amplitude and frequency variation)",
                 [](RunConfig& c, const std::string& v) { c.mode = v; }, [](const RunConfig& c) { return c.mode; }});
    num("count", "dataset: number of signals (multiple of 10)", [](RunConfig& c) -> std::uint64_t& { return c.count; });
    num("data_seed", "dataset: generation seed", [](RunConfig& c) -> std::uint64_t& { return c.data_seed; });
    num("sample_rate", "dataset: sampling frequency in Hz", [](RunConfig& c) -> double& { return c.sample_rate; });
    num("duration", "dataset: record length in seconds", [](RunConfig& c) -> double& { return c.duration; });
    num("split_seed", "dataset: 80/10/10 split seed", [](RunConfig& c) -> std::uint64_t& { return c.split_seed; });

    num("d_model", "model: features per time step", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    num("num_blocks", "model: encoder blocks", [](RunConfig& c) -> std::size_t& { return c.model.num_blocks; });
    num("num_heads", "model: attention heads", [](RunConfig& c) -> std::size_t& { return c.model.num_heads; });
    num("head_size", "model: width of each attention head", [](RunConfig& c) -> std::size_t& { return c.model.head_size; });
    num("ff_dim", "model: pointwise feed-forward width", [](RunConfig& c) -> std::size_t& { return c.model.ff_dim; });
    k.push_back({"mlp_units", "model: comma-separated hidden widths of the classifier head",
                 [](RunConfig& c, const std::string& v) { c.model.mlp_units = detail::split_units("mlp_units", v); },
                 [](const RunConfig& c) { return detail::join_units(c.model.mlp_units); }});
    num("mlp_dropout", "model: dropout after each head layer", [](RunConfig& c) -> double& { return c.model.mlp_dropout; });
    num("dropout", "model: dropout inside encoder blocks", [](RunConfig& c) -> double& { return c.model.block_dropout; });
    num("num_classes", "model: output classes", [](RunConfig& c) -> std::size_t& { return c.model.num_classes; });
    num("init_seed", "model: parameter initialization seed", [](RunConfig& c) -> std::uint64_t& { return c.init_seed; });

    k.push_back({"optimizer", "optimizer: adam or sgd",
                 [](RunConfig& c, const std::string& v) { c.optimizer.kind = optimizer_from_name(v); },
                 [](const RunConfig& c) { return optimizer_name(c.optimizer.kind); }});
    num("learning_rate", "optimizer: step size", [](RunConfig& c) -> double& { return c.optimizer.learning_rate; });
    num("beta1", "optimizer: Adam first-moment decay", [](RunConfig& c) -> double& { return c.optimizer.beta1; });
    num("beta2", "optimizer: Adam second-moment decay", [](RunConfig& c) -> double& { return c.optimizer.beta2; });
    num("epsilon", "optimizer: Adam denominator offset", [](RunConfig& c) -> double& { return c.optimizer.epsilon; });
    num("momentum", "optimizer: SGD momentum", [](RunConfig& c) -> double& { return c.optimizer.momentum; });

    num("epochs", "training: maximum epochs", [](RunConfig& c) -> std::size_t& { return c.training.epochs; });
    num("batch_size", "training: signals per step", [](RunConfig& c) -> std::size_t& { return c.training.batch_size; });
    num("patience", "training: epochs without validation-loss improvement before stopping",
         [](RunConfig& c) -> std::size_t& { return c.training.patience; });
    k.push_back({"restore_best", "training: return best-epoch parameters (true/false)",
                 [](RunConfig& c, const std::string& v) { c.training.restore_best = kv::to_bool("restore_best", v); },
                 [](const RunConfig& c) { return std::string(c.training.restore_best ? "true" : "false"); }});
    num("shuffle_seed", "training: batch order seed", [](RunConfig& c) -> std::uint64_t& { return c.training.shuffle_seed; });
    num("dropout_seed", "training: dropout mask seed", [](RunConfig& c) -> std::uint64_t& { return c.training.dropout_seed; });
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return k;
  }
  throw ValidationError("unknown config key '" + name + "'");
}

inline void set_key(RunConfig& c, const std::string& name, const std::string& value) { find_key(name).set(c, value); }

inline std::string get_key(const RunConfig& c, const std::string& name) { return find_key(name).get(c); }

/// Applies a key = value document on top of `base`. Unknown keys are errors.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  for (const auto& [key, value] : kv::parse(text)) set_key(base, key, value);
  return base;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  return parse_run_config(kv::read_file(path), std::move(base));
}

inline std::string run_config_to_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

struct ScenarioPreset {
  std::string name;
  std::string description;
  std::vector<std::pair<std::string, std::string>> overrides;

  RunConfig apply(RunConfig c) const {
    for (const auto& [k, v] : overrides) set_key(c, k, v);
    return c;
  }
};

inline const std::vector<ScenarioPreset>& scenario_presets() {
  static const std::vector<ScenarioPreset> presets = {
      {"S1", "smaller network",
       {{"head_size", "128"}, {"num_blocks", "2"}, {"mlp_units", "64"}, {"mlp_dropout", "0.2"}, {"dropout", "0.12"}}},
      {"S2", "lower learning rate", {{"learning_rate", "2.5e-5"}}},
      {"S3", "2 attention heads", {{"num_heads", "2"}}},
      {"S4", "3 attention heads", {{"num_heads", "3"}}},
      {"S5", "4 attention heads", {{"num_heads", "4"}}},
      {"S6", "plain SGD", {{"optimizer", "sgd"}}},
  };
  return presets;
}

inline const ScenarioPreset& find_scenario(const std::string& name) {
  for (const auto& s : scenario_presets()) {
    if (s.name == name) return s;
  }
  throw ValidationError("unknown scenario '" + name + "' (expected S1..S6)");
}

}  // namespace pqe
