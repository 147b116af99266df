// pqe: generate datasets, train and evaluate the classifier, sweep scenario
// presets, plot records and gradient-check the model.
//
// Exit codes: 0 ok, 1 usage, 2 I/O, 3 validation, 4 numeric divergence or
// failed gradient check, 70 internal error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "pqe/pipeline.hpp"
#include "pqe/plot.hpp"

namespace fs = std::filesystem;
using namespace pqe;

namespace {

constexpr int kExitGradcheck = static_cast<int>(ErrorFamily::divergence);

/// Registers --<key> for every RunConfig key, documenting the default taken
/// from `defaults`. Values are collected raw and applied after the config file.
struct ConfigFlags {
  RunConfig defaults;
  std::string config_path;
  std::map<std::string, std::string> given;

  void attach(CLI::App* app, const std::vector<std::string>& aliases = {}) {
    app->add_option("--config", config_path, "key = value file applied before flags")->check(CLI::ExistingFile);
    for (const auto& k : config_keys()) {
      std::string names = "--" + k.name;
      for (const auto& a : aliases) {
        if (a.substr(0, a.find('=')) == k.name) names += ",--" + a.substr(a.find('=') + 1);
      }
      app->add_option_function<std::string>(
             names, [this, name = k.name](const std::string& v) { given[name] = v; },
             k.help + " [default: " + k.get(defaults) + "]")
          ->type_name("VALUE");
    }
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? defaults : load_run_config(config_path, defaults);
    for (const auto& [k, v] : given) set_key(c, k, v);
    c.validate();
    return c;
  }
};

std::vector<std::size_t> parse_indices(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(kv::to_int<std::size_t>("indices", item));
  }
  require(!out.empty(), "indices: expected a comma-separated list");
  return out;
}

std::vector<std::string> parse_scenarios(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    find_scenario(item);
    out.push_back(item);
  }
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void print_epoch(const std::string& tag, const EpochStats& e) {
  std::fprintf(stderr, "%s epoch %3zu  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f\n", tag.c_str(),
               e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc);
}

/// Store loader that also checks the manifest when one sits next to it.
SignalStore load_data(const std::string& path) {
  auto store = load_store(path);
  if (fs::exists(manifest_path(path))) {
    const auto m = load_manifest(path);
    require(m.seq_len == store.seq_len && m.total_count == store.size(), "manifest does not describe " + path);
  }
  return store;
}

void write_metrics(const std::string& dir, const ConfusionMatrix& cm, const MetricReport& r) {
  ensure_dir(dir);
  write_text(dir + "/metrics.txt", report_table(r));
  write_text(dir + "/metrics.csv", report_csv(r));
  write_text(dir + "/confusion_percent.csv", confusion_percent_csv(cm));
  write_text(dir + "/confusion_counts.csv", confusion_counts_csv(cm));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power-quality event classification: data, training, evaluation."};
  app.require_subcommand(1);

  // generate
  ConfigFlags gen_flags;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "synthesize a labelled signal store");
  gen_flags.attach(gen, {"data_seed=seed"});
  gen->add_option("--out", gen_out, "store path (manifest and provenance written alongside)")->required();

  // train
  ConfigFlags train_flags;
  std::string train_data, train_out, train_report;
  auto* trn = app.add_subcommand("train", "train on a store and save parameters");
  train_flags.attach(trn);
  trn->add_option("--data", train_data, "signal store")->required();
  trn->add_option("--out", train_out, "parameter file to write")->required();
  trn->add_option("--report", train_report, "training report path [default: <out>.report.txt]");

  // eval
  ConfigFlags eval_flags;
  std::string eval_model, eval_data, eval_split = "test", eval_out;
  auto* evl = app.add_subcommand("eval", "score saved parameters on one split");
  eval_flags.attach(evl);
  evl->add_option("--model", eval_model, "parameter file")->required();
  evl->add_option("--data", eval_data, "signal store")->required();
  evl->add_option("--split", eval_split, "train | val | test [default: test]");
  evl->add_option("--out-dir", eval_out, "directory for metric and confusion CSV files")->required();

  // sweep
  ConfigFlags sweep_flags;
  sweep_flags.defaults = desk_sweep_defaults();
  std::string sweep_list = "S1,S2,S3,S4,S5,S6", sweep_out, sweep_data;
  auto* swp = app.add_subcommand("sweep", "base run plus scenario presets on one dataset");
  sweep_flags.attach(swp);
  swp->add_option("--scenarios", sweep_list, "comma list of S1..S6; empty for the base run only [default: all]");
  swp->add_option("--data", sweep_data, "existing store (otherwise generated from the dataset keys)");
  swp->add_option("--out-dir", sweep_out, "directory for sweep.csv and per-run reports")->required();

  // plot
  std::string plot_data, plot_indices, plot_out;
  double plot_rate = 0.0;
  auto* plt = app.add_subcommand("plot", "time-domain SVG and CSV of selected records");
  plt->add_option("--data", plot_data, "signal store")->required();
  plt->add_option("--indices", plot_indices, "comma list of record indices")->required();
  plt->add_option("--out-dir", plot_out, "output directory")->required();
  plt->add_option("--sample-rate", plot_rate, "Hz [default: from the manifest]");

  // gradcheck
  ConfigFlags grad_flags;
  grad_flags.defaults = gradcheck_defaults();
  double grad_tol = 1e-5;
  auto* grd = app.add_subcommand("gradcheck", "central-difference check of every model parameter");
  grad_flags.attach(grd);
  grd->add_option("--tolerance", grad_tol, "maximum relative error [default: 1e-5]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorFamily::usage);
  }

  try {
    if (*gen) {
      const auto c = gen_flags.resolve();
      const auto ds = make_dataset(c);
      save_dataset(gen_out, ds);
      std::cout << "wrote " << gen_out << ": " << ds.store.size() << " records of " << ds.store.seq_len
                << " samples, dataset " << ds.manifest.dataset_id << ", seed " << ds.manifest.seed << '\n';
      std::vector<std::size_t> per_class(kNumClasses, 0);
      for (auto l : ds.store.labels) ++per_class[l];
      for (int k = 0; k < kNumClasses; ++k) std::cout << "  C" << k + 1 << ' ' << per_class[k] << '\n';
      std::cout << "split per class: " << ds.manifest.split_train / kNumClasses << " train, "
                << ds.manifest.split_val / kNumClasses << " val, " << ds.manifest.split_test / kNumClasses
                << " test\n";
    } else if (*trn) {
      auto c = train_flags.resolve();
      const auto store = load_data(train_data);
      std::cout << run_config_to_text(c);
      const auto out = run_experiment(c, store, [](const EpochStats& e) { print_epoch("train", e); });
      save_params(train_out, out.trained.params);
      write_text(train_report.empty() ? train_out + ".report.txt" : train_report, out.trained.report.to_text());
      std::cout << "best epoch " << out.trained.report.best_epoch << " of " << out.trained.report.stopped_epoch
                << '\n'
                << report_table(out.metrics);
    } else if (*evl) {
      const auto c = eval_flags.resolve();
      const auto which = split_from_name(eval_split);
      const auto params = load_params<float>(eval_model);
      const auto store = load_data(eval_data);
      require(store.seq_len == params.config.seq_len, "store seq_len does not match the model");
      const auto split = stratified_split(store.labels, c.split_seed);
      const auto [cm, report] = evaluate_split(params, store, split, which);
      write_metrics(eval_out, cm, report);
      std::cout << report_table(report);
    } else if (*swp) {
      const auto c = sweep_flags.resolve();
      const auto scenarios = parse_scenarios(sweep_list);
      ensure_dir(sweep_out);
      const SignalStore store = sweep_data.empty() ? make_dataset(c).store : load_data(sweep_data);
      const auto rows = run_sweep(
          c, scenarios, store,
          [&](const std::string& name, const RunOutcome& o) {
            write_text(sweep_out + "/" + name + ".report.txt", o.trained.report.to_text());
            write_metrics(sweep_out + "/" + name, o.confusion, o.metrics);
          },
          print_epoch);
      write_text(sweep_out + "/sweep.csv", sweep_csv(rows));
      std::cout << sweep_table(rows);
    } else if (*plt) {
      const auto store = load_store(plot_data);
      double rate = plot_rate;
      if (rate <= 0.0) rate = load_manifest(plot_data).sample_rate;
      ensure_dir(plot_out);
      for (auto i : parse_indices(plot_indices)) {
        require(i < store.size(), "index " + std::to_string(i) + " out of range (store has " +
                                      std::to_string(store.size()) + " records)");
        const std::string stem = plot_out + "/signal_" + std::to_string(i);
        const std::string title = "record " + std::to_string(i) + ", class C" + std::to_string(store.labels[i] + 1);
        write_text(stem + ".csv", signal_csv<float>(store.signal(i), rate));
        write_text(stem + ".svg", signal_svg<float>(store.signal(i), rate, title));
        std::cout << "wrote " << stem << ".svg\n";
      }
    } else if (*grd) {
      const auto c = grad_flags.resolve();
      const auto layers = gradcheck_model(c);
      std::cout << gradcheck_table(layers);
      double worst = 0.0;
      for (const auto& l : layers) worst = std::max(worst, l.worst.max_rel_error);
      std::cout << "max relative error " << worst << (worst < grad_tol ? " (ok)" : " (above tolerance)") << '\n';
      if (!(worst < grad_tol)) return kExitGradcheck;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.family());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 70;
  }
  return 0;
}
