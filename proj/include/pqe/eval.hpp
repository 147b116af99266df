#pragma once

// Confusion matrices and accuracy metrics.
//
// Two accuracies are reported side by side:
//   eq6_weighted - weighted mean of one-vs-rest accuracies (tp+tn)/N
//   diag_overall - trace / N (equals the mean per-class recall when balanced)

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pqe/error.hpp"
#include "pqe/key_value.hpp"

namespace pqe {

/// Row = true class, column = predicted class.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n, std::vector<std::string> labels = {})
      : n_(n), counts_(n * n, 0), labels_(std::move(labels)) {
    require(n >= 1, "confusion matrix needs at least one class");
    if (labels_.empty()) {
      for (std::size_t i = 0; i < n; ++i) labels_.push_back("C" + std::to_string(i + 1));
    }
    require(labels_.size() == n, "confusion matrix label count mismatch");
  }

  /// Builds counts from a row-percentage table at `per_class` samples per row,
  /// rounding to the nearest count.
  static ConfusionMatrix from_percentages(std::span<const double> pct, std::size_t n, std::uint64_t per_class) {
    require(pct.size() == n * n, "percentage table must be n x n");
    ConfusionMatrix cm(n);
    for (std::size_t i = 0; i < n * n; ++i) {
      require(pct[i] >= 0.0, "percentages must be non-negative");
      cm.counts_[i] = static_cast<std::uint64_t>(std::llround(pct[i] * static_cast<double>(per_class) / 100.0));
    }
    return cm;
  }

  std::size_t size() const { return n_; }
  const std::vector<std::string>& labels() const { return labels_; }

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * n_ + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * n_ + pred]; }

  std::uint64_t row_sum(std::size_t i) const {
    return std::accumulate(counts_.begin() + static_cast<long>(i * n_), counts_.begin() + static_cast<long>((i + 1) * n_),
                           std::uint64_t{0});
  }
  std::uint64_t col_sum(std::size_t j) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n_; ++i) s += at(i, j);
    return s;
  }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n_; ++i) s += at(i, i);
    return s;
  }

  /// Row-normalized percentages; an empty row stays at zero.
  std::vector<double> row_percentages() const {
    std::vector<double> out(n_ * n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      const auto r = row_sum(i);
      if (r == 0) continue;
      for (std::size_t j = 0; j < n_; ++j) out[i * n_ + j] = 100.0 * static_cast<double>(at(i, j)) / static_cast<double>(r);
    }
    return out;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
  std::vector<std::string> labels_;
};

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> truth, std::size_t n) {
  require(preds.size() == truth.size(), "confusion: prediction/truth length mismatch");
  ConfusionMatrix cm(n);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    require(preds[k] >= 0 && static_cast<std::size_t>(preds[k]) < n && truth[k] >= 0 &&
                static_cast<std::size_t>(truth[k]) < n,
            "confusion: label out of range");
    ++cm.at(static_cast<std::size_t>(truth[k]), static_cast<std::size_t>(preds[k]));
  }
  return cm;
}

/// One-vs-rest accuracy (tp + tn) / N of class i.
inline double per_class_accuracy(const ConfusionMatrix& cm, std::size_t i) {
  require(i < cm.size(), "per_class_accuracy: class index out of range");
  const auto n = cm.total();
  require(n > 0, "per_class_accuracy: empty matrix");
  const auto tp = cm.at(i, i);
  const auto fn = cm.row_sum(i) - tp;
  const auto fp = cm.col_sum(i) - tp;
  const auto tn = n - tp - fn - fp;
  return static_cast<double>(tp + tn) / static_cast<double>(n);
}

/// sum_i w_i acc_i / sum_i w_i.
inline double weighted_accuracy(const ConfusionMatrix& cm, std::span<const double> weights) {
  require(weights.size() == cm.size(), "weighted_accuracy: weight count does not match class count");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < cm.size(); ++i) {
    require(weights[i] >= 0.0, "weighted_accuracy: weights must be non-negative");
    if (weights[i] == 0.0) continue;
    num += weights[i] * per_class_accuracy(cm, i);
    den += weights[i];
  }
  require(den > 0.0, "weighted_accuracy: all weights are zero");
  return num / den;
}

inline double weighted_accuracy(const ConfusionMatrix& cm) {
  return weighted_accuracy(cm, std::vector<double>(cm.size(), 1.0 / static_cast<double>(cm.size())));
}

/// trace / N.
inline double overall_accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  require(n > 0, "overall_accuracy: empty matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

inline double precision(const ConfusionMatrix& cm, std::size_t i) {
  const auto c = cm.col_sum(i);
  return c == 0 ? 0.0 : static_cast<double>(cm.at(i, i)) / static_cast<double>(c);
}

inline double recall(const ConfusionMatrix& cm, std::size_t i) {
  const auto r = cm.row_sum(i);
  return r == 0 ? 0.0 : static_cast<double>(cm.at(i, i)) / static_cast<double>(r);
}

struct MetricReport {
  std::vector<std::string> labels;
  std::vector<double> class_accuracy;
  std::vector<double> class_precision;
  std::vector<double> class_recall;
  double eq6_weighted = 0.0;
  double diag_overall = 0.0;
};

inline MetricReport metric_report(const ConfusionMatrix& cm) {
  MetricReport r;
  r.labels = cm.labels();
  for (std::size_t i = 0; i < cm.size(); ++i) {
    r.class_accuracy.push_back(per_class_accuracy(cm, i));
    r.class_precision.push_back(precision(cm, i));
    r.class_recall.push_back(recall(cm, i));
  }
  r.eq6_weighted = weighted_accuracy(cm);
  r.diag_overall = overall_accuracy(cm);
  return r;
}

/// Aligned, human-readable table.
inline std::string report_table(const MetricReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(8) << "class" << std::right << std::setw(12) << "acc_ovr" << std::setw(12)
     << "precision" << std::setw(12) << "recall" << '\n';
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    os << std::left << std::setw(8) << r.labels[i] << std::right << std::setw(12) << r.class_accuracy[i]
       << std::setw(12) << r.class_precision[i] << std::setw(12) << r.class_recall[i] << '\n';
  }
  os << "eq6_weighted = " << std::setprecision(6) << r.eq6_weighted * 100.0 << " %\n";
  os << "diag_overall = " << r.diag_overall * 100.0 << " %\n";
  return os.str();
}

/// Machine-readable rows: class,acc_ovr,precision,recall then the two summary rows.
inline std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "class,acc_ovr,precision,recall\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    os << r.labels[i] << ',' << kv::format(r.class_accuracy[i]) << ',' << kv::format(r.class_precision[i]) << ','
       << kv::format(r.class_recall[i]) << '\n';
  }
  os << "eq6_weighted," << kv::format(r.eq6_weighted) << ",,\n";
  os << "diag_overall," << kv::format(r.diag_overall) << ",,\n";
  return os.str();
}

/// Row-normalized percentages in table layout: header row of labels, one row per true class.
inline std::string confusion_percent_csv(const ConfusionMatrix& cm) {
  const auto pct = cm.row_percentages();
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "true\\pred";
  for (const auto& l : cm.labels()) os << ',' << l;
  os << '\n';
  for (std::size_t i = 0; i < cm.size(); ++i) {
    os << cm.labels()[i];
    for (std::size_t j = 0; j < cm.size(); ++j) os << ',' << pct[i * cm.size() + j];
    os << '\n';
  }
  return os.str();
}

inline std::string confusion_counts_csv(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << "true\\pred";
  for (const auto& l : cm.labels()) os << ',' << l;
  os << '\n';
  for (std::size_t i = 0; i < cm.size(); ++i) {
    os << cm.labels()[i];
    for (std::size_t j = 0; j < cm.size(); ++j) os << ',' << cm.at(i, j);
    os << '\n';
  }
  return os.str();
}

}  // namespace pqe
