// Per-stage evaluation records and the summary metrics computed from them.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/data.hpp"
#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

struct ClassCount {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const noexcept {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
  friend bool operator==(const ClassCount&, const ClassCount&) = default;
};

struct MetricsRecord {
  std::size_t stage = 0;  // 1-based
  double accuracy = 0.0;  // over all classes seen so far
  std::map<Label, ClassCount> per_class;
  Labels new_classes;
  std::optional<double> new_accuracy;  // stages >= 2
  double wall_seconds = 0.0;

  std::map<Label, double> per_class_accuracy() const {
    std::map<Label, double> out;
    for (const auto& [c, n] : per_class) out[c] = n.accuracy();
    return out;
  }
};

struct Summary {
  double average_incremental_accuracy = 0.0;
  std::optional<double> forgetting;
  std::optional<double> average_new_accuracy;
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// Accuracy of `model` on the cumulative test set of tasks 0..k (0-based task index).
inline MetricsRecord evaluate(const Model& model, const TaskStream& stream, std::size_t k) {
  MetricsRecord rec;
  rec.stage = k + 1;
  const auto rows = stream.cumulative_test(k);
  for (std::size_t t = 0; t <= k; ++t)
    for (Label c : stream.tasks[t].classes) rec.per_class[c];
  rec.new_classes = stream.tasks[k].classes;
  if (rows.empty()) return rec;
  const Matrix z = model.extractor.forward(stream.test.x.gather_rows(rows));
  const Matrix l = model.classifier.logits(z);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Label y = stream.test.y[rows[i]];
    const bool ok = static_cast<Label>(argmax(l.row(i))) == y;
    auto& cc = rec.per_class[y];
    ++cc.total;
    if (ok) {
      ++cc.correct;
      ++correct;
    }
  }
  rec.accuracy = static_cast<double>(correct) / static_cast<double>(rows.size());
  if (k > 0) {
    std::size_t nc = 0, nt = 0;
    for (Label c : rec.new_classes) {
      nc += rec.per_class[c].correct;
      nt += rec.per_class[c].total;
    }
    rec.new_accuracy = nt == 0 ? 0.0 : static_cast<double>(nc) / static_cast<double>(nt);
  }
  return rec;
}

/// Unweighted mean of per-stage cumulative accuracies, first stage included.
inline double average_incremental_accuracy(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("average_incremental_accuracy: no records");
  double s = 0.0;
  for (const auto& r : records) s += r.accuracy;
  return s / static_cast<double>(records.size());
}

/// Mean over classes seen before the final stage of
/// (best accuracy over every stage that evaluated the class - final accuracy).
/// `history[s]` maps class -> accuracy at stage s.
inline double forgetting(const std::vector<std::map<Label, double>>& history) {
  if (history.size() < 2) throw std::invalid_argument("forgetting: needs at least two stages");
  std::map<Label, double> best;
  for (std::size_t s = 0; s + 1 < history.size(); ++s)
    for (const auto& [c, a] : history[s]) best[c] = std::max(best.count(c) ? best[c] : a, a);
  if (best.empty()) throw std::invalid_argument("forgetting: no old classes");
  const auto& last = history.back();
  double sum = 0.0;
  for (auto& [c, b] : best) {
    const auto it = last.find(c);
    if (it == last.end()) throw std::invalid_argument("forgetting: class missing from final stage");
    sum += std::max(b, it->second) - it->second;
  }
  return sum / static_cast<double>(best.size());
}

inline double forgetting(const std::vector<MetricsRecord>& records) {
  std::vector<std::map<Label, double>> h;
  for (const auto& r : records) h.push_back(r.per_class_accuracy());
  return forgetting(h);
}

/// Mean over stages >= 2 of the accuracy restricted to that stage's new classes.
inline double average_new_accuracy(const std::vector<MetricsRecord>& records) {
  if (records.size() < 2) throw std::invalid_argument("average_new_accuracy: single-stage stream");
  double s = 0.0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (!records[i].new_accuracy) throw std::invalid_argument("average_new_accuracy: missing new-class accuracy");
    s += *records[i].new_accuracy;
  }
  return s / static_cast<double>(records.size() - 1);
}

inline Summary summarize(const std::vector<MetricsRecord>& records, std::string config_hash,
                         std::uint64_t seed) {
  Summary s;
  s.average_incremental_accuracy = average_incremental_accuracy(records);
  if (records.size() >= 2) {
    s.forgetting = forgetting(records);
    s.average_new_accuracy = average_new_accuracy(records);
  }
  s.config_hash = std::move(config_hash);
  s.seed = seed;
  return s;
}

/// CSV of points for plotting: "x,y,label,tag" for 2-D features, otherwise
/// "f0,...,f{d-1},label,tag".
inline std::string dump_points(const Matrix& features, const Labels& labels, const std::string& tag,
                               bool header = true) {
  if (labels.size() != features.rows()) throw DimensionError("dump_points: label count mismatch");
  std::ostringstream os;
  os.precision(17);
  if (header) {
    if (features.cols() == 2) {
      os << "x,y";
    } else {
      for (std::size_t j = 0; j < features.cols(); ++j) os << (j ? "," : "") << 'f' << j;
    }
    os << ",label,tag\n";
  }
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (double v : features.row(i)) os << v << ',';
    os << labels[i] << ',' << tag << '\n';
  }
  return os.str();
}

}  // namespace ccfa
