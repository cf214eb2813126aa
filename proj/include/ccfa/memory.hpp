// Herding exemplar selection and the per-class exemplar buffer.
#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/data.hpp"
#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

/// Greedy mean matching: step t picks the unselected row that brings the
/// running mean of the selection closest to the class mean. Returns positions
/// into `features` in selection order; ties go to the lowest position.
inline std::vector<std::size_t> herding_select(const Matrix& features, std::size_t m) {
  if (features.rows() == 0) throw std::invalid_argument("herding_select: empty class");
  if (m == 0) throw std::invalid_argument("herding_select: m must be >= 1");
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  const std::size_t take = std::min(m, n);

  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += features(i, j);
  for (double& v : mu) v /= static_cast<double>(n);

  std::vector<double> running(d, 0.0);
  std::vector<bool> used(n, false);
  std::vector<std::size_t> picked;
  picked.reserve(take);
  for (std::size_t t = 1; t <= take; ++t) {
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mu[j] - (running[j] + features(i, j)) / static_cast<double>(t);
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    used[best] = true;
    picked.push_back(best);
    for (std::size_t j = 0; j < d; ++j) running[j] += features(best, j);
  }
  return picked;
}

/// Exemplar indices (rows of the stream's training set) per class, at most
/// `budget` per class. Entries of earlier classes are never modified.
struct MemoryBuffer {
  std::map<Label, std::vector<std::size_t>> exemplars;
  std::size_t budget = 20;
  std::size_t stage = 0;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, idx] : exemplars) n += idx.size();
    return n;
  }
  bool empty() const { return size() == 0; }

  /// All exemplar rows, class by class in label order.
  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> out;
    for (const auto& [c, idx] : exemplars) out.insert(out.end(), idx.begin(), idx.end());
    return out;
  }

  void validate(std::size_t dataset_size) const {
    for (const auto& [c, idx] : exemplars) {
      if (idx.size() > budget)
        throw std::invalid_argument("memory buffer: class " + std::to_string(c) + " over budget");
      std::set<std::size_t> uniq(idx.begin(), idx.end());
      if (uniq.size() != idx.size())
        throw std::invalid_argument("memory buffer: duplicate exemplar in class " + std::to_string(c));
      for (std::size_t i : idx)
        if (i >= dataset_size) throw std::out_of_range("memory buffer: exemplar index out of range");
    }
  }

  friend bool operator==(const MemoryBuffer&, const MemoryBuffer&) = default;
};

/// Adds herded exemplars for the classes of `task`, using features from
/// `extractor` on the training rows of `data`. Existing classes are kept as is.
inline MemoryBuffer update_buffer(const MemoryBuffer& buffer, const Dataset& data, const Task& task,
                                  const FeatureExtractor& extractor, std::size_t budget,
                                  std::size_t stage) {
  if (budget == 0) throw std::invalid_argument("update_buffer: budget must be >= 1");
  for (Label c : task.classes)
    if (buffer.exemplars.count(c))
      throw std::invalid_argument("update_buffer: class " + std::to_string(c) + " already in buffer");
  MemoryBuffer out = buffer;
  out.budget = budget;
  out.stage = stage;
  if (task.classes.empty()) return out;

  std::map<Label, std::vector<std::size_t>> rows_of;
  for (std::size_t i : task.train) rows_of[data.y.at(i)].push_back(i);
  for (Label c : task.classes) {
    const auto& rows = rows_of[c];
    if (rows.empty()) continue;
    const Matrix feats = extractor.forward(data.x.gather_rows(rows));
    std::vector<std::size_t> sel;
    for (std::size_t p : herding_select(feats, budget)) sel.push_back(rows[p]);
    out.exemplars[c] = std::move(sel);
  }
  return out;
}

}  // namespace ccfa
