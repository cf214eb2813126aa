// Randomised cross-check of the target-assignment solvers against brute
// force: exact optimality, the relaxation bound and the K = 1 argmax path.
#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "ccfa/augment.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

struct OracleOptions {
  std::size_t max_rows = 4;     // b drawn from [1, max_rows]
  std::size_t max_classes = 3;  // c_old drawn from [1, max_classes]
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  double tolerance = 1e-9;
};

struct OracleViolation {
  std::size_t trial = 0;
  std::string check;  // "exact", "relaxed" or "argmax"
  std::string instance;
};

struct OracleReport {
  std::size_t trials = 0;
  std::size_t exact_checks = 0;
  std::size_t relaxed_checks = 0;
  std::size_t argmax_checks = 0;
  std::vector<OracleViolation> violations;
  std::uint64_t instance_hash = 0xcbf29ce484222325ULL;  // identifies the instance set

  bool ok() const noexcept { return violations.empty(); }
};

/// Random confidence matrix: softmax of scaled normal logits over c_old + 1
/// columns (the extra column stands in for new classes), own class zeroed.
/// Every third instance is quantised to quarters to force ties.
inline ConfidenceMatrix random_confidence_matrix(std::size_t b, std::size_t c_old, Rng& rng, bool quantise) {
  ConfidenceMatrix cm{Matrix(b, c_old), Labels(b), c_old};
  for (std::size_t i = 0; i < b; ++i) {
    cm.labels[i] = static_cast<Label>(rng.below(c_old + 1));
    std::vector<double> l(c_old + 1);
    for (double& v : l) v = 3.0 * rng.normal();
    const auto p = softmax(std::span<const double>(l));
    for (std::size_t j = 0; j < c_old; ++j) {
      double w = cm.labels[i] == static_cast<Label>(j) ? 0.0 : p[j];
      if (quantise) w = std::round(w * 4.0) / 4.0;
      cm.W(i, j) = w;
    }
  }
  return cm;
}

inline std::string describe(const ConfidenceMatrix& cm) {
  std::ostringstream os;
  os.precision(17);
  os << "b=" << cm.rows() << " c_old=" << cm.c_old << " labels=[";
  for (std::size_t i = 0; i < cm.labels.size(); ++i) os << (i ? "," : "") << cm.labels[i];
  os << "] W=[";
  for (std::size_t i = 0; i < cm.rows(); ++i) {
    os << (i ? ";" : "");
    for (std::size_t j = 0; j < cm.c_old; ++j) os << (j ? "," : "") << cm.W(i, j);
  }
  os << "]";
  return os.str();
}

namespace detail {

/// Best objective over every one-hot assignment, written independently of
/// the solver: depth-first over rows, objective recomputed at the leaves.
inline double brute_force_best(const ConfidenceMatrix& cm) {
  const std::size_t b = cm.rows(), c = cm.c_old;
  const double u = static_cast<double>(b) / static_cast<double>(c);
  std::vector<std::size_t> pick(b);
  double best = -INFINITY;
  const auto leaf = [&] {
    double v = 0.0;
    std::vector<double> col(c, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      v += cm.W(i, pick[i]);
      col[pick[i]] += 1.0;
    }
    for (std::size_t j = 0; j < c; ++j) v -= std::fabs(col[j] - u);
    best = std::max(best, v);
  };
  const auto rec = [&](auto&& self, std::size_t i) -> void {
    if (i == b) return leaf();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (cm.labels[i] == static_cast<Label>(j)) continue;
      any = true;
      pick[i] = j;
      self(self, i + 1);
    }
    if (!any) {  // lone old class: the row keeps its own label
      pick[i] = static_cast<std::size_t>(cm.labels[i]);
      self(self, i + 1);
    }
  };
  rec(rec, 0);
  return best;
}

}  // namespace detail

inline OracleReport run_oracle(const OracleOptions& opt) {
  if (opt.max_rows < 1 || opt.max_classes < 1) throw std::invalid_argument("oracle: b and c must be >= 1");
  const ExactBudget budget;
  if (opt.max_rows > budget.max_rows || opt.max_classes > budget.max_classes) {
    throw BudgetError("oracle: b <= " + std::to_string(budget.max_rows) + " and c <= " +
                      std::to_string(budget.max_classes) + " keep exact enumeration tractable");
  }
  OracleReport rep;
  const Rng root(opt.seed);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    Rng rng = root.derive("trial").derive(t);
    const std::size_t b = 1 + rng.below(opt.max_rows);
    const std::size_t c = 1 + rng.below(opt.max_classes);
    const ConfidenceMatrix cm = random_confidence_matrix(b, c, rng, t % 3 == 2);
    rep.instance_hash = hash_matrix(cm.W, rep.instance_hash);
    rep.instance_hash = fnv1a(cm.labels.data(), cm.labels.size() * sizeof(Label), rep.instance_hash);
    ++rep.trials;

    // (a) exact enumeration attains the brute-force optimum with a valid one-hot T.
    const TargetAssignment ex = select_targets_exact(cm);
    bool valid = true;
    for (std::size_t i = 0; i < b; ++i) {
      const auto el = cm.eligible(i);
      const auto tgt = static_cast<std::size_t>(ex.targets[i]);
      if (std::find(el.begin(), el.end(), tgt) == el.end()) valid = false;
      for (std::size_t j = 0; j < c; ++j)
        if (ex.T(i, j) != (j == tgt ? 1.0 : 0.0)) valid = false;
    }
    const double best = detail::brute_force_best(cm);
    ++rep.exact_checks;
    if (!valid || std::fabs(ex.objective - best) > opt.tolerance)
      rep.violations.push_back({t, "exact", describe(cm)});

    // (b) the full-support relaxation bounds the integral optimum from above.
    Rng lp_rng = rng.derive("relaxed");
    const TargetAssignment rx = select_targets_relaxed(cm, c, lp_rng);
    ++rep.relaxed_checks;
    if (rx.objective < best - opt.tolerance) rep.violations.push_back({t, "relaxed", describe(cm)});

    // (c) K = 1 picks the per-row argmax over eligible classes, lowest index on ties.
    Rng k1_rng = rng.derive("k1");
    const TargetAssignment k1 = select_targets_relaxed(cm, 1, k1_rng);
    bool same = true;
    for (std::size_t i = 0; i < b; ++i) {
      const auto el = cm.eligible(i);
      std::size_t arg = el.front();
      for (std::size_t j : el)
        if (cm.W(i, j) > cm.W(i, arg)) arg = j;
      bool all_zero = true;
      for (std::size_t j : el) all_zero = all_zero && cm.W(i, j) == 0.0;
      if (all_zero) continue;  // no preference to recover
      if (static_cast<std::size_t>(k1.targets[i]) != arg) same = false;
    }
    ++rep.argmax_checks;
    if (!same) rep.violations.push_back({t, "argmax", describe(cm)});
  }
  return rep;
}

}  // namespace ccfa
