// Cross-class feature augmentation.
//
// For a minibatch of normalised features Z with labels Y at stage k >= 2:
//   1. confidence matrix W: the current classifier's softmax restricted to
//      the old classes, with each sample's own class zeroed;
//   2. target selection: one old class per row, trading confidence against
//      an even spread of targets over old classes;
//   3. sign-gradient descent on the frozen previous classifier's loss towards
//      the targets, with no bound on the perturbation size;
//   4. pseudo-labels from the frozen previous classifier's argmax.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/losses.hpp"
#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"
#include "ccfa/simplex.hpp"

namespace ccfa {

enum class TargetStrategy { nearest, relaxed_lp, random, farthest, ground_truth };
enum class AttackInit { feature, gaussian_noise };

inline const char* to_string(TargetStrategy s) {
  switch (s) {
    case TargetStrategy::nearest: return "nearest";
    case TargetStrategy::relaxed_lp: return "relaxed_lp";
    case TargetStrategy::random: return "random";
    case TargetStrategy::farthest: return "farthest";
    case TargetStrategy::ground_truth: return "ground_truth";
  }
  return "?";
}
inline const char* to_string(AttackInit i) {
  return i == AttackInit::feature ? "feature" : "gaussian_noise";
}

struct AttackConfig {
  std::size_t steps = 10;
  double alpha_lo = 2.0 / 255.0;
  double alpha_hi = 5.0 / 255.0;
  AttackInit init = AttackInit::feature;
  std::size_t multiplier = 5;
  TargetStrategy strategy = TargetStrategy::nearest;
  std::size_t top_k = 1;              // support size for relaxed_lp
  bool raw_confidence = false;        // W from raw logits instead of softmax

  void validate() const {
    if (!(alpha_lo >= 0.0) || !(alpha_lo <= alpha_hi))
      throw std::invalid_argument("attack: need 0 <= alpha_lo <= alpha_hi");
    if (top_k < 1) throw std::invalid_argument("attack: top_k must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Confidence matrix

struct ConfidenceMatrix {
  Matrix W;        // b x c_old
  Labels labels;   // source labels
  std::size_t c_old = 0;

  std::size_t rows() const noexcept { return W.rows(); }

  /// Old classes a row may be sent to: every old class except its own. A row
  /// of the only old class has no cross-class option and keeps its own.
  std::vector<std::size_t> eligible(std::size_t i) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < c_old; ++j)
      if (labels[i] != static_cast<Label>(j)) out.push_back(j);
    if (out.empty() && c_old > 0) out.push_back(static_cast<std::size_t>(labels[i]));
    return out;
  }
};

/// W[i][j] = softmax(current logits)[i][j] for old classes j != Y_i, 0 for j == Y_i.
inline ConfidenceMatrix confidence_matrix(const Matrix& z, const Labels& labels,
                                          const Classifier& current, std::size_t c_old,
                                          bool raw = false) {
  if (c_old == 0) throw std::invalid_argument("confidence_matrix: no old classes");
  if (c_old > current.num_classes())
    throw std::invalid_argument("confidence_matrix: more old classes than classifier outputs");
  if (labels.size() != z.rows()) throw DimensionError("confidence_matrix: label count mismatch");
  const Matrix logit = current.confidence_logits(z);
  ConfidenceMatrix cm{Matrix(z.rows(), c_old), labels, c_old};
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto p = raw ? std::vector<double>(logit.row(i).begin(), logit.row(i).end())
                       : softmax(logit.row(i));
    for (std::size_t j = 0; j < c_old; ++j)
      cm.W(i, j) = labels[i] == static_cast<Label>(j) ? 0.0 : p[j];
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Target selection

struct TargetAssignment {
  Matrix T;             // b x c_old, rows sum to 1
  Labels targets;       // one old class per row
  double uniformity = 0.0;  // u = b / c_old
  std::size_t top_k = 0;
  double objective = 0.0;   // sum W.T - sum_j |sum_i T_ij - u|
};

class BudgetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline double assignment_objective(const Matrix& W, const Matrix& T) {
  double value = 0.0;
  for (std::size_t i = 0; i < W.size(); ++i) value += W.data()[i] * T.data()[i];
  const double u = static_cast<double>(W.rows()) / static_cast<double>(W.cols());
  for (std::size_t j = 0; j < W.cols(); ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < W.rows(); ++i) col += T(i, j);
    value -= std::abs(col - u);
  }
  return value;
}

struct ExactBudget {
  std::size_t max_rows = 6;
  std::size_t max_classes = 5;
};

/// Globally optimal one-hot assignment by enumerating every choice of
/// eligible class per row. Enumeration runs in lexicographic order and only
/// strictly better objectives replace the incumbent, so ties resolve to the
/// lexicographically smallest assignment.
inline TargetAssignment select_targets_exact(const ConfidenceMatrix& cm, ExactBudget budget = {}) {
  const std::size_t b = cm.rows();
  if (b > budget.max_rows || cm.c_old > budget.max_classes) {
    throw BudgetError("select_targets_exact: instance " + std::to_string(b) + "x" +
                      std::to_string(cm.c_old) + " exceeds the enumeration budget " +
                      std::to_string(budget.max_rows) + "x" + std::to_string(budget.max_classes) +
                      "; use select_targets_relaxed");
  }
  std::vector<std::vector<std::size_t>> options(b);
  for (std::size_t i = 0; i < b; ++i) options[i] = cm.eligible(i);

  const double u = static_cast<double>(b) / static_cast<double>(cm.c_old);
  std::vector<std::size_t> pick(b, 0), best;
  std::vector<double> counts(cm.c_old);
  double best_val = -std::numeric_limits<double>::infinity();
  for (;;) {
    std::fill(counts.begin(), counts.end(), 0.0);
    double v = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t j = options[i][pick[i]];
      v += cm.W(i, j);
      counts[j] += 1.0;
    }
    for (double c : counts) v -= std::abs(c - u);
    if (v > best_val) {
      best_val = v;
      best = pick;
    }
    std::size_t r = b;
    while (r > 0) {
      --r;
      if (++pick[r] < options[r].size()) break;
      pick[r] = 0;
      if (r == 0) {
        r = b;  // wrapped around: done
        break;
      }
    }
    if (r == b || b == 0) break;
  }

  TargetAssignment ta{Matrix(b, cm.c_old), Labels(b), u, cm.c_old, 0.0};
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = options[i][best[i]];
    ta.T(i, j) = 1.0;
    ta.targets[i] = static_cast<Label>(j);
  }
  ta.objective = assignment_objective(cm.W, ta.T);
  return ta;
}

namespace detail {

/// Top-k eligible classes of row i by confidence, ties toward lower index.
inline std::vector<std::size_t> top_k_support(const ConfidenceMatrix& cm, std::size_t i,
                                              std::size_t k) {
  auto cand = cm.eligible(i);
  std::stable_sort(cand.begin(), cand.end(),
                   [&](std::size_t a, std::size_t b) { return cm.W(i, a) > cm.W(i, b); });
  if (cand.size() > k) cand.resize(k);
  std::sort(cand.begin(), cand.end());
  return cand;
}

inline bool all_zero_row(const ConfidenceMatrix& cm, std::size_t i) {
  for (std::size_t j : cm.eligible(i))
    if (cm.W(i, j) != 0.0) return false;
  return true;
}

inline Label sample_row(std::span<const double> dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t j = 0; j < dist.size(); ++j) {
    if (dist[j] <= 0.0) continue;
    last = j;
    acc += dist[j];
    if (u < acc) return static_cast<Label>(j);
  }
  return static_cast<Label>(last);
}

}  // namespace detail

/// Solves the continuous relaxation of the target assignment over each row's
/// top-K eligible classes, then samples one target per row from T.
///
/// The absolute-value penalty is linearised with one auxiliary variable per
/// class (e_j >= |sum_i T_ij - u|) and the resulting LP is solved exactly by
/// the dense simplex. K = 1 skips the LP and takes the per-row argmax; there,
/// rows whose eligible confidences are all zero get the uniform distribution
/// over their eligible classes. In the LP such rows range over every
/// eligible class.
inline TargetAssignment select_targets_relaxed(const ConfidenceMatrix& cm, std::size_t k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("select_targets_relaxed: K must be >= 1");
  const std::size_t b = cm.rows();
  const std::size_t c = cm.c_old;
  TargetAssignment ta{Matrix(b, c), Labels(b), static_cast<double>(b) / static_cast<double>(c), k, 0.0};

  std::vector<bool> fixed(b, false);
  for (std::size_t i = 0; i < b; ++i) {
    if (k > 1 || !detail::all_zero_row(cm, i)) continue;
    fixed[i] = true;
    const auto el = cm.eligible(i);
    for (std::size_t j : el) ta.T(i, j) = 1.0 / static_cast<double>(el.size());
  }

  if (k == 1) {
    for (std::size_t i = 0; i < b; ++i) {
      if (fixed[i]) continue;
      ta.T(i, detail::top_k_support(cm, i, 1).front()) = 1.0;
    }
  } else {
    std::vector<std::vector<std::size_t>> support(b);
    std::size_t nv = 0;
    for (std::size_t i = 0; i < b; ++i) {
      support[i] = detail::all_zero_row(cm, i) ? cm.eligible(i) : detail::top_k_support(cm, i, k);
      nv += support[i].size();
    }
    const std::size_t n_vars = nv + c;  // T entries then e_j
    lp::LinearProgram prog;
    prog.num_vars = n_vars;
    prog.objective.assign(n_vars, 0.0);

    std::vector<std::vector<std::size_t>> col_vars(c);
    std::size_t v = 0;
    for (std::size_t i = 0; i < b; ++i) {
      lp::Constraint row{std::vector<double>(n_vars, 0.0), lp::Relation::equal, 1.0};
      for (std::size_t j : support[i]) {
        prog.objective[v] = cm.W(i, j);
        row.coef[v] = 1.0;
        col_vars[j].push_back(v);
        ++v;
      }
      prog.constraints.push_back(std::move(row));
    }
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t e = nv + j;
      prog.objective[e] = -1.0;
      lp::Constraint upper{std::vector<double>(n_vars, 0.0), lp::Relation::less_equal,
                           ta.uniformity};
      lp::Constraint lower{std::vector<double>(n_vars, 0.0), lp::Relation::greater_equal,
                           ta.uniformity};
      for (std::size_t var : col_vars[j]) {
        upper.coef[var] = 1.0;
        lower.coef[var] = 1.0;
      }
      upper.coef[e] = -1.0;
      lower.coef[e] = 1.0;
      prog.constraints.push_back(std::move(upper));
      prog.constraints.push_back(std::move(lower));
    }
    const auto sol = lp::solve(prog);
    if (sol.status != lp::Status::optimal)
      throw NumericError("select_targets_relaxed: LP did not reach an optimum");
    v = 0;
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t j : support[i]) {
        ta.T(i, j) = sol.x[v++];
        s += ta.T(i, j);
      }
      for (std::size_t j : support[i]) ta.T(i, j) /= s;  // remove round-off drift
    }
  }

  for (std::size_t i = 0; i < b; ++i) {
    if (k == 1 && !fixed[i]) {
      ta.targets[i] = static_cast<Label>(argmax(ta.T.row(i)));
    } else {
      ta.targets[i] = detail::sample_row(ta.T.row(i), rng);
    }
  }
  ta.objective = assignment_objective(cm.W, ta.T);
  return ta;
}

/// Resamples targets from an already solved assignment.
inline Labels sample_targets(const TargetAssignment& ta, Rng& rng) {
  Labels out(ta.T.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (ta.top_k == 1) {
      out[i] = ta.targets[i];
    } else {
      out[i] = detail::sample_row(ta.T.row(i), rng);
    }
  }
  return out;
}

/// Rows that take part in augmentation and their targets.
struct TargetList {
  std::vector<std::size_t> rows;
  Labels targets;
};

/// Baseline target rules: random eligible class, least-confident eligible
/// class, or the sample's own class (old-class rows only).
inline TargetList select_targets_ablation(TargetStrategy strategy, const ConfidenceMatrix& cm,
                                          Rng& rng) {
  TargetList out;
  for (std::size_t i = 0; i < cm.rows(); ++i) {
    switch (strategy) {
      case TargetStrategy::random: {
        const auto el = cm.eligible(i);
        out.rows.push_back(i);
        out.targets.push_back(static_cast<Label>(el[rng.below(el.size())]));
        break;
      }
      case TargetStrategy::farthest: {
        const auto el = cm.eligible(i);
        std::size_t best = el.front();
        for (std::size_t j : el)
          if (cm.W(i, j) < cm.W(i, best)) best = j;
        out.rows.push_back(i);
        out.targets.push_back(static_cast<Label>(best));
        break;
      }
      case TargetStrategy::ground_truth:
        if (cm.labels[i] >= 0 && static_cast<std::size_t>(cm.labels[i]) < cm.c_old) {
          out.rows.push_back(i);
          out.targets.push_back(cm.labels[i]);
        }
        break;
      default:
        throw std::invalid_argument(std::string("select_targets_ablation: unsupported strategy ") +
                                    to_string(strategy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attack

struct AttackStep {
  std::size_t step = 0;
  double loss = 0.0;
  double logit_gap = 0.0;  // mean of target logit minus best other logit
};

inline double mean_logit_gap(const Matrix& logits, const Labels& targets) {
  if (logits.rows() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const auto t = static_cast<std::size_t>(targets[i]);
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < r.size(); ++j)
      if (j != t) other = std::max(other, r[j]);
    acc += r.size() > 1 ? r[t] - other : 0.0;
  }
  return acc / static_cast<double>(logits.rows());
}

/// Starting point of the attack: the features themselves, or i.i.d.
/// standard normal rows of the same shape.
inline Matrix attack_init(const Matrix& z0, AttackInit init, Rng& rng) {
  if (init == AttackInit::feature) return z0;
  return rng.normal_matrix(z0.rows(), z0.cols());
}

/// N steps of Z <- Z - alpha * sign(grad_Z loss(frozen(Z), targets)), where
/// loss is the frozen classifier's native loss.
inline Matrix pgd_attack(const Matrix& start, const Labels& targets, const Classifier& frozen,
                         std::size_t steps, double alpha, std::vector<AttackStep>* trace = nullptr) {
  if (!start.all_finite()) throw NumericError("pgd_attack: non-finite initial features");
  if (targets.size() != start.rows()) throw DimensionError("pgd_attack: target count mismatch");
  Matrix z = start;
  if (steps == 0 || alpha == 0.0 || z.rows() == 0) return z;
  for (std::size_t n = 0; n < steps; ++n) {
    const auto cv = classification_loss(frozen, z, targets);
    const Matrix& g = cv.grads.features;
    if (!g.all_finite()) throw NumericError("pgd_attack: non-finite gradient at step " + std::to_string(n));
    if (trace != nullptr) {
      trace->push_back({n, cv.value, mean_logit_gap(frozen.logits(z), targets)});
    }
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] -= alpha * sign(g.data()[i]);
  }
  if (trace != nullptr) {
    const double final_loss = classification_loss(frozen, z, targets).value;
    trace->push_back({steps, final_loss, mean_logit_gap(frozen.logits(z), targets)});
  }
  return z;
}

inline Matrix pgd_attack(const Matrix& start, const Labels& targets, const ModelSnapshot& snap,
                         std::size_t steps, double alpha, std::vector<AttackStep>* trace = nullptr) {
  for (Label t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= snap.num_classes())
      throw std::out_of_range("pgd_attack: target " + std::to_string(t) + " not covered by snapshot");
  return pgd_attack(start, targets, snap.classifier(), steps, alpha, trace);
}

/// Argmax of the frozen classifier, ties toward the lower index.
inline Labels pseudo_label(const Matrix& z, const ModelSnapshot& snap) {
  const Matrix l = snap.classifier().logits(z);
  Labels out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) out[i] = static_cast<Label>(argmax(l.row(i)));
  return out;
}

// ---------------------------------------------------------------------------
// Augmented batches

struct Provenance {
  std::size_t source = 0;
  Label target = 0;
  double alpha = 0.0;
};

struct AugmentedBatch {
  Matrix features;
  Labels labels;
  std::vector<Provenance> provenance;

  std::size_t rows() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  void append(const Matrix& f, const Labels& l, std::vector<Provenance> p) {
    features = vconcat(features, f);
    labels.insert(labels.end(), l.begin(), l.end());
    provenance.insert(provenance.end(), p.begin(), p.end());
  }
};

struct AttackLog {
  std::size_t copy = 0;
  std::vector<AttackStep> steps;
};

/// Builds `multiplier` augmented copies of the minibatch. The confidence
/// matrix comes from the current classifier, the attack and pseudo-labels
/// from the frozen snapshot. Each copy draws its own step size and, where
/// the strategy is stochastic, its own targets from an independent stream.
/// Returns an empty batch when there is no snapshot (first stage) or the
/// multiplier is 0.
inline AugmentedBatch augment(const Matrix& z, const Labels& labels, const Classifier& current,
                              const ModelSnapshot* snap, const AttackConfig& cfg, Rng& rng,
                              std::vector<AttackLog>* logs = nullptr) {
  AugmentedBatch out;
  if (snap == nullptr || snap->num_classes() == 0 || z.rows() == 0 || cfg.multiplier == 0) return out;
  cfg.validate();
  const std::size_t c_old = snap->num_classes();
  const ConfidenceMatrix cm = confidence_matrix(z, labels, current, c_old, cfg.raw_confidence);

  std::optional<TargetAssignment> solved;
  if (cfg.strategy == TargetStrategy::nearest || cfg.strategy == TargetStrategy::relaxed_lp) {
    const std::size_t k = cfg.strategy == TargetStrategy::nearest ? 1 : cfg.top_k;
    Rng solve_rng = rng.derive("targets");
    solved = select_targets_relaxed(cm, k, solve_rng);
  }

  for (std::size_t m = 0; m < cfg.multiplier; ++m) {
    Rng copy_rng = rng.derive(m);
    const double alpha = copy_rng.uniform(cfg.alpha_lo, cfg.alpha_hi);
    TargetList tl;
    if (solved) {
      tl.targets = m == 0 ? solved->targets : sample_targets(*solved, copy_rng);
      tl.rows.resize(z.rows());
      std::iota(tl.rows.begin(), tl.rows.end(), std::size_t{0});
    } else {
      tl = select_targets_ablation(cfg.strategy, cm, copy_rng);
    }
    if (tl.rows.empty()) continue;
    const Matrix src = z.gather_rows(tl.rows);
    Rng init_rng = copy_rng.derive("init");
    const Matrix start = attack_init(src, cfg.init, init_rng);
    std::vector<AttackStep>* trace = nullptr;
    if (logs != nullptr) {
      logs->push_back({m, {}});
      trace = &logs->back().steps;
    }
    const Matrix adv = pgd_attack(start, tl.targets, *snap, cfg.steps, alpha, trace);
    const Labels ps = pseudo_label(adv, *snap);
    std::vector<Provenance> prov(tl.rows.size());
    for (std::size_t i = 0; i < tl.rows.size(); ++i) prov[i] = {tl.rows[i], tl.targets[i], alpha};
    out.append(adv, ps, std::move(prov));
  }
  return out;
}

/// Perturbs every feature with Gaussian noise of standard deviation `sigma`
/// and pseudo-labels the result with the snapshot. Comparison baseline.
inline AugmentedBatch gaussian_noise_augment(const Matrix& z, const Labels& labels,
                                             const ModelSnapshot* snap, Rng& rng,
                                             std::size_t multiplier = 1, double sigma = 1.0) {
  AugmentedBatch out;
  if (snap == nullptr || snap->num_classes() == 0 || z.rows() == 0) return out;
  if (labels.size() != z.rows()) throw DimensionError("gaussian_noise_augment: label count mismatch");
  for (std::size_t m = 0; m < multiplier; ++m) {
    Rng copy_rng = rng.derive(m);
    Matrix noisy = z;
    for (double& v : noisy.data()) v += sigma * copy_rng.normal();
    const Labels ps = pseudo_label(noisy, *snap);
    std::vector<Provenance> prov(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) prov[i] = {i, ps[i], 0.0};
    out.append(noisy, ps, std::move(prov));
  }
  return out;
}

}  // namespace ccfa
