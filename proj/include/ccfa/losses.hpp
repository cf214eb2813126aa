// Classification and distillation losses with analytic gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

/// Loss value together with its gradient w.r.t. the first matrix argument
/// named by the producing function.
struct LossValue {
  double value = 0.0;
  Matrix grad;
};

namespace detail {
inline void check_labels(const Labels& labels, std::size_t rows, std::size_t classes,
                         const char* who) {
  if (labels.size() != rows) {
    throw DimensionError(std::string(who) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  }
  for (Label y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range(std::string(who) + ": label " + std::to_string(y) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(who) + ": shape " + a.shape() + " vs " + b.shape());
}
}  // namespace detail

/// Mean negative log-softmax of the true class; gradient w.r.t. logits.
inline LossValue cross_entropy(const Matrix& logits, const Labels& labels) {
  detail::check_labels(labels, logits.rows(), logits.cols(), "cross_entropy");
  LossValue out{0.0, Matrix(logits.rows(), logits.cols())};
  if (logits.rows() == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    const auto y = static_cast<std::size_t>(labels[i]);
    out.value += (lse - r[y]) * inv_b;
    auto g = out.grad.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) g[j] = std::exp(r[j] - lse) * inv_b;
    g[y] -= inv_b;
  }
  return out;
}

/// Hinged NCA loss over LSC scores y_hat:
///   [ -eta (y_hat_y - delta) + log sum_{i != y} exp(eta y_hat_i) ]_+
/// averaged over the batch. With a single class there is no competitor and
/// the loss is 0.
inline LossValue nca_loss(const Matrix& scores, const Labels& labels, double eta, double delta) {
  detail::check_labels(labels, scores.rows(), scores.cols(), "nca_loss");
  LossValue out{0.0, Matrix(scores.rows(), scores.cols())};
  if (scores.rows() == 0 || scores.cols() < 2) return out;
  const double inv_b = 1.0 / static_cast<double>(scores.rows());
  std::vector<double> e(scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto r = scores.row(i);
    const auto y = static_cast<std::size_t>(labels[i]);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < r.size(); ++j)
      if (j != y) mx = std::max(mx, eta * r[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      e[j] = j == y ? 0.0 : std::exp(eta * r[j] - mx);
      s += e[j];
    }
    const double raw = -eta * (r[y] - delta) + mx + std::log(s);
    if (raw <= 0.0) continue;
    out.value += raw * inv_b;
    auto g = out.grad.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) g[j] = eta * e[j] / s * inv_b;
    g[y] = -eta * inv_b;
  }
  return out;
}

/// Less-forget distillation: mean of 1 - <z_old_i, z_new_i>; gradient w.r.t. z_new.
inline LossValue ucir_lessforget(const Matrix& z_old, const Matrix& z_new) {
  detail::check_same_shape(z_old, z_new, "ucir_lessforget");
  LossValue out{0.0, Matrix(z_new.rows(), z_new.cols())};
  if (z_new.rows() == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(z_new.rows());
  for (std::size_t i = 0; i < z_new.rows(); ++i) {
    out.value += (1.0 - dot(z_old.row(i), z_new.row(i))) * inv_b;
    auto g = out.grad.row(i);
    auto o = z_old.row(i);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = -o[j] * inv_b;
  }
  return out;
}

/// Flat pooled-output distillation: mean squared L2 distance between rows;
/// gradient w.r.t. h_new.
inline LossValue pod_flat(const Matrix& h_old, const Matrix& h_new) {
  detail::check_same_shape(h_old, h_new, "pod_flat");
  LossValue out{0.0, Matrix(h_new.rows(), h_new.cols())};
  if (h_new.rows() == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(h_new.rows());
  for (std::size_t i = 0; i < h_new.size(); ++i) {
    const double d = h_new.data()[i] - h_old.data()[i];
    out.value += d * d * inv_b;
    out.grad.data()[i] = 2.0 * d * inv_b;
  }
  return out;
}

struct MarginRankingValue {
  double value = 0.0;
  Matrix grad_features;  // w.r.t. z
  Matrix grad_weights;   // w.r.t. classifier prototypes
  std::size_t exemplars = 0;
};

/// Margin ranking between the ground-truth prototype and the `top_m` most
/// similar new-class prototypes, for rows whose label is an old class
/// (label < n_old). Similarities are plain cosines. Averaged over those rows;
/// zero when no row qualifies or no new classes exist.
inline MarginRankingValue margin_ranking(const Matrix& z, const Labels& labels,
                                         const Classifier& classifier, std::size_t n_old,
                                         double margin, std::size_t top_m) {
  if (!classifier.is_cosine())
    throw std::invalid_argument("margin_ranking: requires a cosine classifier");
  if (top_m == 0) throw std::invalid_argument("margin_ranking: top_m must be >= 1");
  const std::size_t c = classifier.num_classes();
  detail::check_labels(labels, z.rows(), c, "margin_ranking");
  MarginRankingValue out{0.0, Matrix(z.rows(), z.cols()),
                         Matrix(classifier.weights().rows(), classifier.weights().cols()), 0};
  if (n_old >= c || z.rows() == 0) return out;

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (static_cast<std::size_t>(labels[i]) < n_old) rows.push_back(i);
  out.exemplars = rows.size();
  if (rows.empty()) return out;

  const auto zn = row_normalize_flagged(z);
  const auto pn = row_normalize_flagged(classifier.weights());
  const Matrix cos = matmul_bt(zn.values, pn.values);
  const std::size_t m = std::min(top_m, c - n_old);
  const double inv_n = 1.0 / static_cast<double>(rows.size());

  Matrix dcos(z.rows(), c);
  std::vector<std::size_t> order(c - n_old);
  for (std::size_t i : rows) {
    auto r = cos.row(i);
    std::iota(order.begin(), order.end(), n_old);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });
    const auto y = static_cast<std::size_t>(labels[i]);
    for (std::size_t t = 0; t < m; ++t) {
      const double h = margin - r[y] + r[order[t]];
      if (h <= 0.0) continue;
      out.value += h * inv_n;
      dcos(i, y) -= inv_n;
      dcos(i, order[t]) += inv_n;
    }
  }
  out.grad_features = row_normalize_backward(zn, matmul(dcos, pn.values));
  out.grad_weights = row_normalize_backward(pn, matmul_at(dcos, zn.values));
  return out;
}

/// Native classification loss of a classifier (cross-entropy for cosine,
/// NCA for LSC) with gradients for its input features and weights.
struct ClassificationValue {
  double value = 0.0;
  ClassifierGrads grads;
  Matrix unit_feature_grad;  // gradient w.r.t. the classifier's normalised input
};

inline ClassificationValue classification_loss(const Classifier& clf, const Matrix& z,
                                               const Labels& labels) {
  const ClassifierTrace t = clf.forward_trace(z);
  LossValue lv = clf.is_cosine() ? cross_entropy(t.logits, labels)
                                 : nca_loss(t.logits, labels, clf.eta(), clf.margin());
  ClassificationValue out;
  out.value = lv.value;
  out.grads = clf.backward(t, lv.grad);
  out.unit_feature_grad = matmul(clf.similarity_grad(t, lv.grad), t.weights.values);
  return out;
}

// ---------------------------------------------------------------------------
// Importance-weighted feature discrepancy

struct ImportanceVector {
  std::vector<double> weights;  // one per final-feature channel
  std::size_t samples = 0;

  friend bool operator==(const ImportanceVector&, const ImportanceVector&) = default;
};

/// Per-channel mean squared gradient of the per-sample classification loss
/// of `snapshot`, taken w.r.t. the normalised feature the classifier consumes.
inline ImportanceVector afc_importance(const ModelSnapshot& snapshot, const Matrix& data,
                                       const Labels& labels) {
  if (data.rows() == 0) throw std::invalid_argument("afc_importance: empty data");
  detail::check_labels(labels, data.rows(), snapshot.num_classes(), "afc_importance");
  const Matrix z = snapshot.extractor().forward(data);
  const auto cv = classification_loss(snapshot.classifier(), z, labels);
  const double b = static_cast<double>(data.rows());
  ImportanceVector imp{std::vector<double>(z.cols(), 0.0), data.rows()};
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto g = cv.unit_feature_grad.row(i);
    for (std::size_t c = 0; c < g.size(); ++c) {
      const double per_sample = g[c] * b;  // undo the batch mean
      imp.weights[c] += per_sample * per_sample / b;
    }
  }
  return imp;
}

/// sum_c I_c * mean_i (z_new_ic - z_old_ic)^2; gradient w.r.t. z_new.
inline LossValue afc_disc(const Matrix& z_old, const Matrix& z_new, const ImportanceVector& imp) {
  detail::check_same_shape(z_old, z_new, "afc_disc");
  if (imp.weights.size() != z_new.cols()) {
    throw DimensionError("afc_disc: importance has " + std::to_string(imp.weights.size()) +
                         " channels, features have " + std::to_string(z_new.cols()));
  }
  LossValue out{0.0, Matrix(z_new.rows(), z_new.cols())};
  if (z_new.rows() == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(z_new.rows());
  for (std::size_t i = 0; i < z_new.rows(); ++i) {
    for (std::size_t c = 0; c < z_new.cols(); ++c) {
      const double d = z_new(i, c) - z_old(i, c);
      out.value += imp.weights[c] * d * d * inv_b;
      out.grad(i, c) = 2.0 * imp.weights[c] * d * inv_b;
    }
  }
  return out;
}

/// Stage weight sqrt(|seen classes| / |new classes|) for the discrepancy term.
inline double afc_stage_weight(std::size_t seen_classes, std::size_t new_classes) {
  if (new_classes == 0) return 1.0;
  return std::sqrt(static_cast<double>(seen_classes) / static_cast<double>(new_classes));
}

// ---------------------------------------------------------------------------
// Combined objective

enum class ClsKind { cross_entropy, nca };
enum class AlgKind { none, ucir_lessforget, pod_flat, afc_disc };

inline const char* to_string(ClsKind k) { return k == ClsKind::cross_entropy ? "cross_entropy" : "nca"; }
inline const char* to_string(AlgKind k) {
  switch (k) {
    case AlgKind::none: return "none";
    case AlgKind::ucir_lessforget: return "ucir_lessforget";
    case AlgKind::pod_flat: return "pod_flat";
    case AlgKind::afc_disc: return "afc_disc";
  }
  return "?";
}

struct LossConfig {
  double lambda = 1.0;  // weight of the algorithm-specific term
  ClsKind cls = ClsKind::cross_entropy;
  AlgKind alg = AlgKind::none;
  double lambda_dis = 1.0;   // less-forget
  double lambda_mr = 1.0;    // margin ranking (used with ucir_lessforget)
  double lambda_f = 1.0;     // POD-flat
  double lambda_disc = 1.0;  // importance-weighted discrepancy
  bool adaptive_stage_weight = true;
  double margin = 0.5;     // margin-ranking delta
  std::size_t top_m = 2;   // margin-ranking neighbours

  void validate() const {
    for (double w : {lambda, lambda_dis, lambda_mr, lambda_f, lambda_disc})
      if (!(w >= 0.0)) throw std::invalid_argument("loss weights must be >= 0");
    if (alg == AlgKind::ucir_lessforget && lambda_mr > 0.0 && top_m == 0)
      throw std::invalid_argument("top_m must be >= 1 when margin ranking is enabled");
  }
};

struct ModelGrads {
  std::vector<DenseLayer> extractor;
  Matrix classifier;
};

/// Everything a single optimisation step needs. `trace` holds the current
/// extractor's forward pass over the original minibatch; augmented features
/// enter only the classification term.
struct BatchTerms {
  const ExtractorTrace* trace = nullptr;
  const Labels* labels = nullptr;
  const Matrix* aug_features = nullptr;  // may be null or empty
  const Labels* aug_labels = nullptr;
  const Matrix* old_features = nullptr;  // snapshot extractor on the same inputs
  const ImportanceVector* importance = nullptr;
  std::size_t n_old = 0;
  double stage_weight = 1.0;  // adaptive weight for the discrepancy term
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double alg = 0.0;  // unweighted by lambda
  std::size_t cls_rows = 0;
  std::size_t alg_rows = 0;
  ModelGrads grads;
};

/// L_cls over [z, z'] with labels [y, y_ps] plus lambda * L_alg over the
/// original features only.
inline LossBreakdown total_loss(const LossConfig& cfg, const Model& model, const BatchTerms& in) {
  if (in.trace == nullptr || in.labels == nullptr)
    throw std::invalid_argument("total_loss: features and labels are required");
  const Matrix& z = in.trace->out.values;
  const Labels& y = *in.labels;
  const bool has_aug = in.aug_features != nullptr && in.aug_features->rows() > 0;
  if ((cfg.cls == ClsKind::nca) == model.classifier.is_cosine())
    throw std::invalid_argument(std::string("total_loss: loss ") + to_string(cfg.cls) +
                                " does not match a " + to_string(model.classifier.kind()) +
                                " classifier");

  LossBreakdown out;
  Matrix cls_in = z;
  Labels cls_y = y;
  if (has_aug) {
    if (in.aug_labels == nullptr || in.aug_labels->size() != in.aug_features->rows())
      throw DimensionError("total_loss: augmented labels do not match augmented features");
    cls_in = vconcat(z, *in.aug_features);
    cls_y.insert(cls_y.end(), in.aug_labels->begin(), in.aug_labels->end());
  }
  const auto cv = classification_loss(model.classifier, cls_in, cls_y);
  out.cls = cv.value;
  out.cls_rows = cls_in.rows();
  Matrix dz(z.rows(), z.cols());
  std::copy_n(cv.grads.features.data().begin(), z.size(), dz.data().begin());
  Matrix dw = cv.grads.weights;

  if (cfg.alg != AlgKind::none) {
    if (in.old_features == nullptr)
      throw std::invalid_argument("total_loss: distillation requires a previous-stage snapshot");
    const Matrix& zo = *in.old_features;
    out.alg_rows = z.rows();
    const double lam = cfg.lambda;
    auto accumulate = [&](const LossValue& lv, double w) {
      out.alg += w * lv.value;
      Matrix g = lv.grad;
      g *= lam * w;
      dz += g;
    };
    switch (cfg.alg) {
      case AlgKind::ucir_lessforget: {
        accumulate(ucir_lessforget(zo, z), cfg.lambda_dis);
        if (cfg.lambda_mr > 0.0) {
          const auto mr = margin_ranking(z, y, model.classifier, in.n_old, cfg.margin, cfg.top_m);
          out.alg += cfg.lambda_mr * mr.value;
          dz += mr.grad_features * (lam * cfg.lambda_mr);
          dw += mr.grad_weights * (lam * cfg.lambda_mr);
        }
        break;
      }
      case AlgKind::pod_flat:
        accumulate(pod_flat(zo, z), cfg.lambda_f);
        break;
      case AlgKind::afc_disc: {
        if (in.importance == nullptr)
          throw std::invalid_argument("total_loss: afc_disc requires an importance vector");
        const double w = cfg.lambda_disc * (cfg.adaptive_stage_weight ? in.stage_weight : 1.0);
        accumulate(afc_disc(zo, z, *in.importance), w);
        break;
      }
      case AlgKind::none: break;
    }
  }
  out.total = out.cls + cfg.lambda * out.alg;
  out.grads.classifier = std::move(dw);
  out.grads.extractor = model.extractor.backward(*in.trace, dz);
  return out;
}

}  // namespace ccfa
