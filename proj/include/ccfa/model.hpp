// Feature extractors, cosine / local-similarity classifiers and frozen
// previous-stage snapshots.
//
// Labels throughout the library are column indices in class-arrival order:
// the classes of the first task occupy columns [0, |Y_1|), the next task's
// classes follow, and so on. Old classes at stage k are therefore exactly
// the columns [0, c_old).
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ccfa/numerics.hpp"

namespace ccfa {

using Label = std::int32_t;
using Labels = std::vector<Label>;

// ---------------------------------------------------------------------------
// Feature extractor

enum class ExtractorKind { identity, linear, mlp };

inline const char* to_string(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::identity: return "identity";
    case ExtractorKind::linear: return "linear";
    case ExtractorKind::mlp: return "mlp";
  }
  return "?";
}

struct DenseLayer {
  Matrix weight;             // in x out
  std::vector<double> bias;  // out

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Forward intermediates kept for backpropagation.
struct ExtractorTrace {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // affine output of each layer (before ReLU)
  NormalizedRows out;          // final row-normalised features
};

/// x -> affine (-> ReLU -> affine)* -> row-normalise. Identity kind has no
/// layers and only normalises.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  static FeatureExtractor identity(std::size_t dim) {
    FeatureExtractor f;
    f.kind_ = ExtractorKind::identity;
    f.input_dim_ = dim;
    f.output_dim_ = dim;
    return f;
  }

  static FeatureExtractor linear(std::size_t in, std::size_t out, Rng& rng) {
    FeatureExtractor f;
    f.kind_ = ExtractorKind::linear;
    f.input_dim_ = in;
    f.output_dim_ = out;
    f.layers_.push_back(make_layer(in, out, rng));
    return f;
  }

  static FeatureExtractor mlp(std::size_t in, const std::vector<std::size_t>& hidden,
                              std::size_t out, Rng& rng) {
    if (hidden.empty()) throw std::invalid_argument("mlp extractor needs at least one hidden layer");
    FeatureExtractor f;
    f.kind_ = ExtractorKind::mlp;
    f.input_dim_ = in;
    f.output_dim_ = out;
    std::size_t prev = in;
    for (std::size_t h : hidden) {
      f.layers_.push_back(make_layer(prev, h, rng));
      prev = h;
    }
    f.layers_.push_back(make_layer(prev, out, rng));
    return f;
  }

  /// Rebuilds an extractor from stored parameters (checkpoint loading).
  static FeatureExtractor from_layers(ExtractorKind kind, std::size_t in,
                                      std::vector<DenseLayer> layers) {
    FeatureExtractor f;
    f.kind_ = kind;
    f.input_dim_ = in;
    f.layers_ = std::move(layers);
    if (kind == ExtractorKind::identity) {
      if (!f.layers_.empty()) throw std::invalid_argument("identity extractor has no layers");
      f.output_dim_ = in;
      return f;
    }
    if (f.layers_.empty()) throw std::invalid_argument("extractor needs at least one layer");
    std::size_t prev = in;
    for (const auto& l : f.layers_) {
      if (l.weight.rows() != prev || l.bias.size() != l.weight.cols())
        throw DimensionError("extractor layer shape mismatch: " + l.weight.shape());
      prev = l.weight.cols();
    }
    f.output_dim_ = prev;
    return f;
  }

  ExtractorKind kind() const noexcept { return kind_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t output_dim() const noexcept { return output_dim_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  bool has_parameters() const noexcept { return !layers_.empty(); }

  ExtractorTrace forward_trace(const Matrix& x) const {
    if (x.cols() != input_dim_) {
      throw DimensionError("forward_features: input " + x.shape() + " but extractor expects " +
                           std::to_string(input_dim_) + " columns");
    }
    ExtractorTrace t;
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      t.inputs.push_back(h);
      Matrix a = matmul(h, layers_[l].weight);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += layers_[l].bias[j];
      }
      t.pre.push_back(a);
      if (l + 1 < layers_.size()) {
        for (double& v : a.data()) v = v > 0.0 ? v : 0.0;
      }
      h = std::move(a);
    }
    t.out = row_normalize_flagged(h);
    return t;
  }

  Matrix forward(const Matrix& x) const { return forward_trace(x).out.values; }

  /// Parameter gradients given dL/d(normalised features).
  std::vector<DenseLayer> backward(const ExtractorTrace& t, const Matrix& grad_features) const {
    std::vector<DenseLayer> grads(layers_.size());
    if (layers_.empty()) return grads;
    Matrix g = row_normalize_backward(t.out, grad_features);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size()) {
        const Matrix& pre = t.pre[l];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (pre.data()[i] <= 0.0) g.data()[i] = 0.0;
      }
      grads[l].weight = matmul_at(t.inputs[l], g);
      grads[l].bias.assign(g.cols(), 0.0);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto r = g.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) grads[l].bias[j] += r[j];
      }
      if (l > 0) g = matmul_bt(g, layers_[l].weight);
    }
    return grads;
  }

  friend bool operator==(const FeatureExtractor&, const FeatureExtractor&) = default;

 private:
  static DenseLayer make_layer(std::size_t in, std::size_t out, Rng& rng) {
    DenseLayer l;
    l.weight = rng.normal_matrix(in, out, std::sqrt(2.0 / static_cast<double>(in)));
    l.bias.assign(out, 0.0);
    return l;
  }

  ExtractorKind kind_ = ExtractorKind::identity;
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
  std::vector<DenseLayer> layers_;
};

inline Matrix forward_features(const FeatureExtractor& f, const Matrix& x) { return f.forward(x); }

// ---------------------------------------------------------------------------
// Classifiers

/// logit_q = eta * cos(prototype_q, z).
struct CosineClassifier {
  Matrix prototypes;  // c x d
  double eta = 1.0;

  friend bool operator==(const CosineClassifier&, const CosineClassifier&) = default;
};

/// Local similarity classifier: P proxies per class, class score is the
/// softmax(similarity)-weighted mean of proxy similarities. Rows of `proxies`
/// are grouped by class: rows [q*P, (q+1)*P) belong to class q.
struct LSCClassifier {
  Matrix proxies;  // (c*P) x d
  std::size_t proxies_per_class = 1;
  double eta = 1.0;     // NCA temperature
  double margin = 0.0;  // NCA margin

  friend bool operator==(const LSCClassifier&, const LSCClassifier&) = default;
};

enum class ClassifierKind { cosine, lsc };

inline const char* to_string(ClassifierKind k) {
  return k == ClassifierKind::cosine ? "cosine" : "lsc";
}

struct ClassifierTrace {
  NormalizedRows z;        // normalised input features
  NormalizedRows weights;  // normalised prototypes / proxies
  Matrix sims;             // b x rows(weights)
  Matrix logits;           // b x c
};

struct ClassifierGrads {
  Matrix features;  // dL/dz (w.r.t. un-normalised classifier input)
  Matrix weights;   // dL/d prototypes or proxies
};

class Classifier {
 public:
  Classifier() = default;
  Classifier(CosineClassifier c) : impl_(std::move(c)) { validate(); }
  Classifier(LSCClassifier c) : impl_(std::move(c)) { validate(); }

  static Classifier cosine(std::size_t classes, std::size_t dim, double eta, Rng& rng) {
    return Classifier(CosineClassifier{init_rows(classes, dim, rng), eta});
  }
  static Classifier lsc(std::size_t classes, std::size_t dim, std::size_t proxies,
                        double eta, double margin, Rng& rng) {
    if (proxies == 0) throw std::invalid_argument("LSC needs at least one proxy per class");
    return Classifier(LSCClassifier{init_rows(classes * proxies, dim, rng), proxies, eta, margin});
  }

  ClassifierKind kind() const noexcept {
    return std::holds_alternative<CosineClassifier>(impl_) ? ClassifierKind::cosine
                                                           : ClassifierKind::lsc;
  }
  bool is_cosine() const noexcept { return kind() == ClassifierKind::cosine; }
  const CosineClassifier& as_cosine() const { return std::get<CosineClassifier>(impl_); }
  const LSCClassifier& as_lsc() const { return std::get<LSCClassifier>(impl_); }

  std::size_t proxies_per_class() const noexcept {
    return is_cosine() ? 1 : std::get<LSCClassifier>(impl_).proxies_per_class;
  }
  std::size_t num_classes() const noexcept { return weights().rows() / proxies_per_class(); }
  std::size_t dim() const noexcept { return weights().cols(); }
  double eta() const noexcept {
    return std::visit([](const auto& c) { return c.eta; }, impl_);
  }
  double margin() const noexcept {
    return is_cosine() ? 0.0 : std::get<LSCClassifier>(impl_).margin;
  }

  const Matrix& weights() const noexcept {
    return std::visit([](const auto& c) -> const Matrix& { return weight_ref(c); }, impl_);
  }
  Matrix& weights() noexcept {
    return std::visit([](auto& c) -> Matrix& { return weight_ref(c); }, impl_);
  }

  ClassifierTrace forward_trace(const Matrix& z) const {
    if (z.cols() != dim()) {
      throw DimensionError("logits: features " + z.shape() + " but classifier dim is " +
                           std::to_string(dim()));
    }
    ClassifierTrace t;
    t.z = row_normalize_flagged(z);
    t.weights = row_normalize_flagged(weights());
    t.sims = matmul_bt(t.z.values, t.weights.values);
    const std::size_t c = num_classes();
    t.logits = Matrix(z.rows(), c);
    if (is_cosine()) {
      t.logits = t.sims * eta();
      return t;
    }
    const std::size_t P = proxies_per_class();
    for (std::size_t i = 0; i < z.rows(); ++i) {
      auto s = t.sims.row(i);
      for (std::size_t q = 0; q < c; ++q) {
        auto w = softmax(s.subspan(q * P, P));
        double y = 0.0;
        for (std::size_t p = 0; p < P; ++p) y += w[p] * s[q * P + p];
        t.logits(i, q) = y;
      }
    }
    return t;
  }

  /// Cosine: eta-scaled cosine. LSC: the unscaled mixture score y_q.
  Matrix logits(const Matrix& z) const { return forward_trace(z).logits; }

  /// Logits fed to a softmax when the classifier is read as a probability
  /// model (cosine: the logits themselves; LSC: eta * y_q).
  Matrix confidence_logits(const Matrix& z) const {
    Matrix l = logits(z);
    if (!is_cosine()) l *= eta();
    return l;
  }

  /// dL/d(similarities) given dL/d(logits).
  Matrix similarity_grad(const ClassifierTrace& t, const Matrix& grad_logits) const {
    const std::size_t c = num_classes();
    if (grad_logits.rows() != t.logits.rows() || grad_logits.cols() != c)
      throw DimensionError("classifier backward: gradient " + grad_logits.shape() +
                           " vs logits " + t.logits.shape());
    if (is_cosine()) return grad_logits * eta();
    const std::size_t P = proxies_per_class();
    Matrix dsims(t.sims.rows(), t.sims.cols());
    for (std::size_t i = 0; i < t.sims.rows(); ++i) {
      auto s = t.sims.row(i);
      for (std::size_t q = 0; q < c; ++q) {
        const double g = grad_logits(i, q);
        if (g == 0.0) continue;
        auto w = softmax(s.subspan(q * P, P));
        const double y = t.logits(i, q);
        // d/ds_p of sum_p softmax(s)_p s_p = w_p (1 + s_p - y)
        for (std::size_t p = 0; p < P; ++p) dsims(i, q * P + p) = g * w[p] * (1.0 + s[q * P + p] - y);
      }
    }
    return dsims;
  }

  ClassifierGrads backward(const ClassifierTrace& t, const Matrix& grad_logits) const {
    const Matrix dsims = similarity_grad(t, grad_logits);
    ClassifierGrads g;
    g.features = row_normalize_backward(t.z, matmul(dsims, t.weights.values));
    g.weights = row_normalize_backward(t.weights, matmul_at(dsims, t.z.values));
    return g;
  }

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  static const Matrix& weight_ref(const CosineClassifier& c) { return c.prototypes; }
  static const Matrix& weight_ref(const LSCClassifier& c) { return c.proxies; }
  static Matrix& weight_ref(CosineClassifier& c) { return c.prototypes; }
  static Matrix& weight_ref(LSCClassifier& c) { return c.proxies; }

  static Matrix init_rows(std::size_t rows, std::size_t dim, Rng& rng) {
    return rng.normal_matrix(rows, dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  }

  void validate() const {
    if (!(eta() > 0.0)) throw std::invalid_argument("classifier temperature must be > 0");
    if (!is_cosine()) {
      const auto& l = std::get<LSCClassifier>(impl_);
      if (l.proxies_per_class == 0 || l.proxies.rows() % l.proxies_per_class != 0)
        throw DimensionError("LSC proxies " + l.proxies.shape() + " not divisible by P=" +
                             std::to_string(l.proxies_per_class));
    }
  }

  std::variant<CosineClassifier, LSCClassifier> impl_{CosineClassifier{}};
};

inline Matrix logits(const Classifier& c, const Matrix& z) { return c.logits(z); }

/// Appends rows for `new_classes`, which must continue the contiguous label
/// range [num_classes, num_classes + n). Existing rows are not touched.
inline Classifier expand_classifier(const Classifier& c, const Labels& new_classes, Rng& rng) {
  const auto n0 = static_cast<Label>(c.num_classes());
  for (std::size_t i = 0; i < new_classes.size(); ++i) {
    if (new_classes[i] < n0) {
      throw std::invalid_argument("expand_classifier: class " + std::to_string(new_classes[i]) +
                                  " already present");
    }
    if (new_classes[i] != n0 + static_cast<Label>(i)) {
      throw std::invalid_argument(
          "expand_classifier: new classes must extend the label range contiguously");
    }
  }
  if (new_classes.empty()) return c;
  Classifier out = c;
  const std::size_t extra = new_classes.size() * c.proxies_per_class();
  const Matrix fresh = rng.normal_matrix(extra, c.dim(), 1.0 / std::sqrt(static_cast<double>(c.dim())));
  out.weights() = vconcat(c.weights(), fresh);
  return out;
}

// ---------------------------------------------------------------------------
// Model and snapshots

struct Model {
  FeatureExtractor extractor;
  Classifier classifier;

  Labels known_classes() const {
    Labels l(classifier.num_classes());
    for (std::size_t i = 0; i < l.size(); ++i) l[i] = static_cast<Label>(i);
    return l;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

inline std::uint64_t hash_extractor(const FeatureExtractor& f,
                                    std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (const auto& l : f.layers()) {
    h = hash_matrix(l.weight, h);
    h = fnv1a(l.bias.data(), l.bias.size() * sizeof(double), h);
  }
  return h;
}

inline std::uint64_t hash_classifier(const Classifier& c,
                                     std::uint64_t h = 0xcbf29ce484222325ULL) {
  const double meta[3] = {c.eta(), c.margin(), static_cast<double>(c.proxies_per_class())};
  h = fnv1a(meta, sizeof meta, h);
  return hash_matrix(c.weights(), h);
}

inline std::uint64_t hash_model(const Model& m) {
  return hash_classifier(m.classifier, hash_extractor(m.extractor));
}

/// Frozen (extractor, classifier) pair from the end of stage k.
class ModelSnapshot {
 public:
  ModelSnapshot(std::size_t stage, Model model) : stage_(stage), model_(std::move(model)) {}

  std::size_t stage() const noexcept { return stage_; }
  const FeatureExtractor& extractor() const noexcept { return model_.extractor; }
  const Classifier& classifier() const noexcept { return model_.classifier; }
  const Model& model() const noexcept { return model_; }
  Labels known_classes() const { return model_.known_classes(); }
  std::size_t num_classes() const noexcept { return model_.classifier.num_classes(); }
  std::uint64_t hash() const { return hash_model(model_); }

  friend bool operator==(const ModelSnapshot&, const ModelSnapshot&) = default;

 private:
  std::size_t stage_;
  Model model_;
};

inline ModelSnapshot snapshot(const Model& m, std::size_t stage) { return ModelSnapshot(stage, m); }

}  // namespace ccfa
