// Finite-difference battery over every loss gradient.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ccfa/losses.hpp"
#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

struct GradCheckEntry {
  std::string loss;
  GradCheckReport report;
  bool passed = false;
};

struct GradCheckOptions {
  std::size_t min_probes = 100;
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
  std::string corrupt;  // scales the analytic gradient of this loss by 1.01 (negative control)
};

inline const std::vector<std::string>& gradcheck_losses() {
  static const std::vector<std::string> names{"cross_entropy_cosine", "nca_lsc",     "ucir_lessforget",
                                              "pod_flat",             "margin_ranking", "afc_disc",
                                              "total_loss_mlp"};
  return names;
}

namespace detail {

using LossFn = std::function<double(const Matrix&)>;
using GradFn = std::function<Matrix(const Matrix&)>;

struct Probe {
  LossFn loss;
  GradFn grad;
  Matrix point;
};

inline Labels random_labels(std::size_t n, std::size_t c, Rng& rng) {
  Labels y(n);
  for (auto& v : y) v = static_cast<Label>(rng.below(c));
  return y;
}

/// One random instance of `loss`, as one or more (function, gradient, point)
/// triples covering each differentiable input.
inline std::vector<Probe> gradcheck_instance(const std::string& loss, Rng& rng) {
  std::vector<Probe> out;
  if (loss == "cross_entropy_cosine" || loss == "nca_lsc") {
    const bool cos = loss == "cross_entropy_cosine";
    Rng crng = rng.derive("clf");
    const Classifier clf = cos ? Classifier::cosine(5, 6, 4.0, crng) : Classifier::lsc(4, 6, 3, 3.0, 0.05, crng);
    const Matrix z = rng.normal_matrix(4, 6);
    const Labels y = random_labels(4, clf.num_classes(), rng);
    out.push_back({[clf, y](const Matrix& p) { return classification_loss(clf, p, y).value; },
                   [clf, y](const Matrix& p) { return classification_loss(clf, p, y).grads.features; }, z});
    const auto with_w = [clf](const Matrix& w) {
      Classifier c = clf;
      c.weights() = w;
      return c;
    };
    out.push_back({[with_w, z, y](const Matrix& w) { return classification_loss(with_w(w), z, y).value; },
                   [with_w, z, y](const Matrix& w) { return classification_loss(with_w(w), z, y).grads.weights; },
                   clf.weights()});
  } else if (loss == "ucir_lessforget") {
    const Matrix zo = row_normalize(rng.normal_matrix(5, 6));
    out.push_back({[zo](const Matrix& p) { return ucir_lessforget(zo, p).value; },
                   [zo](const Matrix& p) { return ucir_lessforget(zo, p).grad; },
                   row_normalize(rng.normal_matrix(5, 6))});
  } else if (loss == "pod_flat") {
    const Matrix ho = rng.normal_matrix(5, 6);
    out.push_back({[ho](const Matrix& p) { return pod_flat(ho, p).value; },
                   [ho](const Matrix& p) { return pod_flat(ho, p).grad; }, rng.normal_matrix(5, 6)});
  } else if (loss == "margin_ranking") {
    Rng crng = rng.derive("clf");
    const Classifier clf = Classifier::cosine(6, 5, 1.0, crng);
    const std::size_t n_old = 3;
    const Matrix z = rng.normal_matrix(6, 5);
    const Labels y = random_labels(6, n_old, rng);
    const double margin = 0.8;  // wide enough that most pairs are active
    out.push_back({[clf, y, margin](const Matrix& p) { return margin_ranking(p, y, clf, n_old, margin, 2).value; },
                   [clf, y, margin](const Matrix& p) {
                     return margin_ranking(p, y, clf, n_old, margin, 2).grad_features;
                   },
                   z});
    const auto with_w = [clf](const Matrix& w) {
      Classifier c = clf;
      c.weights() = w;
      return c;
    };
    out.push_back(
        {[with_w, z, y, margin](const Matrix& w) { return margin_ranking(z, y, with_w(w), n_old, margin, 2).value; },
         [with_w, z, y, margin](const Matrix& w) {
           return margin_ranking(z, y, with_w(w), n_old, margin, 2).grad_weights;
         },
         clf.weights()});
  } else if (loss == "afc_disc") {
    const Matrix zo = rng.normal_matrix(5, 6);
    ImportanceVector imp{std::vector<double>(6), 5};
    for (double& w : imp.weights) w = rng.uniform(0.1, 2.0);
    out.push_back({[zo, imp](const Matrix& p) { return afc_disc(zo, p, imp).value; },
                   [zo, imp](const Matrix& p) { return afc_disc(zo, p, imp).grad; }, rng.normal_matrix(5, 6)});
  } else if (loss == "total_loss_mlp") {
    // Classification plus less-forget and margin ranking, back through a
    // two-layer extractor to its first weight matrix.
    Rng mrng = rng.derive("model");
    Model model{FeatureExtractor::mlp(4, {5}, 3, mrng), Classifier::cosine(4, 3, 2.0, mrng)};
    const Matrix x = rng.normal_matrix(4, 4);
    const Labels y = random_labels(4, 4, rng);
    const Matrix zo = row_normalize(rng.normal_matrix(4, 3));
    LossConfig cfg;
    cfg.alg = AlgKind::ucir_lessforget;
    cfg.lambda = 0.7;
    const auto eval = [=](const Matrix& w) {
      Model m = model;
      m.extractor.layers()[0].weight = w;
      const ExtractorTrace tr = m.extractor.forward_trace(x);
      BatchTerms t;
      t.trace = &tr;
      t.labels = &y;
      t.old_features = &zo;
      t.n_old = 2;
      return total_loss(cfg, m, t);
    };
    out.push_back({[eval](const Matrix& w) { return eval(w).total; },
                   [eval](const Matrix& w) { return eval(w).grads.extractor[0].weight; },
                   model.extractor.layers()[0].weight});
  } else {
    throw std::invalid_argument("gradcheck: unknown loss '" + loss + "'");
  }
  return out;
}

}  // namespace detail

/// Checks `loss` on fresh random instances until at least `min_probes`
/// coordinates have been compared.
inline GradCheckEntry gradcheck_loss(const std::string& loss, const GradCheckOptions& opt = {}) {
  GradCheckEntry e{loss, {}, false};
  Rng rng = Rng(opt.seed).derive(loss);
  for (std::uint64_t inst = 0; e.report.probe_count < opt.min_probes; ++inst) {
    Rng irng = rng.derive(inst);
    for (auto& p : detail::gradcheck_instance(loss, irng)) {
      detail::GradFn grad = p.grad;
      if (opt.corrupt == loss) grad = [g = p.grad](const Matrix& m) { return g(m) * 1.01; };
      merge_into(e.report, finite_diff_check(p.loss, grad, p.point));
    }
  }
  e.passed = e.report.max_rel_err <= opt.tolerance;
  return e;
}

inline std::vector<GradCheckEntry> gradcheck_battery(const GradCheckOptions& opt = {}) {
  std::vector<GradCheckEntry> out;
  for (const auto& name : gradcheck_losses()) out.push_back(gradcheck_loss(name, opt));
  return out;
}

}  // namespace ccfa
