#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ccfa/augment.hpp"
#include "ccfa/oracle.hpp"
#include "ccfa/simplex.hpp"

using namespace ccfa;

namespace {

// Enumerates every one-hot assignment over eligible classes.
double brute_best(const ConfidenceMatrix& cm) {
  const std::size_t b = cm.rows(), c = cm.c_old;
  const double u = static_cast<double>(b) / static_cast<double>(c);
  double best = -1e300;
  std::vector<std::size_t> pick(b, 0);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == b) {
      std::vector<double> col(c, 0.0);
      double v = 0.0;
      for (std::size_t r = 0; r < b; ++r) {
        v += cm.W(r, pick[r]);
        col[pick[r]] += 1.0;
      }
      for (double x : col) v -= std::abs(x - u);
      best = std::max(best, v);
      return;
    }
    for (std::size_t j : cm.eligible(i)) {
      pick[i] = j;
      rec(i + 1);
    }
  };
  rec(0);
  return best;
}

ConfidenceMatrix random_cm(std::size_t b, std::size_t c, Rng& rng) {
  ConfidenceMatrix cm{Matrix(b, c), Labels(b), c};
  for (std::size_t i = 0; i < b; ++i) {
    cm.labels[i] = static_cast<Label>(rng.below(c + 1));  // c means "a new class"
    for (std::size_t j = 0; j < c; ++j)
      cm.W(i, j) = cm.labels[i] == static_cast<Label>(j) ? 0.0 : rng.uniform();
  }
  return cm;
}

Classifier orthogonal_2d(double eta) { return Classifier(CosineClassifier{Matrix{{1, 0}, {0, 1}}, eta}); }

}  // namespace

TEST(Confidence, GroundTruthColumnIsZeroAndRestIsSoftmax) {
  Rng rng(1);
  const auto clf = Classifier::cosine(5, 4, 3.0, rng);
  const Matrix z = rng.normal_matrix(6, 4);
  const Labels y{0, 1, 2, 3, 4, 2};
  const auto cm = confidence_matrix(z, y, clf, 3);
  const Matrix l = clf.logits(z);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto p = softmax(l.row(i));
    for (std::size_t j = 0; j < 3; ++j) {
      if (y[i] == static_cast<Label>(j)) {
        EXPECT_EQ(cm.W(i, j), 0.0);
      } else {
        EXPECT_NEAR(cm.W(i, j), p[j], 1e-15);
      }
    }
  }
  EXPECT_THROW(confidence_matrix(z, y, clf, 0), std::invalid_argument);
  EXPECT_THROW(confidence_matrix(z, y, clf, 6), std::invalid_argument);
}

TEST(Confidence, EligibleExcludesOwnClassUnlessOnlyOne) {
  ConfidenceMatrix cm{Matrix(2, 3), Labels{1, 5}, 3};
  EXPECT_EQ(cm.eligible(0), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(cm.eligible(1), (std::vector<std::size_t>{0, 1, 2}));
  ConfidenceMatrix one{Matrix(1, 1), Labels{0}, 1};
  EXPECT_EQ(one.eligible(0), (std::vector<std::size_t>{0}));
}

TEST(Simplex, TextbookProblem) {
  // max x + y  s.t.  x + 2y <= 4,  3x + y <= 6
  lp::LinearProgram p;
  p.num_vars = 2;
  p.objective = {1, 1};
  p.constraints = {{{1, 2}, lp::Relation::less_equal, 4}, {{3, 1}, lp::Relation::less_equal, 6}};
  const auto s = lp::solve(p);
  ASSERT_EQ(s.status, lp::Status::optimal);
  EXPECT_NEAR(s.x[0], 1.6, 1e-12);
  EXPECT_NEAR(s.x[1], 1.2, 1e-12);
  EXPECT_NEAR(s.objective, 2.8, 1e-12);
}

TEST(Simplex, EqualityAndInfeasible) {
  lp::LinearProgram p;
  p.num_vars = 2;
  p.objective = {1, -1};
  p.constraints = {{{1, 1}, lp::Relation::equal, 1}, {{1, 0}, lp::Relation::greater_equal, 0.25}};
  auto s = lp::solve(p);
  ASSERT_EQ(s.status, lp::Status::optimal);
  EXPECT_NEAR(s.objective, 1.0, 1e-12);
  p.constraints.push_back({{1, 1}, lp::Relation::greater_equal, 2});
  EXPECT_EQ(lp::solve(p).status, lp::Status::infeasible);
}

TEST(Simplex, Unbounded) {
  lp::LinearProgram p;
  p.num_vars = 1;
  p.objective = {1};
  p.constraints = {{{1}, lp::Relation::greater_equal, 1}};
  EXPECT_EQ(lp::solve(p).status, lp::Status::unbounded);
}

TEST(Exact, MatchesBruteForce) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto cm = random_cm(1 + rng.below(5), 1 + rng.below(4), rng);
    const auto ta = select_targets_exact(cm);
    EXPECT_NEAR(ta.objective, brute_best(cm), 1e-12);
    for (std::size_t i = 0; i < cm.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cm.c_old; ++j) {
        EXPECT_TRUE(ta.T(i, j) == 0.0 || ta.T(i, j) == 1.0);
        s += ta.T(i, j);
      }
      EXPECT_EQ(s, 1.0);
      EXPECT_EQ(ta.T(i, static_cast<std::size_t>(ta.targets[i])), 1.0);
    }
  }
}

TEST(Exact, HandInstance) {
  // Two rows, two classes; both prefer class 0 but balance wants one each.
  ConfidenceMatrix cm{Matrix{{0.0, 0.9}, {0.8, 0.0}}, Labels{0, 1}, 2};
  const auto ta = select_targets_exact(cm);
  EXPECT_EQ(ta.targets, (Labels{1, 0}));
  EXPECT_NEAR(ta.objective, 1.7, 1e-15);
  ConfidenceMatrix cm2{Matrix{{0.9, 0.1}, {0.8, 0.3}}, Labels{2, 2}, 2};
  // one each: 0.9 + 0.3 = 1.2 beats both-to-0: 1.7 - 2 = -0.3
  EXPECT_EQ(select_targets_exact(cm2).targets, (Labels{0, 1}));
}

TEST(Exact, BudgetEnforced) {
  Rng rng(3);
  EXPECT_THROW(select_targets_exact(random_cm(7, 2, rng)), BudgetError);
  EXPECT_THROW(select_targets_exact(random_cm(2, 6, rng)), BudgetError);
}

TEST(Relaxed, FullSupportBoundsIntegralOptimum) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t c = 1 + rng.below(4);
    const auto cm = random_cm(1 + rng.below(5), c, rng);
    Rng srng(t);
    const auto ta = select_targets_relaxed(cm, c, srng);
    EXPECT_GE(ta.objective, brute_best(cm) - 1e-9);
    for (std::size_t i = 0; i < cm.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(ta.T(i, j), -1e-12);
        s += ta.T(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Relaxed, SupportStaysInTopK) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto cm = random_cm(5, 5, rng);
    Rng srng(t);
    const auto ta = select_targets_relaxed(cm, 2, srng);
    for (std::size_t i = 0; i < 5; ++i) {
      auto el = cm.eligible(i);
      std::stable_sort(el.begin(), el.end(), [&](auto a, auto b) { return cm.W(i, a) > cm.W(i, b); });
      const std::set<std::size_t> top(el.begin(), el.begin() + std::min<std::size_t>(2, el.size()));
      for (std::size_t j = 0; j < 5; ++j) {
        if (!top.count(j)) {
          EXPECT_EQ(ta.T(i, j), 0.0) << "row " << i << " col " << j;
        }
      }
      EXPECT_TRUE(top.count(static_cast<std::size_t>(ta.targets[i])));
    }
  }
}

TEST(Relaxed, KOneIsPerRowArgmax) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const auto cm = random_cm(1 + rng.below(8), 1 + rng.below(6), rng);
    Rng srng(t);
    const auto ta = select_targets_relaxed(cm, 1, srng);
    for (std::size_t i = 0; i < cm.rows(); ++i) {
      const auto el = cm.eligible(i);
      std::size_t best = el.front();
      for (std::size_t j : el)
        if (cm.W(i, j) > cm.W(i, best)) best = j;
      EXPECT_EQ(ta.targets[i], static_cast<Label>(best));
    }
  }
}

TEST(Relaxed, AllZeroRowIsUniformAtKOne) {
  ConfidenceMatrix cm{Matrix{{0.0, 0.0, 0.0}}, Labels{1}, 3};
  Rng rng(7);
  const auto ta = select_targets_relaxed(cm, 1, rng);
  EXPECT_EQ(ta.T(0, 0), 0.5);
  EXPECT_EQ(ta.T(0, 1), 0.0);
  EXPECT_EQ(ta.T(0, 2), 0.5);
  EXPECT_NE(ta.targets[0], 1);
  EXPECT_THROW(select_targets_relaxed(cm, 0, rng), std::invalid_argument);
}

TEST(Ablation, RandomNeverPicksOwnClass) {
  Rng rng(8);
  const auto cm = random_cm(50, 4, rng);
  const auto tl = select_targets_ablation(TargetStrategy::random, cm, rng);
  ASSERT_EQ(tl.rows.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_NE(tl.targets[i], cm.labels[i]);
    EXPECT_LT(tl.targets[i], 4);
  }
}

TEST(Ablation, FarthestIsLeastConfident) {
  ConfidenceMatrix cm{Matrix{{0.0, 0.3, 0.1}, {0.2, 0.5, 0.6}}, Labels{0, 7}, 3};
  Rng rng(9);
  const auto tl = select_targets_ablation(TargetStrategy::farthest, cm, rng);
  EXPECT_EQ(tl.targets, (Labels{2, 0}));
}

TEST(Ablation, GroundTruthKeepsOnlyOldRows) {
  ConfidenceMatrix cm{Matrix(3, 2), Labels{1, 4, 0}, 2};
  Rng rng(10);
  const auto tl = select_targets_ablation(TargetStrategy::ground_truth, cm, rng);
  EXPECT_EQ(tl.rows, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(tl.targets, (Labels{1, 0}));
  EXPECT_THROW(select_targets_ablation(TargetStrategy::nearest, cm, rng), std::invalid_argument);
}

TEST(Pgd, ZeroStepsOrZeroAlphaIsIdentity) {
  Rng rng(11);
  const auto clf = Classifier::cosine(3, 4, 2.0, rng);
  const Matrix z = rng.normal_matrix(5, 4);
  const Labels t{0, 1, 2, 0, 1};
  EXPECT_EQ(pgd_attack(z, t, clf, 0, 0.1), z);
  EXPECT_EQ(pgd_attack(z, t, clf, 10, 0.0), z);
}

TEST(Pgd, OrthogonalPrototypesFlip) {
  const auto clf = orthogonal_2d(1.0);
  Rng rng(12);
  std::size_t flipped = 0;
  for (int t = 0; t < 1000; ++t) {
    const double a = rng.uniform(0.05, 0.75);  // angle inside class 0's region
    const Matrix z{{std::cos(a), std::sin(a)}};
    const Matrix adv = pgd_attack(z, Labels{1}, clf, 50, 0.05);
    const Matrix l = clf.logits(adv);
    if (l(0, 1) > l(0, 0)) ++flipped;
  }
  EXPECT_GE(flipped, 950u);
}

TEST(Pgd, TraceRecordsEveryStep) {
  const auto clf = orthogonal_2d(4.0);
  std::vector<AttackStep> trace;
  pgd_attack(Matrix{{1.0, 0.1}}, Labels{1}, clf, 5, 0.1, &trace);
  ASSERT_EQ(trace.size(), 6u);
  EXPECT_LT(trace.back().loss, trace.front().loss);
  EXPECT_GT(trace.back().logit_gap, trace.front().logit_gap);
}

TEST(Pgd, RejectsBadInput) {
  const auto clf = orthogonal_2d(1.0);
  EXPECT_THROW(pgd_attack(Matrix{{std::nan(""), 0.0}}, Labels{0}, clf, 1, 0.1), NumericError);
  EXPECT_THROW(pgd_attack(Matrix{{1.0, 0.0}}, Labels{0, 1}, clf, 1, 0.1), DimensionError);
  const ModelSnapshot snap(1, Model{FeatureExtractor::identity(2), clf});
  EXPECT_THROW(pgd_attack(Matrix{{1.0, 0.0}}, Labels{2}, snap, 1, 0.1), std::out_of_range);
}

TEST(PseudoLabel, AlwaysAnOldClass) {
  Rng rng(13);
  const ModelSnapshot snap(1, Model{FeatureExtractor::identity(4), Classifier::cosine(3, 4, 1.0, rng)});
  for (Label l : pseudo_label(rng.normal_matrix(200, 4) * 10.0, snap)) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, 3);
  }
}

namespace {

Classifier cosine_with_seed(std::size_t classes, std::uint64_t seed) {
  Rng r(seed);
  return Classifier::cosine(classes, 4, 4.0, r);
}

struct AugFixture {
  Classifier current;
  ModelSnapshot snap;
  Matrix z;
  Labels y;

  AugFixture()
      : current(cosine_with_seed(5, 20)),
        snap(1, Model{FeatureExtractor::identity(4), cosine_with_seed(3, 21)}) {
    Rng rng(22);
    z = row_normalize(rng.normal_matrix(6, 4));
    y = {3, 4, 0, 3, 1, 4};
  }
};

}  // namespace

TEST(Augment, SizeProvenanceAndAlphaRange) {
  AugFixture f;
  AttackConfig cfg;
  cfg.multiplier = 3;
  Rng rng(23);
  const auto out = augment(f.z, f.y, f.current, &f.snap, cfg, rng);
  ASSERT_EQ(out.rows(), 18u);
  EXPECT_EQ(out.features.rows(), 18u);
  for (std::size_t r = 0; r < 18; ++r) {
    EXPECT_EQ(out.provenance[r].source, r % 6);
    EXPECT_GE(out.provenance[r].alpha, cfg.alpha_lo);
    EXPECT_LE(out.provenance[r].alpha, cfg.alpha_hi);
    EXPECT_LT(out.provenance[r].target, 3);
    EXPECT_NE(out.provenance[r].target, f.y[r % 6]);
    EXPECT_GE(out.labels[r], 0);
    EXPECT_LT(out.labels[r], 3);
  }
}

TEST(Augment, PseudoLabelsComeFromSnapshot) {
  AugFixture f;
  AttackConfig cfg;
  cfg.multiplier = 2;
  Rng rng(24);
  const auto out = augment(f.z, f.y, f.current, &f.snap, cfg, rng);
  EXPECT_EQ(out.labels, pseudo_label(out.features, f.snap));
}

TEST(Augment, EmptyWithoutSnapshotOrMultiplier) {
  AugFixture f;
  AttackConfig cfg;
  Rng rng(25);
  EXPECT_TRUE(augment(f.z, f.y, f.current, nullptr, cfg, rng).empty());
  cfg.multiplier = 0;
  EXPECT_TRUE(augment(f.z, f.y, f.current, &f.snap, cfg, rng).empty());
}

TEST(Augment, DeterministicForSameStream) {
  AugFixture f;
  AttackConfig cfg;
  cfg.strategy = TargetStrategy::relaxed_lp;
  cfg.top_k = 2;
  Rng a(26), b(26);
  const auto x = augment(f.z, f.y, f.current, &f.snap, cfg, a);
  const auto y = augment(f.z, f.y, f.current, &f.snap, cfg, b);
  EXPECT_EQ(x.features, y.features);
  EXPECT_EQ(x.labels, y.labels);
}

TEST(Augment, GroundTruthAblationUsesOnlyOldRows) {
  AugFixture f;
  AttackConfig cfg;
  cfg.strategy = TargetStrategy::ground_truth;
  cfg.multiplier = 2;
  Rng rng(27);
  const auto out = augment(f.z, f.y, f.current, &f.snap, cfg, rng);
  ASSERT_EQ(out.rows(), 4u);
  for (const auto& p : out.provenance) EXPECT_EQ(p.target, f.y[p.source]);
}

TEST(Augment, AttackLogsOnePerCopy) {
  AugFixture f;
  AttackConfig cfg;
  cfg.multiplier = 2;
  cfg.steps = 4;
  Rng rng(28);
  std::vector<AttackLog> logs;
  augment(f.z, f.y, f.current, &f.snap, cfg, rng, &logs);
  ASSERT_EQ(logs.size(), 2u);
  EXPECT_EQ(logs[1].copy, 1u);
  EXPECT_EQ(logs[0].steps.size(), 5u);
}

TEST(Augment, GaussianNoiseBaseline) {
  AugFixture f;
  Rng rng(29);
  const auto out = gaussian_noise_augment(f.z, f.y, &f.snap, rng, 2, 0.5);
  EXPECT_EQ(out.rows(), 12u);
  EXPECT_EQ(out.labels, pseudo_label(out.features, f.snap));
  EXPECT_TRUE(gaussian_noise_augment(f.z, f.y, nullptr, rng).empty());
}

TEST(AttackConfigTest, Validation) {
  AttackConfig c;
  c.alpha_lo = 0.2;
  c.alpha_hi = 0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.top_k = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Oracle, SmallInstancesHaveNoViolations) {
  OracleOptions opt;
  const auto rep = run_oracle(opt);
  EXPECT_EQ(rep.trials, 100u);
  EXPECT_TRUE(rep.ok()) << (rep.violations.empty() ? "" : rep.violations.front().instance);
  EXPECT_EQ(rep.exact_checks, 100u);
}

TEST(Oracle, OverBudgetRejected) {
  OracleOptions opt;
  opt.max_rows = 7;
  EXPECT_THROW(run_oracle(opt), BudgetError);
}

TEST(Oracle, FixedSeedSameInstances) {
  OracleOptions opt;
  opt.seed = 17;
  EXPECT_EQ(run_oracle(opt).instance_hash, run_oracle(opt).instance_hash);
  OracleOptions other = opt;
  other.seed = 18;
  EXPECT_NE(run_oracle(opt).instance_hash, run_oracle(other).instance_hash);
}
