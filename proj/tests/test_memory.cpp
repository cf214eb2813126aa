#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "ccfa/memory.hpp"
#include "ccfa/serialize.hpp"

using namespace ccfa;

namespace {

// Recomputes every candidate's running mean from scratch each step.
std::vector<std::size_t> greedy_oracle(const Matrix& f, std::size_t m) {
  const std::size_t n = f.rows(), d = f.cols();
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += f(i, j) / static_cast<double>(n);
  std::vector<std::size_t> sel;
  for (std::size_t t = 0; t < std::min(m, n); ++t) {
    std::size_t best = n;
    double best_d = 1e300;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double s = f(i, j);
        for (std::size_t k : sel) s += f(k, j);
        const double diff = mu[j] - s / static_cast<double>(sel.size() + 1);
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = i;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

double mean_gap(const Matrix& f, const std::vector<std::size_t>& sel) {
  const std::size_t d = f.cols();
  double gap = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double all = 0.0, part = 0.0;
    for (std::size_t i = 0; i < f.rows(); ++i) all += f(i, j);
    for (std::size_t i : sel) part += f(i, j);
    const double diff = all / static_cast<double>(f.rows()) - part / static_cast<double>(sel.size());
    gap += diff * diff;
  }
  return std::sqrt(gap);
}

TaskStream small_stream(std::size_t per_class = 12) {
  SyntheticSpec spec;
  spec.dim = 5;
  spec.classes = 4;
  spec.train_per_class = per_class;
  spec.test_per_class = 3;
  spec.seed = 3;
  const auto data = generate_synthetic(spec);
  return split_stream(data.train, data.test, 2, 1, Labels{0, 1, 2, 3});
}

}  // namespace

TEST(Herding, MatchesGreedyOracle) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(30), m = 1 + rng.below(12);
    const Matrix f = rng.normal_matrix(n, 1 + rng.below(6));
    EXPECT_EQ(herding_select(f, m), greedy_oracle(f, m)) << "trial " << t;
  }
}

TEST(Herding, CloserThanRandomSubsets) {
  Rng rng(2);
  int wins = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const Matrix f = rng.normal_matrix(60, 8);
    const double herd = mean_gap(f, herding_select(f, 6));
    std::vector<std::size_t> perm(60);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    perm.resize(6);
    if (herd < mean_gap(f, perm)) ++wins;
  }
  EXPECT_GE(wins, trials * 95 / 100);
}

TEST(Herding, SmallClassesAndEdgeCases) {
  const Matrix f{{1, 0}, {0, 1}, {1, 1}};
  const auto sel = herding_select(f, 10);
  EXPECT_EQ(std::set<std::size_t>(sel.begin(), sel.end()).size(), 3u);
  // The mean (2/3, 2/3) is nearest to (1, 1) first.
  EXPECT_EQ(sel.front(), 2u);
  EXPECT_THROW(herding_select(Matrix(0, 2), 1), std::invalid_argument);
  EXPECT_THROW(herding_select(f, 0), std::invalid_argument);
}

TEST(Buffer, UpdateKeepsEarlierClassesUntouched) {
  const auto st = small_stream();
  const auto ext = FeatureExtractor::identity(5);
  const auto b1 = update_buffer(MemoryBuffer{}, st.train, st.tasks[0], ext, 3, 0);
  EXPECT_EQ(b1.size(), 6u);
  const auto b2 = update_buffer(b1, st.train, st.tasks[1], ext, 3, 1);
  EXPECT_EQ(b2.size(), 9u);
  EXPECT_EQ(b2.exemplars.at(0), b1.exemplars.at(0));
  EXPECT_EQ(b2.exemplars.at(1), b1.exemplars.at(1));
  for (const auto& [c, idx] : b2.exemplars)
    for (std::size_t i : idx) EXPECT_EQ(st.train.y[i], c);
  b2.validate(st.train.size());
}

TEST(Buffer, OverlapAndZeroBudgetRejected) {
  const auto st = small_stream();
  const auto ext = FeatureExtractor::identity(5);
  const auto b1 = update_buffer(MemoryBuffer{}, st.train, st.tasks[0], ext, 3, 0);
  EXPECT_THROW(update_buffer(b1, st.train, st.tasks[0], ext, 3, 1), std::invalid_argument);
  EXPECT_THROW(update_buffer(MemoryBuffer{}, st.train, st.tasks[0], ext, 0, 0), std::invalid_argument);
}

TEST(Buffer, BudgetLargerThanClassKeepsWholeClass) {
  const auto st = small_stream(4);
  const auto b = update_buffer(MemoryBuffer{}, st.train, st.tasks[0], FeatureExtractor::identity(5), 20, 0);
  EXPECT_EQ(b.exemplars.at(0).size(), 4u);
}

TEST(Buffer, HerdingUsesExtractorFeatures) {
  const auto st = small_stream();
  const auto ext = FeatureExtractor::identity(5);
  const auto b = update_buffer(MemoryBuffer{}, st.train, st.tasks[0], ext, 4, 0);
  const auto& rows = st.tasks[0].train;
  std::vector<std::size_t> class0;
  for (std::size_t i : rows)
    if (st.train.y[i] == 0) class0.push_back(i);
  std::vector<std::size_t> expect;
  for (std::size_t p : greedy_oracle(ext.forward(st.train.x.gather_rows(class0)), 4)) expect.push_back(class0[p]);
  EXPECT_EQ(b.exemplars.at(0), expect);
}

TEST(Buffer, ValidateCatchesCorruption) {
  MemoryBuffer b;
  b.budget = 2;
  b.exemplars[0] = {1, 2, 3};
  EXPECT_THROW(b.validate(10), std::invalid_argument);
  b.exemplars[0] = {1, 1};
  EXPECT_THROW(b.validate(10), std::invalid_argument);
  b.exemplars[0] = {1, 12};
  EXPECT_THROW(b.validate(10), std::out_of_range);
}

TEST(Buffer, JsonRoundTrip) {
  const auto st = small_stream();
  const auto b = update_buffer(MemoryBuffer{}, st.train, st.tasks[0], FeatureExtractor::identity(5), 3, 0);
  EXPECT_EQ(buffer_from_json(to_json(b)), b);
}
