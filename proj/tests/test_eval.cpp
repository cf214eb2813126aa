#include <gtest/gtest.h>

#include <sstream>

#include "ccfa/eval.hpp"
#include "ccfa/serialize.hpp"

using namespace ccfa;

namespace {

MetricsRecord rec(std::size_t stage, double acc, std::optional<double> new_acc = std::nullopt) {
  MetricsRecord r;
  r.stage = stage;
  r.accuracy = acc;
  r.new_accuracy = new_acc;
  return r;
}

MetricsRecord rec_classes(std::size_t stage, std::map<Label, ClassCount> pc) {
  MetricsRecord r;
  r.stage = stage;
  std::size_t c = 0, t = 0;
  for (const auto& [k, v] : pc) {
    c += v.correct;
    t += v.total;
  }
  r.accuracy = static_cast<double>(c) / static_cast<double>(t);
  r.per_class = std::move(pc);
  if (stage > 1) r.new_accuracy = 0.5;
  return r;
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Aia, SingleStageIsItsAccuracy) {
  EXPECT_DOUBLE_EQ(average_incremental_accuracy({rec(1, 0.8)}), 0.8);
}

TEST(Aia, TwoStages) {
  EXPECT_DOUBLE_EQ(average_incremental_accuracy({rec(1, 1.0), rec(2, 0.5)}), 0.75);
}

TEST(Aia, FiveStagesByHand) {
  const std::vector<MetricsRecord> r{rec(1, 0.9), rec(2, 0.8), rec(3, 0.7), rec(4, 0.65), rec(5, 0.55)};
  EXPECT_NEAR(average_incremental_accuracy(r), 3.6 / 5.0, 1e-15);
  EXPECT_THROW(average_incremental_accuracy({}), std::invalid_argument);
}

TEST(Forgetting, ConstantAccuracyIsZero) {
  const std::vector<std::map<Label, double>> h{{{0, 0.7}}, {{0, 0.7}, {1, 0.4}}, {{0, 0.7}, {1, 0.4}, {2, 1.0}}};
  EXPECT_EQ(forgetting(h), 0.0);
}

TEST(Forgetting, SingleDrop) {
  EXPECT_NEAR(forgetting({{{0, 0.9}}, {{0, 0.6}, {1, 1.0}}}), 0.3, 1e-15);
}

TEST(Forgetting, ThreeByThreeByHand) {
  // class 0: best 0.9, final 0.5 -> 0.4
  // class 1: best 0.8, final 0.7 -> 0.1
  // class 2 arrives in the last stage and is not counted
  const std::vector<std::map<Label, double>> h{
      {{0, 0.9}}, {{0, 0.6}, {1, 0.8}}, {{0, 0.5}, {1, 0.7}, {2, 0.9}}};
  EXPECT_NEAR(forgetting(h), 0.25, 1e-15);
}

TEST(Forgetting, FinalStageImprovementCountsAsZero) {
  EXPECT_EQ(forgetting({{{0, 0.4}}, {{0, 0.6}, {1, 0.2}}}), 0.0);
}

TEST(Forgetting, Errors) {
  EXPECT_THROW(forgetting(std::vector<std::map<Label, double>>{{{0, 1.0}}}), std::invalid_argument);
  EXPECT_THROW(forgetting({{{0, 1.0}}, {{1, 1.0}}}), std::invalid_argument);
}

TEST(Forgetting, FromRecords) {
  const std::vector<MetricsRecord> r{rec_classes(1, {{0, {9, 10}}, {1, {5, 10}}}),
                                     rec_classes(2, {{0, {6, 10}}, {1, {5, 10}}, {2, {5, 10}}})};
  EXPECT_NEAR(forgetting(r), 0.15, 1e-15);
}

TEST(NewAccuracy, MeanOverLaterStages) {
  EXPECT_NEAR(average_new_accuracy({rec(1, 0.9), rec(2, 0.5, 0.8), rec(3, 0.5, 0.6)}), 0.7, 1e-15);
  EXPECT_THROW(average_new_accuracy({rec(1, 0.9)}), std::invalid_argument);
  EXPECT_THROW(average_new_accuracy({rec(1, 0.9), rec(2, 0.5)}), std::invalid_argument);
}

TEST(Summarize, SingleStageHasNoForgetting) {
  const auto s = summarize({rec(1, 0.8)}, "abc", 3);
  EXPECT_DOUBLE_EQ(s.average_incremental_accuracy, 0.8);
  EXPECT_FALSE(s.forgetting);
  EXPECT_FALSE(s.average_new_accuracy);
  EXPECT_EQ(s.config_hash, "abc");
  EXPECT_EQ(s.seed, 3u);
}

TEST(Evaluate, MatchesDirectCount) {
  // Two classes per task on the plane; prototypes on the axes.
  Dataset train{Matrix(4, 2), Labels{0, 1, 2, 3}, 4};
  Dataset test{Matrix{{1, 0.1}, {0.1, 1}, {-1, 0.2}, {0.2, -1}, {1, -0.3}, {-1, -0.1}}, Labels{0, 1, 2, 3, 1, 3}, 4};
  const auto st = split_stream(train, test, 2, 2, Labels{0, 1, 2, 3});
  const Model m{FeatureExtractor::identity(2),
                Classifier(CosineClassifier{Matrix{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}, 1.0})};
  const auto r0 = evaluate(Model{m.extractor, Classifier(CosineClassifier{Matrix{{1, 0}, {0, 1}}, 1.0})}, st, 0);
  // task 0 rows: 0 (ok), 1 (ok), 4 (label 1, predicted 0)
  EXPECT_NEAR(r0.accuracy, 2.0 / 3.0, 1e-15);
  EXPECT_FALSE(r0.new_accuracy);
  const auto r1 = evaluate(m, st, 1);
  // all six rows; row 4 wrong (pred 0), row 5 (label 3) predicted 2
  EXPECT_NEAR(r1.accuracy, 4.0 / 6.0, 1e-15);
  ASSERT_TRUE(r1.new_accuracy);
  EXPECT_NEAR(*r1.new_accuracy, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r1.per_class.at(1), (ClassCount{1, 2}));
  EXPECT_EQ(r1.per_class.at(3), (ClassCount{1, 2}));
  EXPECT_EQ(r1.new_classes, (Labels{2, 3}));
}

TEST(Records, SummaryRecomputedFromSerializedRecords) {
  const std::vector<MetricsRecord> r{rec_classes(1, {{0, {9, 10}}, {1, {3, 10}}}),
                                     rec_classes(2, {{0, {7, 10}}, {1, {4, 10}}, {2, {8, 10}}}),
                                     rec_classes(3, {{0, {7, 10}}, {1, {2, 10}}, {2, {6, 10}}, {3, {9, 10}}})};
  const auto back = parse_records_jsonl(records_jsonl(r));
  ASSERT_EQ(back.size(), 3u);
  const auto a = summarize(r, "h", 1), b = summarize(back, "h", 1);
  EXPECT_EQ(a.average_incremental_accuracy, b.average_incremental_accuracy);
  EXPECT_EQ(*a.forgetting, *b.forgetting);
  EXPECT_EQ(*a.average_new_accuracy, *b.average_new_accuracy);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Records, CurvesCsvHasOneLinePerStage) {
  const std::vector<MetricsRecord> r{rec(1, 0.9), rec(2, 0.8, 0.7)};
  const std::string csv = curves_csv(r);
  EXPECT_EQ(count_lines(csv), 3u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "stage,accuracy,new_accuracy");
}

TEST(DumpPoints, RowCountsHeaderAndDeterminism) {
  Rng rng(1);
  const Matrix f2 = rng.normal_matrix(7, 2), f3 = rng.normal_matrix(4, 3);
  const std::string a = dump_points(f2, Labels(7, 1), "memory");
  EXPECT_EQ(count_lines(a), 8u);
  EXPECT_EQ(a.substr(0, a.find('\n')), "x,y,label,tag");
  EXPECT_EQ(a, dump_points(f2, Labels(7, 1), "memory"));
  const std::string b = dump_points(f3, Labels(4, 0), "augmented", false);
  EXPECT_EQ(count_lines(b), 4u);
  EXPECT_EQ(dump_points(f3, Labels(4, 0), "t").substr(0, 19), "f0,f1,f2,label,tag\n");
  EXPECT_THROW(dump_points(f3, Labels(3, 0), "t"), DimensionError);
}

TEST(DumpPoints, ValuesRoundTrip) {
  const Matrix f{{0.1, 1.0 / 3.0}};
  const std::string s = dump_points(f, Labels{2}, "x", false);
  std::istringstream in(s);
  double a, b;
  char comma;
  in >> a >> comma >> b;
  EXPECT_EQ(a, 0.1);
  EXPECT_EQ(b, 1.0 / 3.0);
}
