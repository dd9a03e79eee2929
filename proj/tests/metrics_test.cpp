#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "doctorai/metrics.hpp"
#include "fixtures.hpp"

namespace doctorai {
namespace {

PredictionRanking ranking(std::vector<double> scores) { return {Vector(std::move(scores)), std::nullopt}; }

TEST(TopK, DescendingWithIndexTieBreak) {
  const auto r = ranking({0.1, 0.5, 0.5, 0.9, 0.0});
  EXPECT_EQ(r.top_k(3), (std::vector<std::size_t>{3, 1, 2}));
  EXPECT_EQ(r.top_k(10).size(), 5u);
}

TEST(TopKRecall, Definition) {
  // codes A=0, B=1, C=2, X=3; top-3 = [A, B, X]
  const auto r = ranking({0.9, 0.8, 0.1, 0.7, 0.0});
  const std::vector<std::size_t> truth{0, 1, 2};
  EXPECT_DOUBLE_EQ(*top_k_recall(r, truth, 3), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*top_k_recall(r, truth, 5), 1.0);
  EXPECT_FALSE(top_k_recall(r, std::vector<std::size_t>{}, 3).has_value());
  EXPECT_THROW(top_k_recall(r, truth, 0), InvalidArgument);
}

TEST(TopKRecall, MatchesBruteForceIntersection) {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> scores(8);
    for (auto& s : scores) s = std::floor(rng.uniform() * 4.0);  // frequent ties
    std::set<std::size_t> truth;
    while (truth.size() < 3) truth.insert(rng.below(8));
    // Oracle: the k-th best (score, -index) threshold, then a set intersection.
    std::vector<std::pair<double, int>> keyed;
    for (int i = 0; i < 8; ++i) keyed.push_back({scores[i], -i});
    std::sort(keyed.rbegin(), keyed.rend());
    std::set<std::size_t> top;
    for (int q = 0; q < 4; ++q) top.insert(static_cast<std::size_t>(-keyed[q].second));
    std::size_t hits = 0;
    for (auto t : truth) hits += top.count(t);
    const std::vector<std::size_t> tv(truth.begin(), truth.end());
    EXPECT_EQ(*top_k_recall(ranking(scores), tv, 4), static_cast<double>(hits) / 3.0);
  }
}

TEST(TopKRecall, MonotoneInK) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> scores(20);
    for (auto& s : scores) s = rng.uniform();
    const std::vector<std::size_t> truth{rng.below(20), 5, 11};
    double prev = 0.0;
    for (std::size_t k = 1; k <= 20; ++k) {
      const double r = *top_k_recall(ranking(scores), truth, k);
      EXPECT_GE(r, prev);
      prev = r;
    }
  }
}

TEST(RSquared, CanonicalCases) {
  const std::vector<double> y{0.5, 1.5, 2.0, 4.0, 3.0};
  const double mean = (0.5 + 1.5 + 2.0 + 4.0 + 3.0) / 5.0;
  EXPECT_NEAR(r_squared_log(y, y), 1.0, 1e-12);
  EXPECT_NEAR(r_squared_log(std::vector<double>(5, mean), y), 0.0, 1e-12);
  std::vector<double> anti(5);
  for (std::size_t i = 0; i < 5; ++i) anti[i] = 2.0 * mean - y[i];
  // Mirror image about the mean: SS_res = 4 SS_tot, so R^2 = -3.
  EXPECT_NEAR(r_squared_log(anti, y), -3.0, 1e-12);
  EXPECT_THROW(r_squared_log(std::vector<double>{1, 2}, std::vector<double>{3, 3}), UndefinedMetricError);
  EXPECT_THROW(r_squared_log(std::vector<double>{1}, std::vector<double>{3}), UndefinedMetricError);
  EXPECT_THROW(r_squared_log(std::vector<double>{1}, std::vector<double>{3, 4}), DimensionError);
}

// Scores the previous visit's codes 1, everything else 0.
struct RepeatLast {
  std::size_t p;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    std::vector<PredictionRanking> out;
    for (std::size_t i = 0; i + 1 < seq.length(); ++i) {
      Vector s(p);
      for (auto c : seq.codes[i]) s[c] = 1.0;
      out.push_back({s, seq.log_gap(i + 1)});
    }
    return out;
  }
};

struct RandomScores {
  std::size_t p;
  std::uint64_t seed;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    Rng rng(seed ^ std::hash<std::string>{}(seq.patient_id));
    std::vector<PredictionRanking> out;
    for (std::size_t i = 0; i + 1 < seq.length(); ++i) {
      Vector s(p);
      for (auto& x : s) x = rng.uniform();
      out.push_back({s, std::nullopt});
    }
    return out;
  }
};

TEST(Evaluate, RepeatingCohortIsPerfect) {
  std::vector<PatientSequence> patients;
  for (int n = 0; n < 5; ++n)
    patients.push_back(testing::make_patient("r" + std::to_string(n), {1, 3, 10, 12 + n},
                                             {{1, 2}, {1, 2}, {1, 2}, {1, 2}}));
  CodeVocabulary vocab = testing::numbered_vocab(40);
  const Cohort cohort = make_cohort(patients, &vocab);
  const auto report = evaluate_model(RepeatLast{40}, cohort);
  ASSERT_EQ(report.recall.size(), 3u);
  for (double r : report.recall) EXPECT_DOUBLE_EQ(r, 1.0);
  EXPECT_EQ(report.visits, 15u);
  ASSERT_TRUE(report.r2.has_value());
  EXPECT_DOUBLE_EQ(*report.r2, 1.0);
  EXPECT_EQ(report.to_json(), evaluate_model(RepeatLast{40}, cohort).to_json());
}

TEST(Evaluate, RandomScorerRecallNearTenPercent) {
  Rng rng(8);
  std::vector<PatientSequence> patients;
  for (int n = 0; n < 260; ++n) {
    std::vector<std::int64_t> t;
    std::vector<std::vector<std::size_t>> c;
    for (int v = 0; v < 21; ++v) {
      t.push_back(v * 7 + 1);
      c.push_back({rng.below(100)});
    }
    patients.push_back(testing::make_patient("u" + std::to_string(n), t, c));
  }
  CodeVocabulary vocab = testing::numbered_vocab(100);
  const Cohort cohort = make_cohort(patients, &vocab);
  const auto report = evaluate_model(RandomScores{100, 1}, cohort, {10});
  EXPECT_GE(report.visits, 5000u);
  EXPECT_NEAR(report.recall[0], 0.10, 0.02);
  EXPECT_FALSE(report.r2.has_value());
}

TEST(Curve, SinglePatientHasZeroStderr) {
  Rng rng(2);
  CodeVocabulary vocab = testing::numbered_vocab(30);
  const Cohort cohort = make_cohort({testing::random_patient(30, 12, rng, "a"), testing::random_patient(30, 3, rng, "b")}, &vocab);
  const auto curve = recall_by_history_length(RepeatLast{30}, cohort, 10, 5);
  ASSERT_EQ(curve.size(), 11u);
  for (std::size_t j = 0; j < curve.size(); ++j) {
    EXPECT_EQ(curve[j].index, j + 1);
    EXPECT_EQ(curve[j].stderr_, 0.0);
    EXPECT_EQ(curve[j].count, 1u);
  }
  EXPECT_THROW(recall_by_history_length(RepeatLast{30}, cohort, 13, 5), InsufficientDataError);
  EXPECT_EQ(curve_csv(curve).substr(0, 17), "index,mean,stderr");
}

TEST(Curve, StderrMatchesHandComputation) {
  // Two patients; at index 1 recall@1 is 1 for one and 0 for the other.
  const auto a = testing::make_patient("a", {1, 2, 3}, {{0}, {0}, {0}});
  const auto b = testing::make_patient("b", {1, 2, 3}, {{0}, {1}, {1}});
  CodeVocabulary vocab = testing::numbered_vocab(2);
  const auto curve = recall_by_history_length(RepeatLast{2}, make_cohort({a, b}, &vocab), 3, 1);
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_DOUBLE_EQ(curve[0].mean, 0.5);
  // sample sd = sqrt(0.5); stderr = sd / sqrt(2) = 0.5
  EXPECT_NEAR(curve[0].stderr_, 0.5, 1e-15);
}

TEST(Perplexity, Bounds) {
  EXPECT_NEAR(perplexity(std::vector<double>(7, 1.0 / 7.0)), 7.0, 1e-12);
  std::vector<double> peaked(50, 1e-12);
  peaked[3] = 1.0 - 49e-12;
  EXPECT_NEAR(perplexity(peaked), 1.0, 1e-8);
}

struct UniformModel {
  std::size_t p;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    return std::vector<PredictionRanking>(seq.length() - 1, {Vector(p, 1.0 / static_cast<double>(p)), std::nullopt});
  }
};

TEST(Perplexity, ProbeShapesAndErrors) {
  CodeVocabulary vocab = testing::numbered_vocab(12);
  const auto curve = perplexity_probe(UniformModel{12}, vocab, vocab.code(4), 6);
  ASSERT_EQ(curve.size(), 5u);
  for (double v : curve) EXPECT_NEAR(v, 12.0, 1e-10);
  EXPECT_THROW(perplexity_probe(UniformModel{12}, vocab, "999", 6), UnknownCodeError);
  EXPECT_THROW(perplexity_probe(UniformModel{12}, vocab, vocab.code(0), 1), InvalidArgument);
}

TEST(Perplexity, GruProbeWithinBounds) {
  Rng rng(4);
  NetworkShape shape;
  shape.input_codes = shape.output_codes = 12;
  shape.embedding = 6;
  shape.hidden = 8;
  const auto params = testing::random_network(shape, rng);
  CodeVocabulary vocab = testing::numbered_vocab(12);
  for (double v : perplexity_probe(GruPredictor(params), vocab, vocab.code(2), 20)) {
    EXPECT_GE(v, 1.0);
    EXPECT_LE(v, 12.0 + 1e-9);
  }
}

}  // namespace
}  // namespace doctorai
