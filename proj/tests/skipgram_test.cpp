#include <gtest/gtest.h>

#include <filesystem>

#include "doctorai/skipgram.hpp"
#include "fixtures.hpp"

namespace doctorai {
namespace {

TEST(Skipgram, PlantedPairIsCloserThanRandomPairs) {
  const Cohort cohort = testing::planted_corpus(5);
  SkipgramConfig cfg;
  cfg.dim = 20;
  cfg.window = 2;
  cfg.epochs = 5;
  cfg.seed = 9;
  const EmbeddingTable table = train_skipgram(cohort, cfg);
  ASSERT_EQ(table.vectors.rows(), 50u);
  ASSERT_EQ(table.vectors.cols(), 20u);
  auto row = [&](std::size_t i) { return std::span<const double>(table.vectors.row(i), 20); };
  const double planted = cosine_similarity(row(0), row(1));
  double random_mean = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 2; a < 50; ++a)
    for (std::size_t b = a + 1; b < 50; ++b, ++pairs) random_mean += cosine_similarity(row(a), row(b));
  random_mean /= static_cast<double>(pairs);
  EXPECT_GE(planted, random_mean + 0.2) << "planted=" << planted << " random=" << random_mean;
}

TEST(Skipgram, LossDecreases) {
  const Cohort cohort = testing::planted_corpus(6);
  SkipgramConfig cfg;
  cfg.dim = 16;
  cfg.epochs = 5;
  std::vector<double> losses;
  train_skipgram(cohort, cfg, &losses);
  ASSERT_EQ(losses.size(), 5u);
  EXPECT_LT(losses[4], losses[0]);
}

TEST(Skipgram, Deterministic) {
  const Cohort cohort = testing::planted_corpus(7);
  SkipgramConfig cfg;
  cfg.dim = 8;
  cfg.epochs = 2;
  cfg.seed = 4;
  const auto a = train_skipgram(cohort, cfg);
  const auto b = train_skipgram(cohort, cfg);
  EXPECT_EQ(a.vectors, b.vectors);
  cfg.seed = 5;
  EXPECT_NE(a.vectors, train_skipgram(cohort, cfg).vectors);
}

TEST(Skipgram, RejectsBadConfig) {
  const Cohort cohort = testing::planted_corpus(1);
  SkipgramConfig cfg;
  cfg.window = 0;
  EXPECT_THROW(train_skipgram(cohort, cfg), InvalidArgument);
  cfg = {};
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train_skipgram(cohort, cfg), InvalidArgument);
}

TEST(CodeStream, KeepsVisitOrderAndPatientBoundaries) {
  const auto p1 = testing::make_patient("a", {1, 2, 3}, {{0, 1}, {2}, {3, 4, 5}});
  const auto p2 = testing::make_patient("b", {1, 2}, {{6}, {7}});
  CodeVocabulary vocab = testing::numbered_vocab(8);
  const Cohort cohort = make_cohort({p1, p2}, &vocab);
  Rng rng(3);
  const auto streams = emit_code_stream(cohort, rng);
  ASSERT_EQ(streams.size(), 2u);
  ASSERT_EQ(streams[0].size(), 6u);
  EXPECT_EQ(std::set<std::size_t>(streams[0].begin(), streams[0].begin() + 2), (std::set<std::size_t>{0, 1}));
  EXPECT_EQ(streams[0][2], 2u);
  EXPECT_EQ(std::set<std::size_t>(streams[0].begin() + 3, streams[0].end()), (std::set<std::size_t>{3, 4, 5}));
  EXPECT_EQ(streams[1], (CodeStream{6, 7}));
}

TEST(CodeStream, PairBoundAndNoCrossPatientPairs) {
  Rng rng(2);
  for (std::size_t w : {1u, 2u, 5u}) {
    for (std::size_t len : {1u, 3u, 10u, 40u}) {
      CodeStream s(len);
      for (auto& c : s) c = rng.below(10);
      std::size_t pairs = 0;
      for_each_positive_pair(s, w, [&](std::size_t, std::size_t) { ++pairs; });
      EXPECT_LE(pairs, 2 * w * len);
      const std::size_t expected = len < 2 ? 0 : [&] {
        std::size_t e = 0;
        for (std::size_t i = 0; i < len; ++i) e += std::min(i, w) + std::min(len - 1 - i, w);
        return e;
      }();
      EXPECT_EQ(pairs, expected);
    }
  }
  const auto p1 = testing::make_patient("a", {1, 2}, {{0}, {1}});
  const auto p2 = testing::make_patient("b", {1, 2}, {{2}, {3}});
  CodeVocabulary vocab = testing::numbered_vocab(4);
  Rng srng(1);
  for (const auto& s : emit_code_stream(make_cohort({p1, p2}, &vocab), srng))
    for_each_positive_pair(s, 5, [&](std::size_t a, std::size_t b) { EXPECT_EQ(a / 2, b / 2); });
}

TEST(Embeddings, PersistRoundTrip) {
  EmbeddingTable t{{"401", "250", "V58"}, Matrix(3, 2, std::vector<double>{0.1, -0.2, 1e-300, 3.5, -0.0, 7.25})};
  const auto path = std::filesystem::temp_directory_path() / "doctorai_emb_test.json";
  save_embeddings(t, path);
  const EmbeddingTable back = load_embeddings(path);
  EXPECT_EQ(back.codes, t.codes);
  EXPECT_EQ(back.vectors, t.vectors);
  EXPECT_EQ(serialize_embeddings(back), serialize_embeddings(t));
}

TEST(Embeddings, RejectsBadFiles) {
  EmbeddingTable t{{"401"}, Matrix(1, 2, std::vector<double>{1.0, 2.0})};
  auto j = nlohmann::json::parse(serialize_embeddings(t));
  j["version"] = 999;
  EXPECT_THROW(parse_embeddings(j.dump()), UnsupportedVersionError);
  j["version"] = 1;
  j["data"] = j["data"].get<std::string>().substr(0, 8);
  EXPECT_THROW(parse_embeddings(j.dump()), CorruptionError);
  EXPECT_THROW(parse_embeddings("{\"version\":1"), CorruptionError);
}

TEST(Embeddings, LoadRowsByCode) {
  NetworkShape shape;
  shape.input_codes = shape.output_codes = 2;
  shape.embedding = 2;
  shape.hidden = 3;
  shape.mode = EmbeddingMode::skipgram;
  Rng rng(1);
  GruNetworkParams params = init_network(shape, rng);
  CodeVocabulary vocab(std::vector<std::string>{"250", "401"});
  EmbeddingTable t{{"401", "V58", "250"}, Matrix(3, 2, std::vector<double>{1, 2, 3, 4, 5, 6})};
  load_embedding_rows(params, vocab, t);
  EXPECT_EQ(params.W_emb, Matrix(2, 2, std::vector<double>{5, 6, 1, 2}));
  EmbeddingTable missing{{"401"}, Matrix(1, 2, std::vector<double>{1, 2})};
  EXPECT_THROW(load_embedding_rows(params, vocab, missing), MappingError);
  EmbeddingTable wide{{"401", "250"}, Matrix(2, 3)};
  EXPECT_THROW(load_embedding_rows(params, vocab, wide), DimensionError);
}

}  // namespace
}  // namespace doctorai
