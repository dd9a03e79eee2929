#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "doctorai/optim.hpp"
#include "doctorai/synthetic.hpp"
#include "fixtures.hpp"

namespace doctorai {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "doctorai_optim_test";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<TensorRef> scalar_ref(double& x, const std::string& name = "x") {
  return {{name, {1}, std::span<double>(&x, 1)}};
}

TEST(Adadelta, FirstStepHandValue) {
  double theta = 0.0, g = 1.0;
  OptimizerState state;
  adadelta_step(scalar_ref(theta), scalar_ref(g), state, 0.95, 1e-6);
  EXPECT_NEAR(theta, -std::sqrt(1e-6 / (0.05 + 1e-6)), 1e-15);
  EXPECT_NEAR(theta, -0.004472, 1e-6);
  EXPECT_NEAR(state.mean_sq_grad[0][0], 0.05, 1e-15);
  EXPECT_NEAR(state.mean_sq_update[0][0], 0.05 * theta * theta, 1e-18);
}

TEST(Adadelta, ZeroGradientDecaysAccumulators) {
  double theta = 1.5, g = 0.0;
  OptimizerState state;
  state.mean_sq_grad = {{0.4}};
  state.mean_sq_update = {{0.2}};
  adadelta_step(scalar_ref(theta), scalar_ref(g), state, 0.95, 1e-6);
  EXPECT_EQ(theta, 1.5);
  EXPECT_DOUBLE_EQ(state.mean_sq_grad[0][0], 0.95 * 0.4);
  EXPECT_DOUBLE_EQ(state.mean_sq_update[0][0], 0.95 * 0.2);
}

TEST(Adadelta, DeterministicAndBounded) {
  Rng rng(5);
  std::vector<double> a(20), b(20), g(20);
  for (auto& x : g) x = rng.normal() * 10.0;
  OptimizerState sa, sb;
  for (int step = 0; step < 30; ++step) {
    std::vector<double> before = a;
    std::vector<TensorRef> pa{{"a", {20}, a}}, pb{{"a", {20}, b}}, gr{{"a", {20}, g}};
    const auto ed = sa.mean_sq_update.empty() ? std::vector<double>(20, 0.0) : sa.mean_sq_update[0];
    adadelta_step(pa, gr, sa, 0.95, 1e-6);
    adadelta_step(pb, gr, sb, 0.95, 1e-6);
    for (std::size_t k = 0; k < 20; ++k)
      EXPECT_LE(std::abs(a[k] - before[k]), std::sqrt((ed[k] + 1e-6) / 1e-6) * std::abs(g[k]) + 1e-15);
  }
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa, sb);
  for (const auto& v : sa.mean_sq_grad[0]) EXPECT_GE(v, 0.0);
}

TEST(Adadelta, RejectsBadInputs) {
  double x = 0.0, y = 0.0;
  std::vector<double> two(2);
  OptimizerState s;
  EXPECT_THROW(adadelta_step(scalar_ref(x), {{"x", {2}, two}}, s, 0.95, 1e-6), DimensionError);
  EXPECT_THROW(adadelta_step(scalar_ref(x), scalar_ref(y), s, 1.0, 1e-6), InvalidArgument);
  EXPECT_THROW(adadelta_step(scalar_ref(x), scalar_ref(y), s, 0.95, 0.0), InvalidArgument);
}

TEST(Clipping, ScalesToMaxNorm) {
  std::vector<double> g{3.0, 4.0};
  std::vector<TensorRef> refs{{"g", {2}, g}};
  EXPECT_DOUBLE_EQ(clip_gradients(refs, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  EXPECT_NEAR(clip_gradients(refs, 0.0), 1.0, 1e-15);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
}

TEST(Sgd, Step) {
  double x = 1.0, g = 2.0;
  sgd_step(scalar_ref(x), scalar_ref(g), 0.25);
  EXPECT_DOUBLE_EQ(x, 0.5);
}

Cohort tiny_cohort(std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n_patients = 20;
  cfg.n_codes = 12;
  cfg.n_hidden_states = 4;
  cfg.mean_visits = 8;
  cfg.mean_codes_per_visit = 2;
  cfg.seed = seed;
  return generate_synthetic_cohort(cfg);
}

TrainingConfig tiny_config() {
  TrainingConfig c;
  c.epochs = 20;
  c.embedding_dim = 6;
  c.hidden = 8;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

TEST(Train, LossDecreases) {
  const Cohort cohort = tiny_cohort(1);
  const auto result = train(cohort, tiny_config());
  ASSERT_EQ(result.history.size(), 20u);
  EXPECT_LT(result.history.back().mean_loss, result.history.front().mean_loss);
  EXPECT_EQ(result.epochs_completed, 20u);
}

TEST(Train, DeterministicForFixedSeed) {
  const Cohort cohort = tiny_cohort(2);
  auto cfg = tiny_config();
  cfg.epochs = 3;
  cfg.dropout = 0.5;
  cfg.batch_size = 4;
  const auto a = train(cohort, cfg);
  const auto b = train(cohort, cfg);
  EXPECT_EQ(a.params, b.params);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].mean_loss, b.history[e].mean_loss);
  cfg.seed = 4;
  EXPECT_NE(a.params, train(cohort, cfg).params);
}

TEST(Train, SgdFallbackRuns) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  cfg.optimizer = OptimizerKind::sgd;
  cfg.learning_rate = 0.05;
  const auto result = train(cohort, cfg);
  EXPECT_LT(result.history.back().mean_loss, result.history.front().mean_loss);
}

TEST(Train, RejectsBadConfig) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  cfg.epochs = 0;
  EXPECT_THROW(train(cohort, cfg), InvalidArgument);
  cfg = tiny_config();
  cfg.dropout = 1.0;
  EXPECT_THROW(train(cohort, cfg), InvalidArgument);
  cfg = tiny_config();
  cfg.l2 = -1.0;
  EXPECT_THROW(train(cohort, cfg), InvalidArgument);
}

TEST(Train, DivergenceNamesEpochAndPatient) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  Rng rng(1);
  GruNetworkParams params = init_network(network_shape(cfg, cohort.vocab.size()), rng);
  params.b_code[0] = std::nan("");
  try {
    train_from(params, cohort, cfg, rng);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("patient"), std::string::npos) << msg;
  }
}

TEST(Train, ValidationHistoryAndCsv) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  cfg.epochs = 4;
  cfg.eval_every = 2;
  std::size_t calls = 0;
  const auto result = train(cohort, cfg, &cohort, nullptr, [&](const EpochRecord&, const GruNetworkParams&) { ++calls; });
  EXPECT_EQ(calls, 4u);
  EXPECT_FALSE(result.history[0].validation.has_value());
  ASSERT_TRUE(result.history[1].validation.has_value());
  EXPECT_TRUE(result.history[3].validation.has_value());
  const std::string csv = history_csv(result.history);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,mean_loss,recall@10,recall@20,recall@30,r2");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Train, SkipgramTableInitializesEmbedding) {
  const Cohort cohort = tiny_cohort(1);
  SkipgramConfig sg;
  sg.dim = 6;
  sg.epochs = 1;
  const EmbeddingTable table = train_skipgram(cohort, sg);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  EXPECT_THROW(train(cohort, cfg, nullptr, &table), InvalidArgument);
  cfg.embedding_mode = EmbeddingMode::skipgram;
  const auto result = train(cohort, cfg, nullptr, &table);
  EXPECT_EQ(result.params.embedding_mode, EmbeddingMode::skipgram);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  cfg.epochs = 2;
  auto result = train(cohort, cfg);
  Checkpoint ck = make_checkpoint(result.params, cohort.vocab, cfg, &result.optimizer, &result.rng, 2);
  const auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(ck, p1);
  const Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  EXPECT_EQ(io::read_file(p1), io::read_file(p2));
  EXPECT_EQ(loaded.vocab, cohort.vocab);
  EXPECT_EQ(training_config_from_json(loaded.config), cfg);
  EXPECT_EQ(*loaded.optimizer, result.optimizer);
  EXPECT_EQ(Rng::deserialize(loaded.rng_state), result.rng);

  const GruNetworkParams back = network_from_checkpoint(loaded);
  EXPECT_EQ(back, result.params);
  Rng r1(0), r2(0);
  for (const auto& seq : cohort.patients) {
    const auto a = forward_patient(seq, result.params, 0.0, false, r1);
    const auto b = forward_patient(seq, back, 0.0, false, r2);
    for (std::size_t i = 0; i < a.predictions.size(); ++i) {
      EXPECT_EQ(a.predictions[i].y_hat, b.predictions[i].y_hat);
      EXPECT_EQ(a.predictions[i].log_gap, b.predictions[i].log_gap);
    }
  }
}

TEST(Checkpoint, RejectsBadFiles) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  Rng rng(1);
  GruNetworkParams params = init_network(network_shape(cfg, cohort.vocab.size()), rng);
  const std::string text = serialize_checkpoint(make_checkpoint(params, cohort.vocab, cfg));
  auto j = nlohmann::json::parse(text);
  j["version"] = 999;
  EXPECT_THROW(parse_checkpoint(j.dump()), UnsupportedVersionError);
  EXPECT_THROW(parse_checkpoint(text.substr(0, text.size() / 2)), CorruptionError);
  j = nlohmann::json::parse(text);
  j["tensors"]["W_code"]["data"] = "AAAA";
  EXPECT_THROW(parse_checkpoint(j.dump()), CorruptionError);
  EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt")), Error);
}

TEST(FineTune, IdentityMappingZeroEpochsReturnsSource) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  cfg.epochs = 2;
  const auto source = train(cohort, cfg);
  const VocabMapping mapping = map_vocabulary(cohort.vocab, cohort.vocab);
  auto zero = cfg;
  zero.epochs = 0;
  const auto tuned = fine_tune(source.params, cohort, mapping, zero);
  EXPECT_EQ(tuned.params, source.params);
  // With one epoch the first recorded loss is the source model's loss under
  // training-time dropout; with dropout 0 it is a pure function of the params.
  Rng unused(0);
  double expected = 0.0;
  for (const auto& seq : cohort.patients) {
    const auto fwd = forward_patient(seq, source.params, 0.0, false, unused);
    expected += joint_loss(fwd.predictions, seq, cfg.l2, source.params);
  }
  auto one = cfg;
  one.epochs = 1;
  one.batch_size = cohort.size();
  const auto first = fine_tune(source.params, cohort, mapping, one);
  EXPECT_NEAR(first.history[0].mean_loss, expected / static_cast<double>(cohort.size()), 1e-12);
}

TEST(FineTune, SmallerTargetShrinksHead) {
  const Cohort cohort = tiny_cohort(1);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto source = train(cohort, cfg);
  // Target cohort built from patients restricted to a subset of codes.
  std::vector<PatientSequence> patients;
  patients.push_back(testing::make_patient("t1", {1, 5, 9}, {{0}, {1}, {0}}));
  patients.push_back(testing::make_patient("t2", {1, 5}, {{1}, {0}}));
  for (auto& p : patients)
    for (std::size_t i = 0; i < p.length(); ++i)
      for (std::size_t c = 0; c < p.codes[i].size(); ++c) p.visits[i].codes[c] = cohort.vocab.code(p.codes[i][c] + 3);
  const Cohort target = make_cohort(patients);
  ASSERT_EQ(target.vocab.size(), 2u);
  const VocabMapping mapping = map_vocabulary(cohort.vocab, target.vocab);
  const GruNetworkParams moved = transfer_parameters(source.params, mapping);
  EXPECT_EQ(moved.input_codes(), 2u);
  EXPECT_EQ(moved.output_codes(), 2u);
  EXPECT_EQ(moved.layers, source.params.layers);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(moved.b_code[i], source.params.b_code[mapping[i]]);
    for (std::size_t h = 0; h < moved.hidden(); ++h) EXPECT_EQ(moved.W_code(h, i), source.params.W_code(h, mapping[i]));
    for (std::size_t d = 0; d < moved.embedding(); ++d) EXPECT_EQ(moved.W_emb(i, d), source.params.W_emb(mapping[i], d));
  }
  const auto tuned = fine_tune(source.params, target, mapping, cfg);
  EXPECT_EQ(tuned.params.output_codes(), 2u);
}

TEST(FineTune, UnmappedCodeNamesTheCode) {
  CodeVocabulary source(std::vector<std::string>{"401", "250"});
  CodeVocabulary target(std::vector<std::string>{"250", "V58"});
  try {
    map_vocabulary(source, target);
    FAIL() << "expected MappingError";
  } catch (const MappingError& e) {
    EXPECT_NE(std::string(e.what()).find("V58"), std::string::npos);
  }
}

}  // namespace
}  // namespace doctorai
