#pragma once

// Command-line driver. One pipeline stage per invocation:
//   generate, pretrain-embeddings, train, evaluate, predict, probe, transfer, baselines
// Exit status: 0 success, 2 usage error, 1 runtime error.

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "doctorai/baselines.hpp"
#include "doctorai/errors.hpp"
#include "doctorai/io.hpp"
#include "doctorai/metrics.hpp"
#include "doctorai/optim.hpp"
#include "doctorai/skipgram.hpp"
#include "doctorai/synthetic.hpp"
#include "doctorai/vocab.hpp"

namespace doctorai::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::string fmt(double x) {
  std::ostringstream s;
  s.precision(6);
  s << x;
  return s.str();
}

inline fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out += suffix;
  return out;
}

// Explicit --vocab wins, then the cohort's sidecar; otherwise the vocabulary
// is built from the cohort itself.
inline std::optional<CodeVocabulary> resolve_vocab(const std::string& vocab_flag, const fs::path& cohort) {
  if (!vocab_flag.empty()) return load_vocabulary(vocab_flag);
  const fs::path side = vocabulary_sidecar(cohort);
  if (fs::exists(side)) return load_vocabulary(side);
  return std::nullopt;
}

inline Cohort load_with_vocab(const fs::path& cohort, const std::string& vocab_flag) {
  const auto vocab = resolve_vocab(vocab_flag, cohort);
  return load_cohort(cohort, vocab ? &*vocab : nullptr);
}

// A checkpoint of any kind with a uniform Predictor view.
struct LoadedModel {
  Checkpoint ck;
  std::optional<GruNetworkParams> gru;
  std::optional<LinearModelParams> logistic;
  std::optional<MlpParams> mlp;
  LagConfig lag;

  explicit LoadedModel(const fs::path& path) : ck(load_checkpoint(path)) {
    switch (ck.kind) {
      case ModelKind::gru:
        gru = network_from_checkpoint(ck);
        break;
      case ModelKind::logistic:
        logistic = logistic_from_checkpoint(ck);
        lag = lag_from_checkpoint(ck);
        break;
      case ModelKind::mlp:
        mlp = mlp_from_checkpoint(ck);
        lag = lag_from_checkpoint(ck);
        break;
    }
  }

  template <typename F>
  decltype(auto) visit(F&& f) const {
    if (gru) return f(GruPredictor(*gru));
    if (logistic) return f(LogisticPredictor{&*logistic, lag});
    return f(MlpPredictor{&*mlp, lag});
  }
};

inline std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    long long k = 0;
    try {
      k = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || k < 1) throw InvalidArgument("--ks: expected comma-separated positive integers, got '" + text + "'");
    ks.push_back(static_cast<std::size_t>(k));
  }
  if (ks.empty()) throw InvalidArgument("--ks: empty list");
  return ks;
}

inline std::string report_json(const MetricReport& r) { return r.to_json().dump(2) + "\n"; }

}  // namespace detail

// Flag values, filled by CLI11 before the chosen handler runs.
struct Options {
  std::uint64_t seed = 0;
  std::string out;
  std::string cohort;
  std::string vocab;

  // generate
  SyntheticConfig synthetic;
  std::string test_out;
  double test_fraction = 0.15;

  // pretrain-embeddings
  SkipgramConfig skipgram;

  // train / transfer
  TrainingConfig training;
  std::string embedding = "learned";
  std::string skipgram_file;
  std::string validation;
  std::string optimizer = "adadelta";

  // evaluate / predict / probe
  std::string model;
  std::string ks = "10,20,30";
  std::string curve_out;
  std::size_t min_visits = 40;
  std::size_t curve_k = 10;
  std::string patient;
  std::size_t top = 30;
  std::string code;
  std::size_t repeats = 200;
  std::int64_t gap_days = kProbeGapDays;

  // transfer
  std::string source_model;
  std::string target_cohort;

  // baselines
  std::string test_cohort;
  std::size_t lag = 5;
  std::size_t mlp_hidden = 128;
  TrainingConfig baseline_training = [] {
    TrainingConfig c;
    c.batch_size = 32;  // one-example updates are unstable for the MLP
    return c;
  }();
};

namespace stage {

inline int generate(Options& o, std::ostream& out) {
  o.synthetic.seed = o.seed;
  validate(o.synthetic);
  if (!o.test_out.empty() && !(o.test_fraction > 0.0 && o.test_fraction < 1.0))
    throw InvalidArgument("--test-fraction must lie in (0, 1)");
  Cohort cohort = generate_synthetic_cohort(o.synthetic);
  if (o.test_out.empty()) {
    save_cohort(cohort, o.out);
    out << "generate: " << cohort.size() << " patients, " << cohort.vocab.size() << " codes -> " << o.out << ", "
        << vocabulary_sidecar(o.out).string() << "\n";
    return kExitOk;
  }
  auto [train, test] = split_dataset(cohort, 1.0 - o.test_fraction, o.seed);
  save_cohort(train, o.out);
  save_cohort(test, o.test_out);
  out << "generate: " << train.size() << " train / " << test.size() << " test patients, " << cohort.vocab.size()
      << " codes -> " << o.out << ", " << vocabulary_sidecar(o.out).string() << ", " << o.test_out << ", "
      << vocabulary_sidecar(o.test_out).string() << "\n";
  return kExitOk;
}

inline int pretrain_embeddings(Options& o, std::ostream& out) {
  o.skipgram.seed = o.seed;
  validate(o.skipgram);
  const Cohort cohort = detail::load_with_vocab(o.cohort, o.vocab);
  std::vector<double> losses;
  const EmbeddingTable table = train_skipgram(cohort, o.skipgram, &losses);
  save_embeddings(table, o.out);
  out << "pretrain-embeddings: " << table.codes.size() << " codes x " << o.skipgram.dim << ", final loss "
      << detail::fmt(losses.empty() ? 0.0 : losses.back()) << " -> " << o.out << "\n";
  return kExitOk;
}

inline void finish_training_config(Options& o) {
  o.training.seed = o.seed;
  o.training.embedding_mode = parse_embedding_mode(o.embedding);
  o.training.optimizer = parse_optimizer_kind(o.optimizer);
}

inline void write_training_outputs(const fs::path& path, Checkpoint ck, const TrainingResult& r, std::ostream& out,
                                   const char* stage) {
  const fs::path history = detail::with_suffix(path, ".history.csv");
  save_checkpoint(ck, path);
  io::write_file_atomic(history, history_csv(r.history));
  out << stage << ": " << r.epochs_completed << " epochs, final loss "
      << detail::fmt(r.history.empty() ? 0.0 : r.history.back().mean_loss) << " -> " << path.string() << ", "
      << history.string() << "\n";
}

inline int train(Options& o, std::ostream& out) {
  finish_training_config(o);
  validate(o.training);
  if (!o.skipgram_file.empty() && o.training.embedding_mode != EmbeddingMode::skipgram)
    throw InvalidArgument("--skipgram-file requires --embedding skipgram");
  const Cohort cohort = detail::load_with_vocab(o.cohort, o.vocab);
  std::optional<Cohort> validation;
  if (!o.validation.empty()) validation = load_cohort(o.validation, &cohort.vocab);
  std::optional<EmbeddingTable> table;
  if (!o.skipgram_file.empty()) {
    table = load_embeddings(o.skipgram_file);
    o.training.embedding_dim = table->vectors.cols();
  }
  TrainingResult r = doctorai::train(cohort, o.training, validation ? &*validation : nullptr, table ? &*table : nullptr);
  write_training_outputs(o.out, make_checkpoint(r.params, cohort.vocab, o.training, &r.optimizer, &r.rng, r.epochs_completed),
                         r, out, "train");
  return kExitOk;
}

inline int evaluate(Options& o, std::ostream& out) {
  const auto ks = detail::parse_ks(o.ks);
  if (o.curve_k < 1) throw InvalidArgument("--curve-k must be at least 1");
  const detail::LoadedModel model(o.model);
  const Cohort cohort = load_cohort(o.cohort, &model.ck.vocab);
  const MetricReport report = model.visit([&](const auto& m) { return evaluate_model(m, cohort, ks); });
  std::optional<std::vector<CurvePoint>> curve;
  if (!o.curve_out.empty())
    curve = model.visit([&](const auto& m) { return recall_by_history_length(m, cohort, o.min_visits, o.curve_k); });
  io::write_file_atomic(o.out, detail::report_json(report));
  out << "evaluate: " << report.patients << " patients, " << report.visits << " visits";
  for (std::size_t i = 0; i < ks.size(); ++i) out << ", recall@" << ks[i] << " " << detail::fmt(report.recall[i]);
  out << ", r2 " << (report.r2 ? detail::fmt(*report.r2) : std::string("n/a")) << " -> " << o.out;
  if (curve) {
    io::write_file_atomic(o.curve_out, curve_csv(*curve));
    out << ", " << o.curve_out;
  }
  out << "\n";
  return kExitOk;
}

// Ranks codes for the visit following the patient's last one.
inline int predict(Options& o, std::ostream& out) {
  if (o.top < 1) throw InvalidArgument("--top must be at least 1");
  const detail::LoadedModel model(o.model);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(o.patient));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("patient file: ") + e.what());
  }
  if (!j.is_object() || !j.contains("visits") || !j["visits"].is_array() || j["visits"].empty())
    throw ParseError("patient file: expected an object with a nonempty visits array");
  // A placeholder visit after the last one lets every model emit its
  // prediction for that position; predictions never look ahead.
  std::int64_t last_t = std::numeric_limits<std::int64_t>::min();
  for (const auto& v : j["visits"]) {
    if (!v.is_object() || !v.contains("t") || !v["t"].is_number_integer()) throw ParseError("patient file: visit t must be an integer");
    last_t = std::max(last_t, v["t"].get<std::int64_t>());
  }
  if (!j.contains("pid")) j["pid"] = "patient";
  j["visits"].push_back({{"t", last_t + 1}, {"codes", j["visits"].back().at("codes")}});
  const Cohort one = parse_cohort(j.dump(), &model.ck.vocab);
  const PatientSequence& seq = one.patients.front();
  const auto rankings = model.visit([&](const auto& m) { return m(seq); });
  const PredictionRanking& r = rankings.back();
  nlohmann::json result;
  result["pid"] = seq.patient_id;
  result["after_t"] = last_t;
  result["codes"] = nlohmann::json::array();
  for (auto c : r.top_k(o.top)) result["codes"].push_back({{"code", model.ck.vocab.code(c)}, {"score", r.scores[c]}});
  if (r.log_gap) {
    result["log_gap"] = *r.log_gap;
    result["gap_days"] = std::expm1(*r.log_gap);
  } else {
    result["log_gap"] = nullptr;
    result["gap_days"] = nullptr;
  }
  io::write_file_atomic(o.out, result.dump(2) + "\n");
  out << "predict: " << seq.patient_id << ", top code " << model.ck.vocab.code(r.top_k(1).front()) << " -> " << o.out << "\n";
  return kExitOk;
}

inline int probe(Options& o, std::ostream& out) {
  const detail::LoadedModel model(o.model);
  const auto curve =
      model.visit([&](const auto& m) { return perplexity_probe(m, model.ck.vocab, o.code, o.repeats, o.gap_days); });
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,perplexity\n";
  for (std::size_t i = 0; i < curve.size(); ++i) csv << i + 1 << ',' << curve[i] << '\n';
  io::write_file_atomic(o.out, csv.str());
  out << "probe: code " << o.code << ", " << curve.size() << " steps, final perplexity " << detail::fmt(curve.back())
      << " -> " << o.out << "\n";
  return kExitOk;
}

inline int transfer(Options& o, std::ostream& out) {
  finish_training_config(o);
  validate(o.training, true);
  const detail::LoadedModel source(o.source_model);
  if (!source.gru) throw InvalidArgument("--source-model must hold a GRU network");
  const Cohort target = detail::load_with_vocab(o.target_cohort, o.vocab);
  const VocabMapping mapping = map_vocabulary(source.ck.vocab, target.vocab);
  std::optional<Cohort> validation;
  if (!o.validation.empty()) validation = load_cohort(o.validation, &target.vocab);
  TrainingResult r = fine_tune(*source.gru, target, mapping, o.training, validation ? &*validation : nullptr);
  TrainingConfig stored = o.training;
  stored.embedding_mode = r.params.embedding_mode;
  stored.embedding_dim = r.params.embedding();
  stored.hidden = r.params.hidden();
  stored.layers = r.params.layers.size();
  write_training_outputs(o.out, make_checkpoint(r.params, target.vocab, stored, &r.optimizer, &r.rng, r.epochs_completed),
                         r, out, "transfer");
  return kExitOk;
}

// Trains the logistic and MLP baselines, then scores all four on the test cohort.
inline int baselines(Options& o, std::ostream& out) {
  const auto ks = detail::parse_ks(o.ks);
  o.baseline_training.seed = o.seed;
  o.baseline_training.optimizer = parse_optimizer_kind(o.optimizer);
  validate(o.baseline_training);
  if (o.lag < 1) throw InvalidArgument("--lag must be at least 1");
  if (o.mlp_hidden < 1) throw InvalidArgument("--mlp-hidden must be at least 1");
  const Cohort train_set = detail::load_with_vocab(o.cohort, o.vocab);
  const Cohort test_set = load_cohort(o.test_cohort, &train_set.vocab);
  const std::size_t p = train_set.vocab.size();
  const LagConfig lag{o.lag};
  const auto examples = lag_examples(train_set, lag);
  auto logistic = train_logistic(examples, p, o.baseline_training);
  auto mlp = train_mlp(examples, p, MlpConfig{o.mlp_hidden}, o.baseline_training);

  nlohmann::json report;
  report["last_visit"] = evaluate_model(LastVisitPredictor{p}, test_set, ks).to_json();
  report["most_frequent"] = evaluate_model(MostFrequentPredictor{p}, test_set, ks).to_json();
  report["logistic"] = evaluate_model(LogisticPredictor{&logistic.params, lag}, test_set, ks).to_json();
  report["mlp"] = evaluate_model(MlpPredictor{&mlp.params, lag}, test_set, ks).to_json();

  const fs::path dir = o.out;
  fs::create_directories(dir);
  save_checkpoint(make_checkpoint(logistic.params, train_set.vocab, lag, o.baseline_training), dir / "logistic.ckpt");
  save_checkpoint(make_checkpoint(mlp.params, train_set.vocab, lag, o.baseline_training), dir / "mlp.ckpt");
  io::write_file_atomic(dir / "baselines.json", report.dump(2) + "\n");
  const std::string key = "recall@" + std::to_string(ks.front());
  out << "baselines: " << key << " last-visit " << detail::fmt(report["last_visit"]["recall"][key].get<double>())
      << ", most-frequent " << detail::fmt(report["most_frequent"]["recall"][key].get<double>()) << ", logistic "
      << detail::fmt(report["logistic"]["recall"][key].get<double>()) << ", mlp "
      << detail::fmt(report["mlp"]["recall"][key].get<double>()) << " -> " << (dir / "baselines.json").string() << ", "
      << (dir / "logistic.ckpt").string() << ", " << (dir / "mlp.ckpt").string() << "\n";
  return kExitOk;
}

}  // namespace stage

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Next-visit diagnosis and timing prediction", "doctorai"};
  app.require_subcommand(1);
  Options o;

  auto seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Seed for all randomness in this run"); };
  auto cohort = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--cohort", o.cohort, "Cohort JSON Lines file")->check(CLI::ExistingFile);
    if (required) opt->required();
    c->add_option("--vocab", o.vocab, "Vocabulary JSON (default: the cohort's sidecar)")->check(CLI::ExistingFile);
  };
  auto training = [&](CLI::App* c) {
    c->add_option("--epochs", o.training.epochs, "Training epochs")->capture_default_str();
    c->add_option("--batch", o.training.batch_size, "Patients per update")->capture_default_str();
    c->add_option("--dropout", o.training.dropout, "Dropout rate between layers")->capture_default_str();
    c->add_option("--l2", o.training.l2, "L2 strength on the output weights")->capture_default_str();
    c->add_option("--optimizer", o.optimizer, "adadelta or sgd")->check(CLI::IsMember({"adadelta", "sgd"}))->capture_default_str();
    c->add_option("--learning-rate", o.training.learning_rate, "SGD step size")->capture_default_str();
    c->add_option("--clip", o.training.clip_norm, "Global gradient norm limit, 0 disables")->capture_default_str();
    c->add_option("--validation", o.validation, "Cohort scored after each evaluated epoch")->check(CLI::ExistingFile);
    c->add_option("--eval-every", o.training.eval_every, "Validation period in epochs")->capture_default_str();
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic cohort and its vocabulary");
  gen->add_option("--patients", o.synthetic.n_patients)->capture_default_str();
  gen->add_option("--codes", o.synthetic.n_codes)->capture_default_str();
  gen->add_option("--states", o.synthetic.n_hidden_states, "Hidden states")->capture_default_str();
  gen->add_option("--mean-visits", o.synthetic.mean_visits)->capture_default_str();
  gen->add_option("--mean-codes", o.synthetic.mean_codes_per_visit)->capture_default_str();
  gen->add_option("--mean-gap", o.synthetic.mean_gap_days, "Mean days between visits")->capture_default_str();
  gen->add_option("--process-seed", o.synthetic.process_seed, "Seed of the shared hidden process (default: --seed)");
  gen->add_option("--id-prefix", o.synthetic.id_prefix)->capture_default_str();
  gen->add_option("--test-out", o.test_out, "Also split off a test cohort to this path");
  gen->add_option("--test-fraction", o.test_fraction)->capture_default_str();
  gen->add_option("--out", o.out, "Cohort path")->required();
  seed(gen);

  auto* pre = app.add_subcommand("pretrain-embeddings", "Train skip-gram code embeddings");
  cohort(pre, true);
  pre->add_option("--dim", o.skipgram.dim)->capture_default_str();
  pre->add_option("--window", o.skipgram.window)->capture_default_str();
  pre->add_option("--epochs", o.skipgram.epochs)->capture_default_str();
  pre->add_option("--negative", o.skipgram.negative_samples)->capture_default_str();
  pre->add_option("--learning-rate", o.skipgram.learning_rate)->capture_default_str();
  pre->add_option("--out", o.out, "Embedding file")->required();
  seed(pre);

  auto* tr = app.add_subcommand("train", "Train the recurrent model");
  cohort(tr, true);
  training(tr);
  tr->add_option("--hidden", o.training.hidden)->capture_default_str();
  tr->add_option("--layers", o.training.layers)->check(CLI::IsMember({1, 2}))->capture_default_str();
  tr->add_option("--embedding", o.embedding)->check(CLI::IsMember({"learned", "skipgram"}))->capture_default_str();
  tr->add_option("--embedding-dim", o.training.embedding_dim)->capture_default_str();
  tr->add_option("--skipgram-file", o.skipgram_file, "Pretrained embeddings")->check(CLI::ExistingFile);
  tr->add_option("--out", o.out, "Checkpoint path; history goes to <out>.history.csv")->required();
  seed(tr);

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a cohort");
  ev->add_option("--model", o.model)->required()->check(CLI::ExistingFile);
  cohort(ev, true);
  ev->add_option("--ks", o.ks, "Comma-separated k values")->capture_default_str();
  ev->add_option("--curve-out", o.curve_out, "Recall by history length CSV");
  ev->add_option("--min-visits", o.min_visits, "Patients needed for the curve")->capture_default_str();
  ev->add_option("--curve-k", o.curve_k)->capture_default_str();
  ev->add_option("--out", o.out, "Report JSON")->required();
  seed(ev);

  auto* pr = app.add_subcommand("predict", "Rank codes for a patient's next visit");
  pr->add_option("--model", o.model)->required()->check(CLI::ExistingFile);
  pr->add_option("--patient", o.patient, "JSON object {pid, visits}")->required()->check(CLI::ExistingFile);
  pr->add_option("--top", o.top)->capture_default_str();
  pr->add_option("--out", o.out, "Prediction JSON")->required();
  seed(pr);

  auto* pb = app.add_subcommand("probe", "Perplexity of repeated single-code visits");
  pb->add_option("--model", o.model)->required()->check(CLI::ExistingFile);
  pb->add_option("--code", o.code)->required();
  pb->add_option("--repeats", o.repeats)->capture_default_str();
  pb->add_option("--gap", o.gap_days, "Days between probe visits")->capture_default_str();
  pb->add_option("--out", o.out, "Curve CSV")->required();
  seed(pb);

  auto* tf = app.add_subcommand("transfer", "Fine-tune a trained network on another cohort");
  tf->add_option("--source-model", o.source_model)->required()->check(CLI::ExistingFile);
  tf->add_option("--target-cohort", o.target_cohort)->required()->check(CLI::ExistingFile);
  tf->add_option("--vocab", o.vocab, "Target vocabulary JSON (default: the cohort's sidecar)")->check(CLI::ExistingFile);
  training(tf);
  tf->add_option("--out", o.out, "Checkpoint path; history goes to <out>.history.csv")->required();
  seed(tf);

  auto* bl = app.add_subcommand("baselines", "Train and score the four baselines");
  cohort(bl, true);
  bl->add_option("--test-cohort", o.test_cohort)->required()->check(CLI::ExistingFile);
  bl->add_option("--ks", o.ks)->capture_default_str();
  bl->add_option("--lag", o.lag, "Visits summed into the features")->capture_default_str();
  bl->add_option("--mlp-hidden", o.mlp_hidden)->capture_default_str();
  bl->add_option("--epochs", o.baseline_training.epochs)->capture_default_str();
  bl->add_option("--batch", o.baseline_training.batch_size)->capture_default_str();
  bl->add_option("--l2", o.baseline_training.l2)->capture_default_str();
  bl->add_option("--optimizer", o.optimizer)->check(CLI::IsMember({"adadelta", "sgd"}))->capture_default_str();
  bl->add_option("--learning-rate", o.baseline_training.learning_rate)->capture_default_str();
  bl->add_option("--out", o.out, "Output directory")->required();
  seed(bl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "doctorai: " << e.what() << "\n" << "run 'doctorai --help' for usage\n";
    return kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  if (chosen->count("--help")) return kExitOk;
  try {
    if (name == "generate") return stage::generate(o, out);
    if (name == "pretrain-embeddings") return stage::pretrain_embeddings(o, out);
    if (name == "train") return stage::train(o, out);
    if (name == "evaluate") return stage::evaluate(o, out);
    if (name == "predict") return stage::predict(o, out);
    if (name == "probe") return stage::probe(o, out);
    if (name == "transfer") return stage::transfer(o, out);
    return stage::baselines(o, out);
  } catch (const std::exception& e) {
    err << "doctorai " << name << ": " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace doctorai::cli
