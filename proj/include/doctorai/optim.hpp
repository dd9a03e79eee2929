#pragma once

// Adadelta (with a plain SGD fallback), gradient clipping, the epoch loop,
// checkpoint persistence and fine-tuning through a vocabulary mapping.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/gru.hpp"
#include "doctorai/io.hpp"
#include "doctorai/metrics.hpp"
#include "doctorai/skipgram.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"
#include "json.hpp"

namespace doctorai {

enum class OptimizerKind { adadelta, sgd };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adadelta ? "adadelta" : "sgd"; }

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adadelta") return OptimizerKind::adadelta;
  if (s == "sgd") return OptimizerKind::sgd;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

struct TrainingConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 1;
  double dropout = 0.5;
  double l2 = 0.001;
  OptimizerKind optimizer = OptimizerKind::adadelta;
  double rho = 0.95;
  double epsilon = 1e-6;
  double learning_rate = 0.1;  // sgd only
  double clip_norm = 5.0;      // 0 disables clipping
  std::uint64_t seed = 0;
  EmbeddingMode embedding_mode = EmbeddingMode::learned;
  std::size_t embedding_dim = 100;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  std::size_t eval_every = 0;  // 0: never evaluate during training

  bool operator==(const TrainingConfig&) const = default;
};

inline void validate(const TrainingConfig& c, bool allow_zero_epochs = false) {
  if (c.epochs < 1 && !allow_zero_epochs) throw InvalidArgument("TrainingConfig: epochs must be at least 1");
  if (c.batch_size < 1) throw InvalidArgument("TrainingConfig: batch_size must be at least 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw InvalidArgument("TrainingConfig: dropout must be in [0, 1)");
  if (!(c.l2 >= 0.0)) throw InvalidArgument("TrainingConfig: l2 must be nonnegative");
  if (!(c.rho > 0.0 && c.rho < 1.0)) throw InvalidArgument("TrainingConfig: rho must be in (0, 1)");
  if (!(c.epsilon > 0.0)) throw InvalidArgument("TrainingConfig: epsilon must be positive");
  if (!(c.learning_rate > 0.0)) throw InvalidArgument("TrainingConfig: learning_rate must be positive");
  if (!(c.clip_norm >= 0.0)) throw InvalidArgument("TrainingConfig: clip_norm must be nonnegative");
  if (c.embedding_dim < 1 || c.hidden < 1) throw InvalidArgument("TrainingConfig: embedding_dim and hidden must be at least 1");
  if (c.layers < 1) throw InvalidArgument("TrainingConfig: layers must be at least 1");
}

inline nlohmann::json to_json(const TrainingConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"dropout", c.dropout},
          {"l2", c.l2},
          {"optimizer", to_string(c.optimizer)},
          {"rho", c.rho},
          {"epsilon", c.epsilon},
          {"learning_rate", c.learning_rate},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed},
          {"embedding_mode", to_string(c.embedding_mode)},
          {"embedding_dim", c.embedding_dim},
          {"hidden", c.hidden},
          {"layers", c.layers},
          {"eval_every", c.eval_every}};
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig c;
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.l2 = j.at("l2").get<double>();
  c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
  c.rho = j.at("rho").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.embedding_mode = parse_embedding_mode(j.at("embedding_mode").get<std::string>());
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.eval_every = j.at("eval_every").get<std::size_t>();
  return c;
}

// Running averages of squared gradients and squared updates, one flat array
// per parameter tensor.
struct OptimizerState {
  std::vector<std::vector<double>> mean_sq_grad;
  std::vector<std::vector<double>> mean_sq_update;
  std::uint64_t steps = 0;

  bool operator==(const OptimizerState&) const = default;
};

inline OptimizerState make_optimizer_state(const std::vector<TensorRef>& params) {
  OptimizerState s;
  for (const auto& t : params) {
    s.mean_sq_grad.emplace_back(t.data.size(), 0.0);
    s.mean_sq_update.emplace_back(t.data.size(), 0.0);
  }
  return s;
}

namespace detail {

inline void check_conform(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads) {
  if (params.size() != grads.size()) throw DimensionError("optimizer: parameter and gradient lists differ in length");
  for (std::size_t t = 0; t < params.size(); ++t)
    if (params[t].data.size() != grads[t].data.size())
      throw DimensionError("optimizer: gradient for " + params[t].name + " has the wrong size");
}

}  // namespace detail

inline void adadelta_step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads,
                          OptimizerState& state, double rho, double epsilon) {
  detail::check_conform(params, grads);
  if (!(rho > 0.0 && rho < 1.0)) throw InvalidArgument("adadelta: rho must be in (0, 1)");
  if (!(epsilon > 0.0)) throw InvalidArgument("adadelta: epsilon must be positive");
  if (state.mean_sq_grad.size() != params.size()) state = make_optimizer_state(params);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& eg = state.mean_sq_grad[t];
    auto& ed = state.mean_sq_update[t];
    if (eg.size() != params[t].data.size()) throw DimensionError("adadelta: state does not match " + params[t].name);
    const auto p = params[t].data;
    const auto g = grads[t].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      eg[k] = rho * eg[k] + (1.0 - rho) * g[k] * g[k];
      const double delta = -std::sqrt(ed[k] + epsilon) / std::sqrt(eg[k] + epsilon) * g[k];
      ed[k] = rho * ed[k] + (1.0 - rho) * delta * delta;
      p[k] += delta;
    }
  }
  ++state.steps;
}

inline void sgd_step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads, double learning_rate) {
  detail::check_conform(params, grads);
  for (std::size_t t = 0; t < params.size(); ++t)
    for (std::size_t k = 0; k < params[t].data.size(); ++k) params[t].data[k] -= learning_rate * grads[t].data[k];
}

inline double global_norm(const std::vector<TensorRef>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.data) sq += x * x;
  return std::sqrt(sq);
}

// Rescales all gradients together when their global norm exceeds max_norm.
// Returns the norm before clipping.
inline double clip_gradients(const std::vector<TensorRef>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& g : grads)
      for (double& x : g.data) x *= scale;
  }
  return norm;
}

inline void apply_update(const TrainingConfig& config, const std::vector<TensorRef>& params,
                         const std::vector<TensorRef>& grads, OptimizerState& state) {
  clip_gradients(grads, config.clip_norm);
  if (config.optimizer == OptimizerKind::adadelta)
    adadelta_step(params, grads, state, config.rho, config.epsilon);
  else
    sgd_step(params, grads, config.learning_rate);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  std::optional<MetricReport> validation;
};

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mean_loss,recall@10,recall@20,recall@30,r2\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.mean_loss;
    for (std::size_t k : {10u, 20u, 30u}) {
      out << ',';
      if (r.validation)
        for (std::size_t q = 0; q < r.validation->ks.size(); ++q)
          if (r.validation->ks[q] == k) out << r.validation->recall[q];
    }
    out << ',';
    if (r.validation && r.validation->r2) out << *r.validation->r2;
    out << '\n';
  }
  return out.str();
}

struct TrainingResult {
  GruNetworkParams params;
  std::vector<EpochRecord> history;
  OptimizerState optimizer;
  Rng rng;
  std::size_t epochs_completed = 0;
};

using EpochCallback = std::function<void(const EpochRecord&, const GruNetworkParams&)>;

inline NetworkShape network_shape(const TrainingConfig& config, std::size_t p) {
  return {p, p, config.embedding_dim, config.hidden, config.layers, config.embedding_mode};
}

namespace detail {

inline void add_into(std::vector<TensorRef> acc, const std::vector<TensorRef>& g) {
  for (std::size_t t = 0; t < acc.size(); ++t)
    for (std::size_t k = 0; k < acc[t].data.size(); ++k) acc[t].data[k] += g[t].data[k];
}

}  // namespace detail

// Runs the epoch loop from the given parameters. Patients are shuffled each
// epoch; gradients are averaged over batch_size patients per update.
inline TrainingResult train_from(GruNetworkParams params, const Cohort& cohort, const TrainingConfig& config, Rng rng,
                                 const Cohort* validation = nullptr, const EpochCallback& on_epoch = {},
                                 bool allow_zero_epochs = false) {
  validate(config, allow_zero_epochs);
  if (cohort.patients.empty()) throw InsufficientDataError("train: empty cohort");
  if (cohort.vocab.size() != params.input_codes() || cohort.vocab.size() != params.output_codes())
    throw DimensionError("train: vocabulary size differs from the network's code dimensions");
  for (const auto& seq : cohort.patients)
    for (const auto& v : seq.codes)
      for (auto c : v)
        if (c >= cohort.vocab.size()) throw DimensionError("train: patient " + seq.patient_id + " has an out-of-range code");

  TrainingResult result;
  result.optimizer = make_optimizer_state(params.tensors());
  std::vector<std::size_t> order(cohort.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  GruNetworkParams batch_grad = zeros_like(params);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t in_batch = 0;
    auto flush = [&] {
      if (in_batch == 0) return;
      auto grads = batch_grad.tensors();
      if (in_batch > 1)
        for (const auto& g : grads)
          for (double& x : g.data) x /= static_cast<double>(in_batch);
      apply_update(config, params.tensors(), grads, result.optimizer);
      for (const auto& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0);
      in_batch = 0;
    };
    for (std::size_t idx : order) {
      const auto& seq = cohort.patients[idx];
      if (seq.length() < 2) continue;
      const ForwardResult fwd = forward_patient(seq, params, config.dropout, true, rng);
      const double loss = joint_loss(fwd.predictions, seq, config.l2, params);
      if (!std::isfinite(loss))
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + ", patient " + seq.patient_id);
      loss_sum += loss;
      GruNetworkParams g = backward_patient(seq, params, fwd, config.l2);
      detail::add_into(batch_grad.tensors(), g.tensors());
      if (++in_batch == config.batch_size) flush();
    }
    flush();
    if (!all_finite(params.W_code.span()))
      throw DivergenceError("train: parameters became non-finite at epoch " + std::to_string(epoch));

    EpochRecord record;
    record.epoch = epoch;
    record.mean_loss = loss_sum / static_cast<double>(cohort.size());
    if (validation && config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs))
      record.validation = evaluate_model(GruPredictor(params), *validation);
    if (on_epoch) on_epoch(record, params);
    result.history.push_back(std::move(record));
    result.epochs_completed = epoch;
  }
  result.params = std::move(params);
  result.rng = rng;
  return result;
}

// Fresh network from config.seed; in skipgram mode the embedding table, when
// given, supplies the W_emb rows.
inline TrainingResult train(const Cohort& cohort, const TrainingConfig& config, const Cohort* validation = nullptr,
                            const EmbeddingTable* embeddings = nullptr, const EpochCallback& on_epoch = {}) {
  validate(config);
  if (cohort.patients.empty()) throw InsufficientDataError("train: empty cohort");
  Rng rng(config.seed);
  GruNetworkParams params = init_network(network_shape(config, cohort.vocab.size()), rng);
  if (embeddings) {
    if (config.embedding_mode != EmbeddingMode::skipgram)
      throw InvalidArgument("train: an embedding table requires skipgram embedding mode");
    load_embedding_rows(params, cohort.vocab, *embeddings);
  }
  return train_from(std::move(params), cohort, config, rng, validation, on_epoch);
}

// target index -> source index, matched by code string.
using VocabMapping = std::vector<std::size_t>;

inline VocabMapping map_vocabulary(const CodeVocabulary& source, const CodeVocabulary& target) {
  VocabMapping m(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto s = source.find(target.code(i));
    if (!s) throw MappingError(target.code(i));
    m[i] = *s;
  }
  return m;
}

// Gathers the code-indexed tensors of a source network into target-sized
// ones; recurrent tensors are copied unchanged.
inline GruNetworkParams transfer_parameters(const GruNetworkParams& source, const VocabMapping& mapping) {
  for (auto s : mapping)
    if (s >= source.input_codes() || s >= source.output_codes()) throw DimensionError("transfer: mapping index out of range");
  GruNetworkParams out = source;
  const std::size_t p = mapping.size();
  out.W_emb = Matrix(p, source.embedding());
  out.W_code = Matrix(source.hidden(), p);
  out.b_code = Vector(p);
  for (std::size_t i = 0; i < p; ++i) {
    std::copy_n(source.W_emb.row(mapping[i]), source.embedding(), out.W_emb.row(i));
    for (std::size_t h = 0; h < source.hidden(); ++h) out.W_code(h, i) = source.W_code(h, mapping[i]);
    out.b_code[i] = source.b_code[mapping[i]];
  }
  return out;
}

// Continues training a source network on a target cohort. Zero epochs is
// allowed here and returns the transferred parameters unchanged.
inline TrainingResult fine_tune(const GruNetworkParams& source, const Cohort& target, const VocabMapping& mapping,
                                const TrainingConfig& config, const Cohort* validation = nullptr,
                                const EpochCallback& on_epoch = {}) {
  if (mapping.size() != target.vocab.size()) throw DimensionError("fine_tune: mapping does not cover the target vocabulary");
  TrainingConfig c = config;
  c.embedding_mode = source.embedding_mode;
  c.embedding_dim = source.embedding();
  c.hidden = source.hidden();
  c.layers = source.layers.size();
  return train_from(transfer_parameters(source, mapping), target, c, Rng(config.seed), validation, on_epoch, true);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

enum class ModelKind { gru, logistic, mlp };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::gru: return "gru";
    case ModelKind::logistic: return "logistic";
    case ModelKind::mlp: return "mlp";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "gru") return ModelKind::gru;
  if (s == "logistic") return ModelKind::logistic;
  if (s == "mlp") return ModelKind::mlp;
  throw CorruptionError("unknown model kind '" + s + "'");
}

struct StoredTensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool operator==(const StoredTensor&) const = default;
};

struct Checkpoint {
  int version = kCheckpointVersion;
  ModelKind kind = ModelKind::gru;
  nlohmann::json config = nlohmann::json::object();
  CodeVocabulary vocab;
  std::vector<std::pair<std::string, StoredTensor>> tensors;  // in model order
  std::optional<OptimizerState> optimizer;
  std::string rng_state;
  std::size_t epoch = 0;

  const StoredTensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw CorruptionError("checkpoint: missing tensor " + name);
  }
};

inline std::vector<std::pair<std::string, StoredTensor>> store_tensors(const std::vector<TensorRef>& refs) {
  std::vector<std::pair<std::string, StoredTensor>> out;
  for (const auto& t : refs) out.push_back({t.name, {t.shape, {t.data.begin(), t.data.end()}}});
  return out;
}

// Copies stored tensors into a model's tensors by name, checking shapes.
inline void restore_tensors(const Checkpoint& ck, const std::vector<TensorRef>& refs) {
  for (const auto& r : refs) {
    const StoredTensor& t = ck.tensor(r.name);
    if (t.shape != r.shape || t.data.size() != r.data.size())
      throw CorruptionError("checkpoint: tensor " + r.name + " has an unexpected shape");
    std::copy(t.data.begin(), t.data.end(), r.data.begin());
  }
}

inline Checkpoint make_checkpoint(GruNetworkParams& params, const CodeVocabulary& vocab, const TrainingConfig& config,
                                  const OptimizerState* optimizer = nullptr, const Rng* rng = nullptr,
                                  std::size_t epoch = 0) {
  if (vocab.size() != params.input_codes()) throw DimensionError("checkpoint: vocabulary size differs from the network");
  Checkpoint ck;
  ck.kind = ModelKind::gru;
  ck.config = to_json(config);
  ck.config["embedding_mode"] = to_string(params.embedding_mode);
  ck.vocab = vocab;
  ck.tensors = store_tensors(params.tensors());
  if (optimizer) ck.optimizer = *optimizer;
  if (rng) ck.rng_state = rng->serialize();
  ck.epoch = epoch;
  return ck;
}

inline GruNetworkParams network_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::gru) throw InvalidArgument(std::string("checkpoint holds a ") + to_string(ck.kind) + " model");
  const auto& emb = ck.tensor("W_emb");
  const auto& code = ck.tensor("W_code");
  if (emb.shape.size() != 2 || code.shape.size() != 2) throw CorruptionError("checkpoint: bad head shapes");
  std::size_t layers = 0;
  for (const auto& [name, t] : ck.tensors)
    if (name.ends_with(".U_z")) ++layers;
  NetworkShape shape{emb.shape[0], code.shape[1], emb.shape[1], code.shape[0], layers,
                     parse_embedding_mode(ck.config.at("embedding_mode").get<std::string>())};
  GruNetworkParams params = zero_network(shape);
  restore_tensors(ck, params.tensors());
  if (params.tensors().size() != ck.tensors.size()) throw CorruptionError("checkpoint: unexpected tensor count");
  return params;
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json j;
  j["version"] = ck.version;
  j["model_kind"] = to_string(ck.kind);
  j["config"] = ck.config;
  j["vocab"] = ck.vocab.codes();
  j["epoch"] = ck.epoch;
  nlohmann::json tensors = nlohmann::json::object();
  nlohmann::json order = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) {
    tensors[name] = {{"shape", t.shape}, {"data", io::encode_doubles(t.data)}};
    order.push_back(name);
  }
  j["tensor_order"] = order;
  j["tensors"] = tensors;
  if (ck.optimizer) {
    nlohmann::json g = nlohmann::json::array(), u = nlohmann::json::array();
    for (const auto& a : ck.optimizer->mean_sq_grad) g.push_back(io::encode_doubles(a));
    for (const auto& a : ck.optimizer->mean_sq_update) u.push_back(io::encode_doubles(a));
    j["optimizer_state"] = {{"steps", ck.optimizer->steps}, {"mean_sq_grad", g}, {"mean_sq_update", u}};
  } else {
    j["optimizer_state"] = nullptr;
  }
  j["rng_state"] = ck.rng_state;
  return j.dump() + "\n";
}

inline Checkpoint parse_checkpoint(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError(std::string("checkpoint: ") + e.what());
  }
  try {
    if (!j.is_object() || !j.contains("version")) throw CorruptionError("checkpoint: missing version");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw UnsupportedVersionError("checkpoint version " + std::to_string(version) + " is not supported");
    Checkpoint ck;
    ck.version = version;
    ck.kind = parse_model_kind(j.at("model_kind").get<std::string>());
    ck.config = j.at("config");
    const auto codes = j.at("vocab").get<std::vector<std::string>>();
    ck.vocab = CodeVocabulary(codes);
    if (ck.vocab.size() != codes.size()) throw CorruptionError("checkpoint: duplicate vocabulary codes");
    ck.epoch = j.at("epoch").get<std::size_t>();
    const auto& tensors = j.at("tensors");
    for (const auto& name_json : j.at("tensor_order")) {
      const auto name = name_json.get<std::string>();
      const auto& t = tensors.at(name);
      StoredTensor st;
      st.shape = t.at("shape").get<std::vector<std::size_t>>();
      std::size_t n = 1;
      for (auto d : st.shape) n *= d;
      st.data = io::decode_doubles(t.at("data").get<std::string>(), n);
      ck.tensors.push_back({name, std::move(st)});
    }
    if (ck.tensors.size() != tensors.size()) throw CorruptionError("checkpoint: tensor order does not match tensors");
    const auto& os = j.at("optimizer_state");
    if (!os.is_null()) {
      OptimizerState s;
      s.steps = os.at("steps").get<std::uint64_t>();
      const auto& g = os.at("mean_sq_grad");
      const auto& u = os.at("mean_sq_update");
      if (g.size() != ck.tensors.size() || u.size() != ck.tensors.size())
        throw CorruptionError("checkpoint: optimizer state does not match tensors");
      for (std::size_t t = 0; t < ck.tensors.size(); ++t) {
        const auto n = ck.tensors[t].second.data.size();
        s.mean_sq_grad.push_back(io::decode_doubles(g[t].get<std::string>(), n));
        s.mean_sq_update.push_back(io::decode_doubles(u[t].get<std::string>(), n));
      }
      ck.optimizer = std::move(s);
    }
    ck.rng_state = j.at("rng_state").get<std::string>();
    if (!ck.rng_state.empty()) (void)Rng::deserialize(ck.rng_state);
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(io::read_file(path)); }

}  // namespace doctorai
