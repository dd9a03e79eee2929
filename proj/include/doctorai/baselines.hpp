#pragma once

// Comparison predictors: last visit, most frequent codes, and logistic
// regression / a one-hidden-layer MLP over summed lag features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/gru.hpp"
#include "doctorai/metrics.hpp"
#include "doctorai/optim.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"
#include "json.hpp"

namespace doctorai {

struct LagConfig {
  std::size_t L = 5;
  bool operator==(const LagConfig&) const = default;
};

namespace detail {

inline void require_history(const PatientSequence& seq, std::size_t target) {
  if (target < 1) throw NoHistoryError("patient " + seq.patient_id + ": visit 0 has no history to predict from");
  if (target >= seq.length()) throw InvalidArgument("patient " + seq.patient_id + ": target visit out of range");
}

inline std::size_t check_code(std::size_t c, std::size_t p) {
  if (c >= p) throw DimensionError("code index out of range for the vocabulary");
  return c;
}

}  // namespace detail

// Visit indices are 0-based: predicting visit `target` (>= 1) uses visits
// 0..target-1.

// Scores 1 for the codes of the previous visit, 0 elsewhere.
inline PredictionRanking predict_last_visit(const PatientSequence& seq, std::size_t target, std::size_t p) {
  detail::require_history(seq, target);
  Vector s(p);
  for (auto c : seq.codes[target - 1]) s[detail::check_code(c, p)] = 1.0;
  return {std::move(s), std::nullopt};
}

// Scores each code by its number of occurrences in the history.
inline PredictionRanking predict_most_frequent(const PatientSequence& seq, std::size_t target, std::size_t p) {
  detail::require_history(seq, target);
  Vector s(p);
  for (std::size_t v = 0; v < target; ++v)
    for (auto c : seq.codes[v]) s[detail::check_code(c, p)] += 1.0;
  return {std::move(s), std::nullopt};
}

// Sum of the last min(L, target) multi-hot visit vectors (counts, unclipped).
inline Vector aggregate_lag_features(const PatientSequence& seq, std::size_t target, const LagConfig& lag,
                                     std::size_t p) {
  if (lag.L < 1) throw InvalidArgument("LagConfig: L must be at least 1");
  detail::require_history(seq, target);
  Vector x(p);
  const std::size_t first = target > lag.L ? target - lag.L : 0;
  for (std::size_t v = first; v < target; ++v)
    for (auto c : seq.codes[v]) x[detail::check_code(c, p)] += 1.0;
  return x;
}

struct LastVisitPredictor {
  std::size_t p;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    std::vector<PredictionRanking> out;
    for (std::size_t t = 1; t < seq.length(); ++t) out.push_back(predict_last_visit(seq, t, p));
    return out;
  }
};

struct MostFrequentPredictor {
  std::size_t p;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    std::vector<PredictionRanking> out;
    Vector counts(p);
    for (std::size_t t = 1; t < seq.length(); ++t) {
      for (auto c : seq.codes[t - 1]) counts[detail::check_code(c, p)] += 1.0;
      out.push_back({counts, std::nullopt});
    }
    return out;
  }
};

// One training example: sparse lag features, target codes and log gap.
struct LagExample {
  std::vector<std::pair<std::size_t, double>> features;
  std::vector<std::size_t> target;
  double log_gap = 0.0;
};

inline LagExample make_lag_example(const PatientSequence& seq, std::size_t target, const LagConfig& lag, std::size_t p) {
  const Vector x = aggregate_lag_features(seq, target, lag, p);
  LagExample e;
  for (std::size_t j = 0; j < p; ++j)
    if (x[j] != 0.0) e.features.push_back({j, x[j]});
  e.target = seq.codes[target];
  for (auto c : e.target) detail::check_code(c, p);
  e.log_gap = seq.log_gap(target);
  return e;
}

inline std::vector<LagExample> lag_examples(const Cohort& cohort, const LagConfig& lag) {
  std::vector<LagExample> out;
  for (const auto& seq : cohort.patients)
    for (std::size_t t = 1; t < seq.length(); ++t) out.push_back(make_lag_example(seq, t, lag, cohort.vocab.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Logistic regression: independent sigmoid per label, plus a separate linear
// ReLU model for the log gap.

struct LinearModelParams {
  Matrix W;       // p x p: feature -> label
  Vector b;       // p
  Vector w_time;  // p
  double b_time = 0.0;

  std::size_t codes() const noexcept { return W.rows(); }

  std::vector<TensorRef> tensors() {
    return {{"W", {W.rows(), W.cols()}, W.span()},
            {"b", {b.size()}, b.span()},
            {"w_time", {w_time.size()}, w_time.span()},
            {"b_time", {1}, std::span<double>(&b_time, 1)}};
  }

  bool operator==(const LinearModelParams&) const = default;
};

inline LinearModelParams zero_linear_model(std::size_t p) {
  if (p == 0) throw DimensionError("logistic model needs at least one code");
  return {Matrix(p, p), Vector(p), Vector(p), 0.0};
}

namespace detail {

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

inline PredictionRanking logistic_predict(const LinearModelParams& m, std::span<const std::pair<std::size_t, double>> x) {
  const std::size_t p = m.codes();
  Vector s = m.b;
  double pre = m.b_time;
  for (auto [j, v] : x) {
    const double* row = m.W.row(j);
    for (std::size_t k = 0; k < p; ++k) s[k] += v * row[k];
    pre += v * m.w_time[j];
  }
  for (auto& a : s) a = sigmoid(a);
  return {std::move(s), pre > 0.0 ? pre : 0.0};
}

// Loss of one example; when grad is given, its gradient is added into it.
inline double logistic_loss(const LinearModelParams& m, const LagExample& e, double l2, LinearModelParams* grad = nullptr) {
  const std::size_t p = m.codes();
  Vector a = m.b;
  double pre = m.b_time;
  for (auto [j, v] : e.features) {
    const double* row = m.W.row(j);
    for (std::size_t k = 0; k < p; ++k) a[k] += v * row[k];
    pre += v * m.w_time[j];
  }
  std::vector<char> y(p, 0);
  for (auto c : e.target) y[c] = 1;
  double loss = 0.0;
  for (std::size_t k = 0; k < p; ++k) loss += y[k] ? detail::softplus(-a[k]) : detail::softplus(a[k]);
  const double d_hat = pre > 0.0 ? pre : 0.0;
  const double diff = e.log_gap - d_hat;
  loss += 0.5 * diff * diff;
  double sq = 0.0;
  for (double w : m.W.span()) sq += w * w;
  for (double w : m.w_time.span()) sq += w * w;
  loss += l2 * sq;
  if (grad) {
    Vector da(p);
    for (std::size_t k = 0; k < p; ++k) da[k] = sigmoid(a[k]) - (y[k] ? 1.0 : 0.0);
    const double dpre = pre > 0.0 ? d_hat - e.log_gap : 0.0;
    for (auto [j, v] : e.features) {
      double* row = grad->W.row(j);
      for (std::size_t k = 0; k < p; ++k) row[k] += v * da[k];
      grad->w_time[j] += v * dpre;
    }
    for (std::size_t k = 0; k < p; ++k) grad->b[k] += da[k];
    grad->b_time += dpre;
    if (l2 != 0.0) {
      for (std::size_t k = 0; k < m.W.size(); ++k) grad->W.data()[k] += 2.0 * l2 * m.W.data()[k];
      for (std::size_t k = 0; k < p; ++k) grad->w_time[k] += 2.0 * l2 * m.w_time[k];
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// MLP: tanh hidden layer, softmax code output with the clamped cross-entropy
// used by the GRU, ReLU time head on the hidden layer.

struct MlpConfig {
  std::size_t hidden = 128;
  bool operator==(const MlpConfig&) const = default;
};

struct MlpParams {
  Matrix W_hidden;  // p x H
  Vector b_hidden;
  Matrix W_out;     // H x p
  Vector b_out;
  Vector w_time;    // H
  double b_time = 0.0;

  std::size_t codes() const noexcept { return W_hidden.rows(); }
  std::size_t hidden() const noexcept { return W_hidden.cols(); }

  std::vector<TensorRef> tensors() {
    return {{"W_hidden", {W_hidden.rows(), W_hidden.cols()}, W_hidden.span()},
            {"b_hidden", {b_hidden.size()}, b_hidden.span()},
            {"W_out", {W_out.rows(), W_out.cols()}, W_out.span()},
            {"b_out", {b_out.size()}, b_out.span()},
            {"w_time", {w_time.size()}, w_time.span()},
            {"b_time", {1}, std::span<double>(&b_time, 1)}};
  }

  bool operator==(const MlpParams&) const = default;
};

inline MlpParams zero_mlp(std::size_t p, std::size_t hidden) {
  if (p == 0 || hidden == 0) throw DimensionError("MLP needs at least one code and one hidden unit");
  return {Matrix(p, hidden), Vector(hidden), Matrix(hidden, p), Vector(p), Vector(hidden), 0.0};
}

inline MlpParams init_mlp(std::size_t p, const MlpConfig& config, Rng& rng) {
  MlpParams m = zero_mlp(p, config.hidden);
  m.W_hidden = orthonormal_init(p, config.hidden, rng);
  m.W_out = orthonormal_init(config.hidden, p, rng);
  m.w_time = uniform_init(config.hidden, -0.1, 0.1, rng);
  return m;
}

struct MlpForward {
  Vector h;
  Vector y_hat;
  double time_preact = 0.0;
  double log_gap = 0.0;
};

inline MlpForward mlp_forward(const MlpParams& m, std::span<const std::pair<std::size_t, double>> x) {
  const std::size_t H = m.hidden(), p = m.codes();
  MlpForward f;
  f.h = m.b_hidden;
  for (auto [j, v] : x) {
    const double* row = m.W_hidden.row(j);
    for (std::size_t k = 0; k < H; ++k) f.h[k] += v * row[k];
  }
  for (auto& a : f.h) a = std::tanh(a);
  Vector logits = m.b_out;
  matvec_transposed_acc(m.W_out, f.h.span(), logits.span());
  f.y_hat = Vector(p);
  softmax_into(logits.span(), f.y_hat.span());
  f.time_preact = dot(m.w_time.span(), f.h.span()) + m.b_time;
  f.log_gap = f.time_preact > 0.0 ? f.time_preact : 0.0;
  return f;
}

inline PredictionRanking mlp_predict(const MlpParams& m, std::span<const std::pair<std::size_t, double>> x) {
  MlpForward f = mlp_forward(m, x);
  return {std::move(f.y_hat), f.log_gap};
}

inline double mlp_loss(const MlpParams& m, const LagExample& e, double l2, MlpParams* grad = nullptr) {
  const std::size_t H = m.hidden(), p = m.codes();
  const MlpForward f = mlp_forward(m, e.features);
  std::vector<char> y(p, 0);
  for (auto c : e.target) y[c] = 1;
  double loss = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    const double q = std::clamp(f.y_hat[j], kProbClamp, 1.0 - kProbClamp);
    loss -= y[j] ? std::log(q) : std::log(1.0 - q);
  }
  const double diff = e.log_gap - f.log_gap;
  loss += 0.5 * diff * diff;
  double sq = 0.0;
  for (double w : m.W_hidden.span()) sq += w * w;
  for (double w : m.W_out.span()) sq += w * w;
  for (double w : m.w_time.span()) sq += w * w;
  loss += l2 * sq;
  if (grad) {
    Vector dlogit(p);
    double dot_gy = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      const double q = f.y_hat[j];
      double gj = 0.0;
      if (q > kProbClamp && q < 1.0 - kProbClamp) gj = y[j] ? -1.0 / q : 1.0 / (1.0 - q);
      dlogit[j] = gj;
      dot_gy += gj * q;
    }
    for (std::size_t j = 0; j < p; ++j) dlogit[j] = f.y_hat[j] * (dlogit[j] - dot_gy);
    const double dpre = f.time_preact > 0.0 ? f.log_gap - e.log_gap : 0.0;
    outer_acc(grad->W_out, f.h.span(), dlogit.span());
    for (std::size_t j = 0; j < p; ++j) grad->b_out[j] += dlogit[j];
    for (std::size_t k = 0; k < H; ++k) grad->w_time[k] += dpre * f.h[k];
    grad->b_time += dpre;
    Vector dh(H);
    matvec_into(m.W_out, dlogit.span(), dh.span());
    for (std::size_t k = 0; k < H; ++k) dh[k] = (dh[k] + dpre * m.w_time[k]) * (1.0 - f.h[k] * f.h[k]);
    for (auto [j, v] : e.features) {
      double* row = grad->W_hidden.row(j);
      for (std::size_t k = 0; k < H; ++k) row[k] += v * dh[k];
    }
    for (std::size_t k = 0; k < H; ++k) grad->b_hidden[k] += dh[k];
    if (l2 != 0.0) {
      for (std::size_t k = 0; k < m.W_hidden.size(); ++k) grad->W_hidden.data()[k] += 2.0 * l2 * m.W_hidden.data()[k];
      for (std::size_t k = 0; k < m.W_out.size(); ++k) grad->W_out.data()[k] += 2.0 * l2 * m.W_out.data()[k];
      for (std::size_t k = 0; k < H; ++k) grad->w_time[k] += 2.0 * l2 * m.w_time[k];
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training

template <typename Model>
struct BaselineResult {
  Model params;
  std::vector<double> epoch_loss;  // mean loss per example
};

namespace detail {

// Shuffled minibatch loop shared by the two trainable baselines. Uses the
// optimizer, batch size, epochs, l2, clipping and seed of the config.
template <typename Model, typename LossFn>
BaselineResult<Model> train_lag_model(Model params, const std::vector<LagExample>& examples,
                                      const TrainingConfig& config, Rng& rng, LossFn loss_fn, const char* what) {
  validate(config);
  if (examples.empty()) throw InsufficientDataError(std::string(what) + ": no training examples");
  BaselineResult<Model> result;
  OptimizerState state = make_optimizer_state(params.tensors());
  Model grad = params;
  auto zero = [&] {
    for (const auto& t : grad.tensors()) std::fill(t.data.begin(), t.data.end(), 0.0);
  };
  zero();
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t in_batch = 0;
    auto flush = [&] {
      if (in_batch == 0) return;
      auto g = grad.tensors();
      if (in_batch > 1)
        for (const auto& t : g)
          for (double& x : t.data) x /= static_cast<double>(in_batch);
      apply_update(config, params.tensors(), g, state);
      zero();
      in_batch = 0;
    };
    for (std::size_t i : order) {
      const double loss = loss_fn(params, examples[i], config.l2, &grad);
      if (!std::isfinite(loss))
        throw DivergenceError(std::string(what) + ": non-finite loss at epoch " + std::to_string(epoch));
      total += loss;
      if (++in_batch == config.batch_size) flush();
    }
    flush();
    result.epoch_loss.push_back(total / static_cast<double>(examples.size()));
  }
  result.params = std::move(params);
  return result;
}

}  // namespace detail

inline BaselineResult<LinearModelParams> train_logistic(const std::vector<LagExample>& examples, std::size_t p,
                                                        const TrainingConfig& config) {
  Rng rng(config.seed);
  return detail::train_lag_model(zero_linear_model(p), examples, config, rng,
                                 [](const LinearModelParams& m, const LagExample& e, double l2, LinearModelParams* g) {
                                   return logistic_loss(m, e, l2, g);
                                 },
                                 "train_logistic");
}

inline BaselineResult<LinearModelParams> train_logistic(const Cohort& cohort, const LagConfig& lag,
                                                        const TrainingConfig& config) {
  if (cohort.patients.empty()) throw InsufficientDataError("train_logistic: empty cohort");
  return train_logistic(lag_examples(cohort, lag), cohort.vocab.size(), config);
}

inline BaselineResult<MlpParams> train_mlp(const std::vector<LagExample>& examples, std::size_t p,
                                           const MlpConfig& mlp, const TrainingConfig& config) {
  if (mlp.hidden < 1) throw InvalidArgument("MlpConfig: hidden must be at least 1");
  Rng rng(config.seed);
  MlpParams init = init_mlp(p, mlp, rng);
  return detail::train_lag_model(std::move(init), examples, config, rng,
                                 [](const MlpParams& m, const LagExample& e, double l2, MlpParams* g) {
                                   return mlp_loss(m, e, l2, g);
                                 },
                                 "train_mlp");
}

inline BaselineResult<MlpParams> train_mlp(const Cohort& cohort, const LagConfig& lag, const MlpConfig& mlp,
                                           const TrainingConfig& config) {
  if (cohort.patients.empty()) throw InsufficientDataError("train_mlp: empty cohort");
  return train_mlp(lag_examples(cohort, lag), cohort.vocab.size(), mlp, config);
}

struct LogisticPredictor {
  const LinearModelParams* params;
  LagConfig lag;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    std::vector<PredictionRanking> out;
    for (std::size_t t = 1; t < seq.length(); ++t)
      out.push_back(logistic_predict(*params, make_lag_example(seq, t, lag, params->codes()).features));
    return out;
  }
};

struct MlpPredictor {
  const MlpParams* params;
  LagConfig lag;
  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    std::vector<PredictionRanking> out;
    for (std::size_t t = 1; t < seq.length(); ++t)
      out.push_back(mlp_predict(*params, make_lag_example(seq, t, lag, params->codes()).features));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Persistence in the shared checkpoint container.

inline Checkpoint make_checkpoint(LinearModelParams& m, const CodeVocabulary& vocab, const LagConfig& lag,
                                  const TrainingConfig& config) {
  if (vocab.size() != m.codes()) throw DimensionError("checkpoint: vocabulary size differs from the model");
  Checkpoint ck;
  ck.kind = ModelKind::logistic;
  ck.config = {{"lag", lag.L}, {"training", to_json(config)}};
  ck.vocab = vocab;
  ck.tensors = store_tensors(m.tensors());
  return ck;
}

inline Checkpoint make_checkpoint(MlpParams& m, const CodeVocabulary& vocab, const LagConfig& lag,
                                  const TrainingConfig& config) {
  if (vocab.size() != m.codes()) throw DimensionError("checkpoint: vocabulary size differs from the model");
  Checkpoint ck;
  ck.kind = ModelKind::mlp;
  ck.config = {{"lag", lag.L}, {"hidden", m.hidden()}, {"training", to_json(config)}};
  ck.vocab = vocab;
  ck.tensors = store_tensors(m.tensors());
  return ck;
}

inline LagConfig lag_from_checkpoint(const Checkpoint& ck) {
  try {
    return {ck.config.at("lag").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: ") + e.what());
  }
}

inline LinearModelParams logistic_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::logistic) throw InvalidArgument(std::string("checkpoint holds a ") + to_string(ck.kind) + " model");
  LinearModelParams m = zero_linear_model(ck.vocab.size());
  restore_tensors(ck, m.tensors());
  return m;
}

inline MlpParams mlp_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::mlp) throw InvalidArgument(std::string("checkpoint holds a ") + to_string(ck.kind) + " model");
  std::size_t hidden = 0;
  try {
    hidden = ck.config.at("hidden").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: ") + e.what());
  }
  MlpParams m = zero_mlp(ck.vocab.size(), hidden);
  restore_tensors(ck, m.tensors());
  return m;
}

}  // namespace doctorai
