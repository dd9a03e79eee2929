#pragma once

// The visit-sequence network: code embedding, stacked GRU, softmax code head
// and ReLU time head, the joint loss, and backpropagation through time.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"

namespace doctorai {

enum class EmbeddingMode { learned, skipgram };

inline const char* to_string(EmbeddingMode mode) { return mode == EmbeddingMode::learned ? "learned" : "skipgram"; }

inline EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "learned") return EmbeddingMode::learned;
  if (s == "skipgram") return EmbeddingMode::skipgram;
  throw InvalidArgument("unknown embedding mode '" + s + "'");
}

// Lower bound of the clamp applied to probabilities inside the log terms.
inline constexpr double kProbClamp = 1e-10;

// Mutable view of one parameter tensor, used by the optimizer, checkpoints
// and gradient checks. Scalars have shape {1}.
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<double> data;
};

struct GruLayerParams {
  Matrix W_z, W_r, W_h;  // hidden x input
  Matrix U_z, U_r, U_h;  // hidden x hidden
  Vector b_z, b_r, b_h;

  std::size_t hidden() const noexcept { return U_z.rows(); }
  std::size_t input() const noexcept { return W_z.cols(); }
  bool operator==(const GruLayerParams&) const = default;
};

struct NetworkShape {
  std::size_t input_codes = 0;   // p, rows of W_emb
  std::size_t output_codes = 0;  // columns of W_code
  std::size_t embedding = 100;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  EmbeddingMode mode = EmbeddingMode::learned;
};

struct GruNetworkParams {
  EmbeddingMode embedding_mode = EmbeddingMode::learned;
  Matrix W_emb;  // p x emb
  Vector b_emb;  // emb; unused in skipgram mode
  std::vector<GruLayerParams> layers;
  Matrix W_code;  // hidden x p_out
  Vector b_code;
  Vector w_time;
  double b_time = 0.0;

  std::size_t input_codes() const noexcept { return W_emb.rows(); }
  std::size_t output_codes() const noexcept { return W_code.cols(); }
  std::size_t embedding() const noexcept { return W_emb.cols(); }
  std::size_t hidden() const noexcept { return W_code.rows(); }

  NetworkShape shape() const {
    return {input_codes(), output_codes(), embedding(), hidden(), layers.size(), embedding_mode};
  }

  // Every tensor in a fixed order; the order is part of the checkpoint format.
  std::vector<TensorRef> tensors() {
    std::vector<TensorRef> out;
    auto mat = [&](const std::string& name, Matrix& m) { out.push_back({name, {m.rows(), m.cols()}, m.span()}); };
    auto vec = [&](const std::string& name, Vector& v) { out.push_back({name, {v.size()}, v.span()}); };
    mat("W_emb", W_emb);
    vec("b_emb", b_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& L = layers[l];
      mat(p + "W_z", L.W_z);
      mat(p + "W_r", L.W_r);
      mat(p + "W_h", L.W_h);
      mat(p + "U_z", L.U_z);
      mat(p + "U_r", L.U_r);
      mat(p + "U_h", L.U_h);
      vec(p + "b_z", L.b_z);
      vec(p + "b_r", L.b_r);
      vec(p + "b_h", L.b_h);
    }
    mat("W_code", W_code);
    vec("b_code", b_code);
    vec("w_time", w_time);
    out.push_back({"b_time", {1}, std::span<double>(&b_time, 1)});
    return out;
  }

  bool operator==(const GruNetworkParams&) const = default;
};

inline std::size_t parameter_count(GruNetworkParams& params) {
  std::size_t n = 0;
  for (const auto& t : params.tensors()) n += t.data.size();
  return n;
}

inline GruLayerParams zero_layer(std::size_t input, std::size_t hidden) {
  GruLayerParams L;
  L.W_z = L.W_r = L.W_h = Matrix(hidden, input);
  L.U_z = L.U_r = L.U_h = Matrix(hidden, hidden);
  L.b_z = L.b_r = L.b_h = Vector(hidden);
  return L;
}

inline GruNetworkParams zero_network(const NetworkShape& s) {
  if (s.input_codes == 0 || s.output_codes == 0 || s.embedding == 0 || s.hidden == 0 || s.layers == 0)
    throw DimensionError("network shape has a zero dimension");
  GruNetworkParams p;
  p.embedding_mode = s.mode;
  p.W_emb = Matrix(s.input_codes, s.embedding);
  p.b_emb = Vector(s.embedding);
  for (std::size_t l = 0; l < s.layers; ++l) p.layers.push_back(zero_layer(l == 0 ? s.embedding + 1 : s.hidden, s.hidden));
  p.W_code = Matrix(s.hidden, s.output_codes);
  p.b_code = Vector(s.output_codes);
  p.w_time = Vector(s.hidden);
  return p;
}

inline GruNetworkParams zeros_like(const GruNetworkParams& params) { return zero_network(params.shape()); }

// Orthonormal W and U matrices, w_time uniform in [-0.1, 0.1), zero biases.
inline GruNetworkParams init_network(const NetworkShape& s, Rng& rng) {
  GruNetworkParams p = zero_network(s);
  p.W_emb = orthonormal_init(s.input_codes, s.embedding, rng);
  for (auto& L : p.layers) {
    for (Matrix* w : {&L.W_z, &L.W_r, &L.W_h}) *w = orthonormal_init(w->rows(), w->cols(), rng);
    for (Matrix* u : {&L.U_z, &L.U_r, &L.U_h}) *u = orthonormal_init(u->rows(), u->cols(), rng);
  }
  p.W_code = orthonormal_init(s.hidden, s.output_codes, rng);
  p.w_time = uniform_init(s.hidden, -0.1, 0.1, rng);
  return p;
}

// Inverted dropout: zeros with probability rate, survivors scaled by
// 1 / (1 - rate). Evaluation (or rate 0) yields all ones and draws nothing.
inline Vector dropout_mask(std::size_t len, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must be in [0, 1)");
  Vector mask(len, 1.0);
  if (!training || rate == 0.0) return mask;
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

namespace detail {

inline void check_layer(const GruLayerParams& L, std::size_t input, std::size_t hidden_prev) {
  const std::size_t h = L.hidden();
  if (L.input() != input || hidden_prev != h || L.W_r.cols() != input || L.W_h.cols() != input ||
      L.W_z.rows() != h || L.W_r.rows() != h || L.W_h.rows() != h || L.U_r.rows() != h || L.U_h.rows() != h ||
      L.U_z.cols() != h || L.U_r.cols() != h || L.U_h.cols() != h || L.b_z.size() != h || L.b_r.size() != h ||
      L.b_h.size() != h)
    throw DimensionError("GRU layer shape mismatch");
}

// Embedding of a multi-hot input given by its nonzero indices (ascending).
inline void embed_indices(std::span<const std::size_t> indices, std::span<const double> weights, double log_gap,
                          const GruNetworkParams& params, Vector& out) {
  const std::size_t e = params.embedding();
  out = Vector(e + 1);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t j = indices[k];
    if (j >= params.input_codes()) throw DimensionError("input code index out of range");
    const double xj = weights.empty() ? 1.0 : weights[k];
    const double* row = params.W_emb.row(j);
    for (std::size_t c = 0; c < e; ++c) out[c] += xj * row[c];
  }
  if (params.embedding_mode == EmbeddingMode::learned)
    for (std::size_t c = 0; c < e; ++c) out[c] = std::tanh(out[c] + params.b_emb[c]);
  out[e] = log_gap;
}

}  // namespace detail

// [tanh(x^T W_emb + b_emb), d] in learned mode, [x^T W_emb, d] in skipgram
// mode.
inline Vector embed_input(const Vector& x, double log_gap, const GruNetworkParams& params) {
  if (x.size() != params.input_codes()) throw DimensionError("embed_input: input length differs from vocabulary size");
  std::vector<std::size_t> idx;
  std::vector<double> w;
  for (std::size_t j = 0; j < x.size(); ++j)
    if (x[j] != 0.0) {
      idx.push_back(j);
      w.push_back(x[j]);
    }
  Vector out;
  detail::embed_indices(idx, w, log_gap, params, out);
  return out;
}

// Activations of one GRU layer at one step. u holds U_h h_prev (before the
// reset gate is applied).
struct LayerStep {
  Vector input, h_prev, z, r, u, h_tilde, h;
};

inline LayerStep gru_cell_forward(const Vector& input, const Vector& h_prev, const GruLayerParams& L) {
  detail::check_layer(L, input.size(), h_prev.size());
  const std::size_t H = L.hidden();
  LayerStep s;
  s.input = input;
  s.h_prev = h_prev;
  s.z = Vector(H);
  s.r = Vector(H);
  s.u = Vector(H);
  s.h_tilde = Vector(H);
  s.h = Vector(H);
  Vector wx(H), uh(H);
  matvec_into(L.W_z, input.span(), wx.span());
  matvec_into(L.U_z, h_prev.span(), uh.span());
  for (std::size_t k = 0; k < H; ++k) s.z[k] = sigmoid(wx[k] + uh[k] + L.b_z[k]);
  matvec_into(L.W_r, input.span(), wx.span());
  matvec_into(L.U_r, h_prev.span(), uh.span());
  for (std::size_t k = 0; k < H; ++k) s.r[k] = sigmoid(wx[k] + uh[k] + L.b_r[k]);
  matvec_into(L.W_h, input.span(), wx.span());
  matvec_into(L.U_h, h_prev.span(), s.u.span());
  for (std::size_t k = 0; k < H; ++k) s.h_tilde[k] = std::tanh(wx[k] + s.r[k] * s.u[k] + L.b_h[k]);
  for (std::size_t k = 0; k < H; ++k) s.h[k] = s.z[k] * h_prev[k] + (1.0 - s.z[k]) * s.h_tilde[k];
  return s;
}

struct StepPrediction {
  Vector y_hat;             // probabilities over output codes
  double log_gap = 0.0;     // predicted log(1 + days) to the next visit
  double time_preact = 0.0;  // w_time^T h + b_time before the ReLU
};

struct StepActivations {
  Vector embedded;  // layer-1 input: embedding plus duration
  std::vector<LayerStep> layers;
  std::vector<Vector> layer_masks;  // dropout on the output of layers 0..L-2
  Vector head_mask;
  Vector head_input;
};

struct ForwardResult {
  std::vector<StepPrediction> predictions;  // predictions[i] targets visit i + 1
  std::vector<StepActivations> steps;
};

// Runs visits 0..n-2; prediction i is made after seeing visit i and targets
// visit i + 1. Dropout masks are drawn per step in layer order, then for the
// heads, and only when training.
inline ForwardResult forward_patient(const PatientSequence& seq, const GruNetworkParams& params, double dropout,
                                     bool training, Rng& rng) {
  if (seq.length() < 2) throw InsufficientDataError("forward_patient: sequence needs at least two visits");
  if (seq.codes.size() != seq.length()) throw DimensionError("forward_patient: sequence is not indexed");
  if (params.layers.empty()) throw DimensionError("forward_patient: network has no layers");
  if (params.w_time.size() != params.hidden() || params.b_code.size() != params.output_codes() ||
      params.b_emb.size() != params.embedding())
    throw DimensionError("forward_patient: head shape mismatch");
  const std::size_t steps = seq.length() - 1;
  const std::size_t L = params.layers.size();
  const std::size_t H = params.hidden();
  const std::size_t P = params.output_codes();
  ForwardResult out;
  out.predictions.resize(steps);
  out.steps.resize(steps);
  std::vector<Vector> h(L, Vector(H));
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < steps; ++i) {
    StepActivations& act = out.steps[i];
    idx = seq.codes[i];
    std::sort(idx.begin(), idx.end());
    detail::embed_indices(idx, {}, seq.log_gap(i), params, act.embedded);
    const Vector* input = &act.embedded;
    Vector masked;
    act.layers.reserve(L);
    for (std::size_t l = 0; l < L; ++l) {
      act.layers.push_back(gru_cell_forward(*input, h[l], params.layers[l]));
      h[l] = act.layers.back().h;
      if (l + 1 < L) {
        act.layer_masks.push_back(dropout_mask(H, dropout, rng, training));
        masked = hadamard(act.layer_masks.back(), h[l]);
        input = &masked;
      }
    }
    act.head_mask = dropout_mask(H, dropout, rng, training);
    act.head_input = hadamard(act.head_mask, h[L - 1]);

    StepPrediction& pred = out.predictions[i];
    Vector logits(params.b_code);
    matvec_transposed_acc(params.W_code, act.head_input.span(), logits.span());
    pred.y_hat = Vector(P);
    softmax_into(logits.span(), pred.y_hat.span());
    pred.time_preact = dot(params.w_time.span(), act.head_input.span()) + params.b_time;
    pred.log_gap = pred.time_preact > 0.0 ? pred.time_preact : 0.0;
  }
  return out;
}

// Per-step cross-entropy and squared time loss for prediction i.
inline double step_loss(const StepPrediction& pred, std::span<const std::size_t> target, double target_log_gap) {
  const std::size_t P = pred.y_hat.size();
  std::vector<char> y(P, 0);
  for (auto j : target) {
    if (j >= P) throw DimensionError("target code index out of range");
    y[j] = 1;
  }
  double ce = 0.0;
  for (std::size_t j = 0; j < P; ++j) {
    const double q = std::clamp(pred.y_hat[j], kProbClamp, 1.0 - kProbClamp);
    ce -= y[j] ? std::log(q) : std::log(1.0 - q);
  }
  const double diff = target_log_gap - pred.log_gap;
  return ce + 0.5 * diff * diff;
}

inline double l2_penalty(const GruNetworkParams& params, double l2) {
  if (l2 == 0.0) return 0.0;
  double sq = 0.0;
  for (double w : params.W_code.span()) sq += w * w;
  for (double w : params.w_time.span()) sq += w * w;
  return l2 * sq;
}

// Sum over steps of binary cross-entropy on the softmax output plus half the
// squared log-gap error, plus l2 * (|W_code|^2 + |w_time|^2).
inline double joint_loss(std::span<const StepPrediction> preds, const PatientSequence& seq, double l2,
                         const GruNetworkParams& params) {
  if (preds.size() + 1 != seq.length()) throw DimensionError("joint_loss: need one prediction per visit after the first");
  double loss = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) loss += step_loss(preds[i], seq.codes[i + 1], seq.log_gap(i + 1));
  return loss + l2_penalty(params, l2);
}

namespace detail {

// Backward through one GRU layer at one step. Accumulates parameter
// gradients into g, writes dL/d(input) to d_input and dL/d(h_prev) to d_hprev.
inline void gru_cell_backward(const LayerStep& s, const Vector& dh, const GruLayerParams& L, GruLayerParams& g,
                              Vector& d_input, Vector& d_hprev) {
  const std::size_t H = L.hidden();
  Vector da_z(H), da_r(H), da_h(H), du(H);
  for (std::size_t k = 0; k < H; ++k) {
    const double dz = dh[k] * (s.h_prev[k] - s.h_tilde[k]);
    da_z[k] = dz * s.z[k] * (1.0 - s.z[k]);
    const double dht = dh[k] * (1.0 - s.z[k]);
    da_h[k] = dht * (1.0 - s.h_tilde[k] * s.h_tilde[k]);
    const double dr = da_h[k] * s.u[k];
    da_r[k] = dr * s.r[k] * (1.0 - s.r[k]);
    du[k] = da_h[k] * s.r[k];
  }
  outer_acc(g.W_z, da_z.span(), s.input.span());
  outer_acc(g.W_r, da_r.span(), s.input.span());
  outer_acc(g.W_h, da_h.span(), s.input.span());
  outer_acc(g.U_z, da_z.span(), s.h_prev.span());
  outer_acc(g.U_r, da_r.span(), s.h_prev.span());
  outer_acc(g.U_h, du.span(), s.h_prev.span());
  for (std::size_t k = 0; k < H; ++k) {
    g.b_z[k] += da_z[k];
    g.b_r[k] += da_r[k];
    g.b_h[k] += da_h[k];
  }
  d_input = Vector(s.input.size());
  matvec_transposed_acc(L.W_z, da_z.span(), d_input.span());
  matvec_transposed_acc(L.W_r, da_r.span(), d_input.span());
  matvec_transposed_acc(L.W_h, da_h.span(), d_input.span());
  d_hprev = Vector(H);
  for (std::size_t k = 0; k < H; ++k) d_hprev[k] = dh[k] * s.z[k];
  matvec_transposed_acc(L.U_z, da_z.span(), d_hprev.span());
  matvec_transposed_acc(L.U_r, da_r.span(), d_hprev.span());
  matvec_transposed_acc(L.U_h, du.span(), d_hprev.span());
}

}  // namespace detail

// Gradients of joint_loss with respect to every tensor, given the cache of the
// forward pass that produced the predictions (dropout masks included).
inline GruNetworkParams backward_patient(const PatientSequence& seq, const GruNetworkParams& params,
                                         const ForwardResult& fwd, double l2) {
  const std::size_t steps = fwd.steps.size();
  if (steps + 1 != seq.length() || fwd.predictions.size() != steps)
    throw DimensionError("backward_patient: cache does not match the sequence");
  const std::size_t L = params.layers.size();
  const std::size_t H = params.hidden();
  const std::size_t P = params.output_codes();
  const std::size_t E = params.embedding();
  GruNetworkParams g = zeros_like(params);

  std::vector<Vector> dh_next(L, Vector(H));
  std::vector<Vector> dh_out(L, Vector(H));
  Vector dlogit(P), d_input, d_hprev;
  std::vector<char> y(P);
  std::vector<std::size_t> idx;
  for (std::size_t ii = steps; ii-- > 0;) {
    const StepActivations& act = fwd.steps[ii];
    const StepPrediction& pred = fwd.predictions[ii];

    std::fill(y.begin(), y.end(), 0);
    for (auto j : seq.codes[ii + 1]) y[j] = 1;
    double dot_gy = 0.0;
    for (std::size_t j = 0; j < P; ++j) {
      const double q = pred.y_hat[j];
      double gj = 0.0;
      if (q > kProbClamp && q < 1.0 - kProbClamp) gj = y[j] ? -1.0 / q : 1.0 / (1.0 - q);
      dlogit[j] = gj;
      dot_gy += gj * q;
    }
    for (std::size_t j = 0; j < P; ++j) dlogit[j] = pred.y_hat[j] * (dlogit[j] - dot_gy);
    const double da_time = pred.time_preact > 0.0 ? pred.log_gap - seq.log_gap(ii + 1) : 0.0;

    outer_acc(g.W_code, act.head_input.span(), dlogit.span());
    for (std::size_t j = 0; j < P; ++j) g.b_code[j] += dlogit[j];
    for (std::size_t k = 0; k < H; ++k) g.w_time[k] += da_time * act.head_input[k];
    g.b_time += da_time;

    Vector d_head(H);
    matvec_into(params.W_code, dlogit.span(), d_head.span());
    for (std::size_t k = 0; k < H; ++k) d_head[k] = (d_head[k] + da_time * params.w_time[k]) * act.head_mask[k];

    for (auto& d : dh_out) d.fill(0.0);
    dh_out[L - 1] = d_head;
    for (std::size_t l = L; l-- > 0;) {
      Vector dh = dh_out[l];
      for (std::size_t k = 0; k < H; ++k) dh[k] += dh_next[l][k];
      detail::gru_cell_backward(act.layers[l], dh, params.layers[l], g.layers[l], d_input, d_hprev);
      dh_next[l] = d_hprev;
      if (l > 0) {
        const Vector& mask = act.layer_masks[l - 1];
        for (std::size_t k = 0; k < H; ++k) dh_out[l - 1][k] += d_input[k] * mask[k];
      }
    }

    // d_input now holds the gradient of the layer-1 input; the duration slot
    // carries no parameters.
    idx = seq.codes[ii];
    std::sort(idx.begin(), idx.end());
    Vector d_pre(E);
    for (std::size_t c = 0; c < E; ++c) {
      d_pre[c] = d_input[c];
      if (params.embedding_mode == EmbeddingMode::learned) {
        const double e = act.embedded[c];
        d_pre[c] *= 1.0 - e * e;
        g.b_emb[c] += d_pre[c];
      }
    }
    for (auto j : idx) {
      double* row = g.W_emb.row(j);
      for (std::size_t c = 0; c < E; ++c) row[c] += d_pre[c];
    }
  }

  if (l2 != 0.0) {
    for (std::size_t k = 0; k < params.W_code.size(); ++k) g.W_code.data()[k] += 2.0 * l2 * params.W_code.data()[k];
    for (std::size_t k = 0; k < H; ++k) g.w_time[k] += 2.0 * l2 * params.w_time[k];
  }
  return g;
}

}  // namespace doctorai
