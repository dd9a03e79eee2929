#pragma once

// Straight-line long double re-implementation of the network loss, used only
// as the finite-difference oracle. Parameters live in one flat array in the
// order of GruNetworkParams::tensors(), so a coordinate can be nudged without
// touching the library's double-precision path.

#include <algorithm>
#include <cmath>
#include <vector>

#include "doctorai/gru.hpp"
#include "doctorai/vocab.hpp"

namespace doctorai::testing {

using real = long double;

class ReferenceModel {
 public:
  explicit ReferenceModel(GruNetworkParams& params)
      : mode_(params.embedding_mode),
        p_(params.input_codes()),
        out_(params.output_codes()),
        emb_(params.embedding()),
        hidden_(params.hidden()),
        layers_(params.layers.size()) {
    for (const auto& t : params.tensors()) {
      offsets_.push_back(flat.size());
      for (double v : t.data) flat.push_back(v);
    }
  }

  std::vector<real> flat;

  // Joint loss with the dropout masks recorded in a forward cache.
  real loss(const PatientSequence& seq, const ForwardResult& masks, real l2) const {
    const std::size_t H = hidden_;
    std::vector<std::vector<real>> h(layers_, std::vector<real>(H, 0.0L));
    real total = 0.0L;
    for (std::size_t i = 0; i + 1 < seq.length(); ++i) {
      std::vector<real> input(emb_ + 1, 0.0L);
      for (std::size_t c = 0; c < emb_; ++c) {
        real acc = 0.0L;
        for (auto j : seq.codes[i]) acc += at(0, j * emb_ + c);
        input[c] = mode_ == EmbeddingMode::learned ? std::tanh(acc + at(1, c)) : acc;
      }
      input[emb_] = std::log1p(static_cast<real>(seq.gap_days(i)));
      for (std::size_t l = 0; l < layers_; ++l) {
        const std::size_t base = 2 + 9 * l;
        const std::size_t in = input.size();
        std::vector<real> z(H), r(H), ht(H), next(H);
        for (std::size_t k = 0; k < H; ++k) {
          real az = at(base + 6, k), ar = at(base + 7, k);
          for (std::size_t c = 0; c < in; ++c) {
            az += at(base + 0, k * in + c) * input[c];
            ar += at(base + 1, k * in + c) * input[c];
          }
          for (std::size_t c = 0; c < H; ++c) {
            az += at(base + 3, k * H + c) * h[l][c];
            ar += at(base + 4, k * H + c) * h[l][c];
          }
          z[k] = 1.0L / (1.0L + std::exp(-az));
          r[k] = 1.0L / (1.0L + std::exp(-ar));
        }
        for (std::size_t k = 0; k < H; ++k) {
          real ah = at(base + 8, k), uh = 0.0L;
          for (std::size_t c = 0; c < in; ++c) ah += at(base + 2, k * in + c) * input[c];
          for (std::size_t c = 0; c < H; ++c) uh += at(base + 5, k * H + c) * h[l][c];
          ht[k] = std::tanh(ah + r[k] * uh);
          next[k] = z[k] * h[l][k] + (1.0L - z[k]) * ht[k];
        }
        h[l] = next;
        if (l + 1 < layers_) {
          input.assign(H, 0.0L);
          for (std::size_t k = 0; k < H; ++k) input[k] = h[l][k] * masks.steps[i].layer_masks[l][k];
        }
      }
      std::vector<real> top(H);
      for (std::size_t k = 0; k < H; ++k) top[k] = h[layers_ - 1][k] * masks.steps[i].head_mask[k];
      const std::size_t head = 2 + 9 * layers_;
      std::vector<real> logits(out_);
      real mx = -1e300L;
      for (std::size_t j = 0; j < out_; ++j) {
        real a = at(head + 1, j);
        for (std::size_t k = 0; k < H; ++k) a += at(head, k * out_ + j) * top[k];
        logits[j] = a;
        mx = std::max(mx, a);
      }
      real z = 0.0L;
      for (auto& a : logits) z += std::exp(a - mx);
      std::vector<char> y(out_, 0);
      for (auto j : seq.codes[i + 1]) y[j] = 1;
      for (std::size_t j = 0; j < out_; ++j) {
        real q = std::exp(logits[j] - mx) / z;
        q = std::clamp<real>(q, 1e-10L, 1.0L - 1e-10L);
        total -= y[j] ? std::log(q) : std::log(1.0L - q);
      }
      real pre = at(head + 3, 0);
      for (std::size_t k = 0; k < H; ++k) pre += at(head + 2, k) * top[k];
      const real d_hat = pre > 0.0L ? pre : 0.0L;
      const real diff = std::log1p(static_cast<real>(seq.gap_days(i + 1))) - d_hat;
      total += 0.5L * diff * diff;
    }
    real sq = 0.0L;
    const std::size_t head = 2 + 9 * layers_;
    for (std::size_t k = offsets_[head]; k < offsets_[head + 1]; ++k) sq += flat[k] * flat[k];
    for (std::size_t k = offsets_[head + 2]; k < offsets_[head + 3]; ++k) sq += flat[k] * flat[k];
    return total + l2 * sq;
  }

  std::size_t tensor_offset(std::size_t t) const { return offsets_[t]; }

 private:
  real at(std::size_t tensor, std::size_t k) const { return flat[offsets_[tensor] + k]; }

  EmbeddingMode mode_;
  std::size_t p_, out_, emb_, hidden_, layers_;
  std::vector<std::size_t> offsets_;
};

}  // namespace doctorai::testing
