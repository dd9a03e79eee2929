#pragma once

// Small hand-built patients and networks shared by the suites.

#include <string>
#include <vector>

#include "doctorai/gru.hpp"
#include "doctorai/synthetic.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"
#include "gradcheck.hpp"
#include "reference_model.hpp"

namespace doctorai::testing {

// Vocabulary "001".."00p" style codes from the synthetic namer.
inline CodeVocabulary numbered_vocab(std::size_t p) {
  CodeVocabulary vocab;
  for (std::size_t c = 0; c < p; ++c) vocab.add(synthetic_code_name(c));
  return vocab;
}

// Builds an indexed patient from per-visit code indices and timestamps.
inline PatientSequence make_patient(const std::string& id, const std::vector<std::int64_t>& times,
                                    const std::vector<std::vector<std::size_t>>& codes) {
  PatientSequence p;
  p.patient_id = id;
  for (std::size_t i = 0; i < times.size(); ++i) {
    Visit v;
    v.t = times[i];
    for (auto c : codes[i]) v.codes.push_back(synthetic_code_name(c));
    p.visits.push_back(v);
  }
  p.codes = codes;
  return p;
}

inline PatientSequence random_patient(std::size_t p, std::size_t n, Rng& rng, const std::string& id = "R") {
  std::vector<std::int64_t> times;
  std::vector<std::vector<std::size_t>> codes;
  std::int64_t t = 100;
  for (std::size_t i = 0; i < n; ++i) {
    t += 1 + static_cast<std::int64_t>(rng.below(120));
    times.push_back(t);
    std::vector<std::size_t> visit;
    const std::size_t k = 1 + rng.below(4);
    while (visit.size() < k) {
      const std::size_t c = rng.below(p);
      if (std::find(visit.begin(), visit.end(), c) == visit.end()) visit.push_back(c);
    }
    codes.push_back(visit);
  }
  return make_patient(id, times, codes);
}

// Random network with nonzero biases so every parameter is exercised.
inline GruNetworkParams random_network(const NetworkShape& shape, Rng& rng) {
  GruNetworkParams params = init_network(shape, rng);
  for (auto& t : params.tensors())
    for (auto& x : t.data) x += rng.uniform(-0.3, 0.3);
  // Keep the ReLU time head in its active region for most steps.
  params.b_time = 1.0 + rng.uniform(0.0, 0.5);
  return params;
}

// Finite-difference check of backward_patient over every tensor. The
// numeric side runs the long double reference model with the dropout masks
// recorded by the forward pass; step 1e-5, central differences.
inline GradCheckResult gru_gradcheck(std::uint64_t seed, EmbeddingMode mode, double dropout = 0.0,
                                     double l2 = 0.001) {
  Rng rng(seed);
  NetworkShape shape;
  shape.input_codes = shape.output_codes = 12;
  shape.embedding = 6;
  shape.hidden = 8;
  shape.layers = 2;
  shape.mode = mode;
  GruNetworkParams params = random_network(shape, rng);
  const PatientSequence seq = random_patient(12, 4, rng);
  Rng mask_rng(seed * 31 + 7);
  const auto fwd = forward_patient(seq, params, dropout, true, mask_rng);
  GruNetworkParams grads = backward_patient(seq, params, fwd, l2);

  ReferenceModel ref(params);
  const real step = 1e-5L;
  GradCheckResult result;
  std::size_t t = 0;
  for (const auto& g : grads.tensors()) {
    const std::size_t base = ref.tensor_offset(t++);
    for (std::size_t k = 0; k < g.data.size(); ++k) {
      real& x = ref.flat[base + k];
      const real saved = x;
      x = saved + step;
      const real up = ref.loss(seq, fwd, l2);
      x = saved - step;
      const real down = ref.loss(seq, fwd, l2);
      x = saved;
      const double fd = static_cast<double>((up - down) / (2.0L * step));
      const double err = relative_error(g.data[k], fd);
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        char buf[128];
        std::snprintf(buf, sizeof buf, "[%zu] analytic=%.6e numeric=%.6e", k, g.data[k], fd);
        result.worst = g.name + buf;
      }
    }
  }
  return result;
}

// 50 codes. Patients belong to one of 8 topics of 6 codes each (codes 2..49);
// codes 0 and 1 always appear together, in half the visits of topic-0 patients.
inline Cohort planted_corpus(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PatientSequence> patients;
  for (std::size_t n = 0; n < 200; ++n) {
    std::vector<std::int64_t> times;
    std::vector<std::vector<std::size_t>> codes;
    const std::size_t topic = n % 8;
    std::vector<std::size_t> repertoire;
    for (std::size_t k = 0; k < 6; ++k) repertoire.push_back(2 + 6 * topic + k);
    for (std::size_t v = 0; v < 8; ++v) {
      times.push_back(static_cast<std::int64_t>(10 * v + 1));
      std::vector<std::size_t> visit;
      if (topic == 0 && rng.uniform() < 0.5) visit = {0, 1};
      while (visit.size() < 3) {
        const std::size_t c = repertoire[rng.below(repertoire.size())];
        if (std::find(visit.begin(), visit.end(), c) == visit.end()) visit.push_back(c);
      }
      codes.push_back(visit);
    }
    patients.push_back(make_patient("S" + std::to_string(n), times, codes));
  }
  CodeVocabulary vocab = numbered_vocab(50);
  return make_cohort(std::move(patients), &vocab);
}

}  // namespace doctorai::testing
