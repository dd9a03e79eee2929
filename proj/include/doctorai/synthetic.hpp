#pragma once

// Synthetic cohorts drawn from a hidden Markov process. Each hidden state has
// its own code-emission distribution and gap distribution, so the next visit
// depends on the patient's recent history rather than on overall code
// frequency alone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"

namespace doctorai {

// Defaults for the means follow the reference cohort's summary statistics:
// 54.61 visits per patient, 3.22 codes per visit, 76.12 days between visits.
struct SyntheticConfig {
  std::size_t n_patients = 2000;
  std::size_t n_hidden_states = 20;
  std::size_t n_codes = 100;
  double mean_visits = 54.61;
  double mean_codes_per_visit = 3.22;
  double mean_gap_days = 76.12;
  std::uint64_t seed = 0;
  // Seeds the hidden process (transitions, emissions, gap means). Cohorts
  // generated with the same process seed share dynamics; unset means `seed`.
  std::optional<std::uint64_t> process_seed;
  std::string id_prefix = "P";
  double gap_shape = 2.0;
  double self_transition = 0.3;
  double transition_concentration = 0.2;
  double emission_leak = 0.05;
  // Each patient has a latent type fixed for life; every code is drawn from
  // the type's distribution with probability type_mix, otherwise from the
  // current state's emission.
  std::size_t n_patient_types = 10;
  double type_mix = 0.5;
  double type_concentration = 0.1;
};

struct SyntheticProcess {
  std::vector<std::string> code_names;
  std::vector<std::vector<double>> transition;  // row-stochastic, S x S
  std::vector<std::vector<double>> emission;    // S x n_codes, rows sum to 1
  std::vector<std::vector<double>> type_emission;  // types x n_codes
  std::vector<double> gap_mean;                 // per state, days
  std::vector<double> stationary;
};

inline std::size_t max_synthetic_codes() { return 999 + 99 + 1000; }

// ICD-9 style names: 001..999, then V01..V99, then E000..E999.
inline std::string synthetic_code_name(std::size_t index) {
  char buf[8];
  if (index < 999) {
    std::snprintf(buf, sizeof buf, "%03zu", index + 1);
  } else if (index < 999 + 99) {
    std::snprintf(buf, sizeof buf, "V%02zu", index - 999 + 1);
  } else if (index < max_synthetic_codes()) {
    std::snprintf(buf, sizeof buf, "E%03zu", index - 999 - 99);
  } else {
    throw InvalidArgument("synthetic_code_name: index out of range");
  }
  return buf;
}

inline void validate(const SyntheticConfig& c) {
  if (c.n_patients < 1 || c.n_hidden_states < 1 || c.n_codes < 1)
    throw InvalidArgument("SyntheticConfig: counts must be at least 1");
  if (c.n_codes > max_synthetic_codes()) throw InvalidArgument("SyntheticConfig: too many codes");
  if (!(c.mean_visits > 0.0) || !(c.mean_codes_per_visit > 0.0) || !(c.mean_gap_days > 0.0))
    throw InvalidArgument("SyntheticConfig: means must be positive");
  if (c.mean_visits < 2.0) throw InvalidArgument("SyntheticConfig: mean_visits must be at least 2");
  if (c.mean_codes_per_visit < 1.0) throw InvalidArgument("SyntheticConfig: mean_codes_per_visit must be at least 1");
  if (!(c.gap_shape > 0.0)) throw InvalidArgument("SyntheticConfig: gap_shape must be positive");
  if (c.self_transition < 0.0 || c.self_transition >= 1.0)
    throw InvalidArgument("SyntheticConfig: self_transition must be in [0, 1)");
  if (!(c.transition_concentration > 0.0)) throw InvalidArgument("SyntheticConfig: concentration must be positive");
  if (c.emission_leak < 0.0 || c.emission_leak >= 1.0) throw InvalidArgument("SyntheticConfig: emission_leak must be in [0, 1)");
  if (c.n_patient_types < 1) throw InvalidArgument("SyntheticConfig: n_patient_types must be at least 1");
  if (!(c.type_mix >= 0.0 && c.type_mix < 1.0)) throw InvalidArgument("SyntheticConfig: type_mix must be in [0, 1)");
  if (!(c.type_concentration > 0.0)) throw InvalidArgument("SyntheticConfig: type_concentration must be positive");
}

namespace detail {

inline std::vector<double> dirichlet(std::size_t n, double alpha, Rng& rng) {
  std::vector<double> out(n);
  double total = 0.0;
  for (auto& x : out) {
    x = rng.gamma(alpha, 1.0);
    total += x;
  }
  if (!(total > 0.0)) {
    out.assign(n, 1.0 / static_cast<double>(n));
    return out;
  }
  for (auto& x : out) x /= total;
  return out;
}

inline std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& t) {
  const std::size_t s = t.size();
  std::vector<double> pi(s, 1.0 / static_cast<double>(s)), next(s);
  for (int iter = 0; iter < 10000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) next[j] += pi[i] * t[i][j];
    double diff = 0.0;
    for (std::size_t j = 0; j < s; ++j) diff += std::abs(next[j] - pi[j]);
    pi.swap(next);
    if (diff < 1e-14) break;
  }
  return pi;
}

}  // namespace detail

inline SyntheticProcess make_synthetic_process(const SyntheticConfig& config) {
  validate(config);
  Rng rng(config.process_seed.value_or(config.seed));
  const std::size_t S = config.n_hidden_states;
  const std::size_t P = config.n_codes;
  SyntheticProcess proc;
  for (std::size_t c = 0; c < P; ++c) proc.code_names.push_back(synthetic_code_name(c));

  proc.transition.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    auto row = detail::dirichlet(S, config.transition_concentration, rng);
    for (auto& x : row) x *= 1.0 - config.self_transition;
    row[s] += config.self_transition;
    proc.transition[s] = std::move(row);
  }

  // Codes are dealt round-robin over states after a shuffle; each state emits
  // mostly its own codes, leaking a little mass to a Zipf background.
  std::vector<std::size_t> order(P);
  for (std::size_t c = 0; c < P; ++c) order[c] = c;
  rng.shuffle(order);
  std::vector<double> background(P);
  double bg_total = 0.0;
  for (std::size_t rank = 0; rank < P; ++rank) {
    background[order[rank]] = 1.0 / static_cast<double>(rank + 1);
    bg_total += background[order[rank]];
  }
  for (auto& b : background) b /= bg_total;

  rng.shuffle(order);
  proc.emission.assign(S, std::vector<double>(P, 0.0));
  for (std::size_t s = 0; s < S; ++s) {
    std::vector<std::size_t> home;
    for (std::size_t k = s % P; k < P; k += S) home.push_back(order[k]);
    if (home.empty()) home.push_back(order[s % P]);
    std::vector<double> w(home.size());
    double total = 0.0;
    for (auto& x : w) {
      x = rng.gamma(1.0, 1.0);
      total += x;
    }
    auto& row = proc.emission[s];
    for (std::size_t k = 0; k < home.size(); ++k) row[home[k]] += (1.0 - config.emission_leak) * w[k] / total;
    for (std::size_t c = 0; c < P; ++c) row[c] += config.emission_leak * background[c];
  }

  proc.stationary = detail::stationary_distribution(proc.transition);
  proc.gap_mean.resize(S);
  double weighted = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    proc.gap_mean[s] = rng.uniform(0.4, 1.6);
    weighted += proc.stationary[s] * proc.gap_mean[s];
  }
  for (auto& g : proc.gap_mean) g *= config.mean_gap_days / weighted;
  for (std::size_t k = 0; k < config.n_patient_types; ++k)
    proc.type_emission.push_back(detail::dirichlet(P, config.type_concentration, rng));
  return proc;
}

inline Cohort generate_synthetic_cohort(const SyntheticConfig& config) {
  const SyntheticProcess proc = make_synthetic_process(config);
  Rng rng(config.seed ^ 0xa5a5a5a5a5a5a5a5ULL);
  const std::size_t P = config.n_codes;
  const double geo_p = config.mean_visits > 2.0 ? 1.0 / (config.mean_visits - 1.0) : 1.0;
  const std::size_t width = std::to_string(config.n_patients).size();

  std::vector<PatientSequence> patients;
  patients.reserve(config.n_patients);
  std::vector<double> weights(P);
  std::vector<double> type_weights(P);
  for (std::size_t n = 0; n < config.n_patients; ++n) {
    PatientSequence p;
    std::string num = std::to_string(n);
    p.patient_id = config.id_prefix + std::string(width - num.size(), '0') + num;
    const std::size_t visits = 2 + static_cast<std::size_t>(rng.geometric(geo_p));
    const std::size_t type = rng.below(config.n_patient_types);
    std::size_t state = rng.categorical(proc.stationary);
    std::int64_t t = 14000 + static_cast<std::int64_t>(rng.below(3650));
    for (std::size_t v = 0; v < visits; ++v) {
      if (v > 0) {
        state = rng.categorical(proc.transition[state]);
        const double gap = rng.gamma(config.gap_shape, proc.gap_mean[state] / config.gap_shape);
        t += std::max<std::int64_t>(1, std::llround(gap));
      }
      std::size_t count = 1 + static_cast<std::size_t>(rng.poisson(config.mean_codes_per_visit - 1.0));
      weights = proc.emission[state];
      type_weights = proc.type_emission[type];
      std::size_t support = 0;
      for (std::size_t c = 0; c < P; ++c) support += weights[c] > 0.0 || type_weights[c] > 0.0;
      count = std::min(count, support);
      Visit visit;
      visit.t = t;
      while (visit.codes.size() < count) {
        const bool from_type = rng.uniform() < config.type_mix;
        auto& source = from_type ? type_weights : weights;
        if (std::none_of(source.begin(), source.end(), [](double w) { return w > 0.0; })) continue;
        const std::size_t c = rng.categorical(source);
        weights[c] = 0.0;
        type_weights[c] = 0.0;
        visit.codes.push_back(proc.code_names[c]);
      }
      p.visits.push_back(std::move(visit));
    }
    patients.push_back(std::move(p));
  }
  return make_cohort(std::move(patients));
}

}  // namespace doctorai
