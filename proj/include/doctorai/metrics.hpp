#pragma once

// Top-k recall, R^2 on log gaps, whole-cohort evaluation, the recall curve
// over history length and the perplexity probe.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/gru.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"
#include "json.hpp"

namespace doctorai {

// Scores over the output vocabulary for one predicted visit, plus the
// predicted log(1 + days) gap when the model predicts time.
struct PredictionRanking {
  Vector scores;
  std::optional<double> log_gap;

  // Indices of the k best scores; ties go to the lower index.
  std::vector<std::size_t> top_k(std::size_t k) const {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    auto better = [&](std::size_t a, std::size_t b) {
      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
  }
};

// A model, as far as evaluation is concerned: rankings for visits 1..n-1 of
// a patient, each computed from the visits before it.
template <typename F>
concept Predictor = requires(const F& f, const PatientSequence& seq) {
  { f(seq) } -> std::convertible_to<std::vector<PredictionRanking>>;
};

// |top-k ∩ truth| / |truth|; nullopt for an empty truth set (the visit is
// skipped rather than scored).
inline std::optional<double> top_k_recall(const PredictionRanking& ranking, std::span<const std::size_t> truth,
                                          std::size_t k) {
  if (k < 1) throw InvalidArgument("top_k_recall: k must be at least 1");
  if (truth.empty()) return std::nullopt;
  const auto top = ranking.top_k(k);
  std::size_t hits = 0;
  for (auto t : truth)
    if (std::find(top.begin(), top.end(), t) != top.end()) ++hits;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

inline double r_squared(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("r_squared: length mismatch");
  if (truth.size() < 2) throw UndefinedMetricError("r_squared: need at least two targets");
  double mean = 0.0;
  for (double t : truth) mean += t;
  mean /= static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) throw UndefinedMetricError("r_squared: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

// R^2 on log(1 + days) values; both inputs are already in that space.
inline double r_squared_log(std::span<const double> predicted_log_gaps, std::span<const double> true_log_gaps) {
  return r_squared(predicted_log_gaps, true_log_gaps);
}

inline std::vector<std::size_t> default_ks() { return {10, 20, 30}; }

struct MetricReport {
  std::vector<std::size_t> ks;
  std::vector<double> recall;
  std::vector<double> recall_stderr;
  std::optional<double> r2;
  std::size_t visits = 0;    // predicted visits that entered the recall average
  std::size_t patients = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["patients"] = patients;
    j["visits"] = visits;
    nlohmann::json rec = nlohmann::json::object(), se = nlohmann::json::object();
    for (std::size_t i = 0; i < ks.size(); ++i) {
      rec["recall@" + std::to_string(ks[i])] = recall[i];
      se["recall@" + std::to_string(ks[i])] = recall_stderr[i];
    }
    j["recall"] = rec;
    j["stderr"] = se;
    j["r2"] = r2 ? nlohmann::json(*r2) : nlohmann::json(nullptr);
    return j;
  }

  std::string csv() const {
    std::ostringstream out;
    out.precision(17);
    for (std::size_t i = 0; i < ks.size(); ++i) out << "recall@" << ks[i] << ',';
    out << "r2\n";
    for (double r : recall) out << r << ',';
    if (r2) out << *r2;
    out << '\n';
    return out.str();
  }
};

namespace detail {

struct MeanAccumulator {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  // Standard error of the mean with the n - 1 variance estimator.
  double stderr_() const {
    if (n < 2) return 0.0;
    const double m = mean();
    const double var = std::max(0.0, (sum_sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1));
    return std::sqrt(var / static_cast<double>(n));
  }
};

}  // namespace detail

// Averages recall@k uniformly over every predicted visit of every patient,
// and R^2 over every predicted gap when the model predicts time.
template <Predictor Model>
MetricReport evaluate_model(const Model& model, const Cohort& cohort, std::vector<std::size_t> ks = default_ks()) {
  if (ks.empty()) throw InvalidArgument("evaluate_model: no k values");
  MetricReport report;
  report.ks = ks;
  std::vector<detail::MeanAccumulator> acc(ks.size());
  std::vector<double> pred_gaps, true_gaps;
  bool time_model = true;
  for (const auto& seq : cohort.patients) {
    const std::vector<PredictionRanking> rankings = model(seq);
    if (rankings.size() + 1 != seq.length()) throw DimensionError("evaluate_model: predictor returned the wrong number of visits");
    ++report.patients;
    for (std::size_t i = 0; i < rankings.size(); ++i) {
      const auto& truth = seq.codes[i + 1];
      bool counted = false;
      for (std::size_t q = 0; q < ks.size(); ++q) {
        const auto r = top_k_recall(rankings[i], truth, ks[q]);
        if (r) {
          acc[q].add(*r);
          counted = true;
        }
      }
      if (counted) ++report.visits;
      if (rankings[i].log_gap) {
        pred_gaps.push_back(*rankings[i].log_gap);
        true_gaps.push_back(seq.log_gap(i + 1));
      } else {
        time_model = false;
      }
    }
  }
  for (const auto& a : acc) {
    report.recall.push_back(a.mean());
    report.recall_stderr.push_back(a.stderr_());
  }
  if (time_model && !pred_gaps.empty()) {
    try {
      report.r2 = r_squared_log(pred_gaps, true_gaps);
    } catch (const UndefinedMetricError&) {
      report.r2.reset();
    }
  }
  return report;
}

struct CurvePoint {
  std::size_t index = 0;  // number of visits seen before the predicted visit
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;
};

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "index,mean,stderr\n";
  for (const auto& c : curve) out << c.index << ',' << c.mean << ',' << c.stderr_ << '\n';
  return out.str();
}

// Mean and standard error of recall@k at each history length across
// patients with at least min_visits visits. Point j (1-based) is the
// prediction made after seeing j visits.
template <Predictor Model>
std::vector<CurvePoint> recall_by_history_length(const Model& model, const Cohort& cohort, std::size_t min_visits,
                                                 std::size_t k) {
  std::vector<detail::MeanAccumulator> acc;
  std::size_t qualifying = 0;
  for (const auto& seq : cohort.patients) {
    if (seq.length() < min_visits) continue;
    ++qualifying;
    const auto rankings = model(seq);
    if (rankings.size() + 1 != seq.length()) throw DimensionError("recall_by_history_length: wrong prediction count");
    if (acc.size() < rankings.size()) acc.resize(rankings.size());
    for (std::size_t i = 0; i < rankings.size(); ++i) {
      const auto r = top_k_recall(rankings[i], seq.codes[i + 1], k);
      if (r) acc[i].add(*r);
    }
  }
  if (qualifying == 0)
    throw InsufficientDataError("recall_by_history_length: no patient has at least " + std::to_string(min_visits) + " visits");
  std::vector<CurvePoint> curve;
  for (std::size_t i = 0; i < acc.size(); ++i)
    if (acc[i].n) curve.push_back({i + 1, acc[i].mean(), acc[i].stderr_(), acc[i].n});
  return curve;
}

// exp of the Shannon entropy (natural log) of a probability vector.
inline double perplexity(std::span<const double> probs) {
  double h = 0.0;
  for (double q : probs)
    if (q > 0.0) h -= q * std::log(q);
  return std::exp(h);
}

inline constexpr std::int64_t kProbeGapDays = 76;

// Feeds a synthetic patient whose visits all carry the single code `code`,
// `repeats` times at a constant gap, and returns the perplexity of each
// predictive distribution (repeats - 1 values).
template <Predictor Model>
std::vector<double> perplexity_probe(const Model& model, const CodeVocabulary& vocab, const std::string& code,
                                     std::size_t repeats, std::int64_t gap_days = kProbeGapDays) {
  if (repeats < 2) throw InvalidArgument("perplexity_probe: need at least two repeats to make a prediction");
  if (gap_days < 1) throw InvalidArgument("perplexity_probe: gap must be positive");
  const std::size_t index = vocab.index_of(code);
  PatientSequence seq;
  seq.patient_id = "probe:" + code;
  for (std::size_t i = 0; i < repeats; ++i) {
    seq.visits.push_back({static_cast<std::int64_t>(i) * gap_days, {code}});
    seq.codes.push_back({index});
  }
  std::vector<double> out;
  for (const auto& r : model(seq)) out.push_back(perplexity(r.scores.span()));
  return out;
}

// Evaluation-mode network as a Predictor.
class GruPredictor {
 public:
  explicit GruPredictor(const GruNetworkParams& params) : params_(&params) {}

  std::vector<PredictionRanking> operator()(const PatientSequence& seq) const {
    Rng unused(0);
    const auto fwd = forward_patient(seq, *params_, 0.0, false, unused);
    std::vector<PredictionRanking> out;
    out.reserve(fwd.predictions.size());
    for (const auto& p : fwd.predictions) out.push_back({p.y_hat, p.log_gap});
    return out;
  }

 private:
  const GruNetworkParams* params_;
};

}  // namespace doctorai
