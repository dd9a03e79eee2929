#pragma once

// Code grouping, vocabularies, patient sequences, cohort files and the
// train/test split.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/io.hpp"
#include "doctorai/tensor.hpp"
#include "json.hpp"

namespace doctorai {

enum class CodeKind { diagnosis, medication, other };

inline const char* to_string(CodeKind kind) {
  switch (kind) {
    case CodeKind::diagnosis: return "diagnosis";
    case CodeKind::medication: return "medication";
    case CodeKind::other: return "other";
  }
  return "other";
}

// Medication codes are written "RX:<GPI>", procedure and other pass-through
// codes "PR:<code>"; everything else is read as ICD-9.
struct GroupingOptions {
  std::size_t medication_prefix_len = 2;
};

inline constexpr std::string_view kMedicationPrefix = "RX:";
inline constexpr std::string_view kOtherPrefix = "PR:";

namespace detail {

inline bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

// Accepts "<head>", "<head><digits>" or "<head>.<digits>" with at most
// max_tail trailing digits.
inline bool valid_icd_tail(std::string_view tail, std::size_t max_tail) {
  if (tail.empty()) return true;
  if (tail.front() == '.') tail.remove_prefix(1);
  return all_digits(tail) && tail.size() <= max_tail;
}

inline std::string trim_upper(std::string_view raw) {
  std::size_t b = 0, e = raw.size();
  while (b < e && std::isspace(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(raw[e - 1]))) --e;
  std::string out(raw.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

// ICD-9 numeric and V codes collapse to their 3-character category, E codes
// to 4 characters, medication codes to the GPI class prefix.
inline std::string group_code(std::string_view raw, const GroupingOptions& options = {}) {
  const std::string code = detail::trim_upper(raw);
  auto malformed = [&] { return ParseError("malformed code '" + std::string(raw) + "'"); };
  if (code.empty()) throw malformed();

  if (code.starts_with(kMedicationPrefix)) {
    const std::string_view body = std::string_view(code).substr(kMedicationPrefix.size());
    if (options.medication_prefix_len == 0 || body.size() < options.medication_prefix_len) throw malformed();
    if (!std::all_of(body.begin(), body.end(), [](unsigned char c) { return std::isalnum(c); })) throw malformed();
    return std::string(kMedicationPrefix) + std::string(body.substr(0, options.medication_prefix_len));
  }
  if (code.starts_with(kOtherPrefix)) {
    if (code.size() == kOtherPrefix.size()) throw malformed();
    return code;
  }
  const std::string_view s = code;
  if (s.front() == 'V') {
    if (s.size() < 3 || !detail::all_digits(s.substr(1, 2)) || !detail::valid_icd_tail(s.substr(3), 2)) throw malformed();
    return std::string(s.substr(0, 3));
  }
  if (s.front() == 'E') {
    if (s.size() < 4 || !detail::all_digits(s.substr(1, 3)) || !detail::valid_icd_tail(s.substr(4), 1)) throw malformed();
    return std::string(s.substr(0, 4));
  }
  if (s.size() < 3 || !detail::all_digits(s.substr(0, 3)) || !detail::valid_icd_tail(s.substr(3), 2)) throw malformed();
  return std::string(s.substr(0, 3));
}

inline CodeKind kind_of(std::string_view grouped) {
  if (grouped.starts_with(kMedicationPrefix)) return CodeKind::medication;
  if (grouped.starts_with(kOtherPrefix)) return CodeKind::other;
  return CodeKind::diagnosis;
}

class CodeVocabulary {
 public:
  CodeVocabulary() = default;
  explicit CodeVocabulary(std::vector<std::string> codes) {
    for (auto& c : codes) add(c);
  }

  // Returns the index of code, appending it if new.
  std::size_t add(const std::string& code) {
    auto [it, inserted] = index_.try_emplace(code, codes_.size());
    if (inserted) {
      codes_.push_back(code);
      kinds_.push_back(kind_of(code));
    }
    return it->second;
  }

  std::size_t size() const noexcept { return codes_.size(); }
  bool contains(const std::string& code) const { return index_.count(code) != 0; }

  std::optional<std::size_t> find(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) throw UnknownCodeError(code);
    return it->second;
  }

  const std::string& code(std::size_t index) const { return codes_.at(index); }
  CodeKind kind(std::size_t index) const { return kinds_.at(index); }
  const std::vector<std::string>& codes() const noexcept { return codes_; }

  bool operator==(const CodeVocabulary& other) const { return codes_ == other.codes_; }

 private:
  std::vector<std::string> codes_;
  std::vector<CodeKind> kinds_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Visit {
  std::int64_t t = 0;
  std::vector<std::string> codes;
  bool operator==(const Visit&) const = default;
};

// One patient's visits in time order, with code indices resolved against the
// cohort vocabulary. Step i (0-based) carries input x_i and gap d_i; d_0 = 0.
struct PatientSequence {
  std::string patient_id;
  std::vector<Visit> visits;
  std::vector<std::vector<std::size_t>> codes;  // per visit, vocabulary indices

  std::size_t length() const noexcept { return visits.size(); }

  std::int64_t gap_days(std::size_t i) const { return i == 0 ? 0 : visits.at(i).t - visits.at(i - 1).t; }

  // log(1 + days); the network's duration input and the time target.
  double log_gap(std::size_t i) const { return std::log1p(static_cast<double>(gap_days(i))); }

  bool operator==(const PatientSequence&) const = default;
};

struct CohortStats {
  std::size_t patients = 0;
  double mean_visits = 0.0;
  double mean_codes_per_visit = 0.0;
  double mean_gap_days = 0.0;
};

struct Cohort {
  std::vector<PatientSequence> patients;
  CodeVocabulary vocab;
  std::size_t dropped_patients = 0;

  std::size_t size() const noexcept { return patients.size(); }

  CohortStats stats() const {
    CohortStats s;
    s.patients = patients.size();
    std::size_t visits = 0, codes = 0, gaps = 0;
    double gap_total = 0.0;
    for (const auto& p : patients) {
      visits += p.length();
      for (std::size_t i = 0; i < p.length(); ++i) {
        codes += p.codes[i].size();
        if (i > 0) {
          gap_total += static_cast<double>(p.gap_days(i));
          ++gaps;
        }
      }
    }
    if (s.patients) s.mean_visits = static_cast<double>(visits) / static_cast<double>(s.patients);
    if (visits) s.mean_codes_per_visit = static_cast<double>(codes) / static_cast<double>(visits);
    if (gaps) s.mean_gap_days = gap_total / static_cast<double>(gaps);
    return s;
  }
};

// Indices in first-occurrence order over visits, then codes within a visit.
inline CodeVocabulary build_vocabulary(std::span<const Visit> visits) {
  CodeVocabulary vocab;
  for (const auto& v : visits)
    for (const auto& c : v.codes) vocab.add(c);
  return vocab;
}

inline CodeVocabulary build_vocabulary(std::span<const PatientSequence> patients) {
  CodeVocabulary vocab;
  for (const auto& p : patients)
    for (const auto& v : p.visits)
      for (const auto& c : v.codes) vocab.add(c);
  return vocab;
}

inline Vector encode_visit(std::span<const std::string> codes, const CodeVocabulary& vocab) {
  Vector x(vocab.size());
  for (const auto& c : codes) x[vocab.index_of(c)] = 1.0;
  return x;
}

inline Vector multi_hot(std::span<const std::size_t> indices, std::size_t p) {
  Vector x(p);
  for (auto i : indices) x[i] = 1.0;
  return x;
}

inline std::vector<std::string> decode_visit(const Vector& x, const CodeVocabulary& vocab) {
  if (x.size() != vocab.size()) throw DimensionError("decode_visit: vector length differs from vocabulary size");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != 0.0) out.push_back(vocab.code(i));
  return out;
}

// Checks the per-patient invariants: at least two visits, nonempty visits
// without duplicates, strictly increasing timestamps.
inline void validate_patient(const PatientSequence& p) {
  if (p.length() < 2) throw InsufficientDataError("patient " + p.patient_id + " has fewer than two visits");
  if (p.codes.size() != p.visits.size()) throw DimensionError("patient " + p.patient_id + ": code index table size mismatch");
  for (std::size_t i = 0; i < p.length(); ++i) {
    if (p.visits[i].codes.empty()) throw ParseError("patient " + p.patient_id + " has an empty visit");
    if (i > 0 && p.visits[i].t <= p.visits[i - 1].t)
      throw DuplicateTimestampError("patient " + p.patient_id + " has non-increasing timestamps");
  }
}

// Resolves visit codes against vocab (which is extended when grow is set).
inline void index_patient(PatientSequence& p, CodeVocabulary& vocab, bool grow) {
  p.codes.clear();
  p.codes.reserve(p.visits.size());
  for (const auto& v : p.visits) {
    std::vector<std::size_t> idx;
    idx.reserve(v.codes.size());
    for (const auto& c : v.codes) idx.push_back(grow ? vocab.add(c) : vocab.index_of(c));
    p.codes.push_back(std::move(idx));
  }
}

// Builds a cohort from raw patients: codes already grouped, visits already in
// order. Used by the loader and the synthetic generator.
inline Cohort make_cohort(std::vector<PatientSequence> patients, const CodeVocabulary* vocab = nullptr) {
  Cohort cohort;
  if (vocab) cohort.vocab = *vocab;
  for (auto& p : patients) index_patient(p, cohort.vocab, vocab == nullptr);
  cohort.patients = std::move(patients);
  return cohort;
}

inline std::pair<Cohort, Cohort> split_dataset(const Cohort& cohort, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidArgument("split_dataset: train_fraction must be in (0, 1)");
  const std::size_t n = cohort.size();
  if (n < 2) throw InsufficientDataError("split_dataset: need at least two patients");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  Cohort train, test;
  train.vocab = cohort.vocab;
  test.vocab = cohort.vocab;
  for (auto i : train_idx) train.patients.push_back(cohort.patients[i]);
  for (auto i : test_idx) test.patients.push_back(cohort.patients[i]);
  return {std::move(train), std::move(test)};
}

// Parses cohort JSON Lines text. Blank lines are ignored. Patients with fewer
// than two visits are dropped and counted in Cohort::dropped_patients.
inline Cohort parse_cohort(std::string_view text, const CodeVocabulary* vocab = nullptr,
                           const GroupingOptions& grouping = {}) {
  std::vector<PatientSequence> patients;
  std::size_t dropped = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    auto fail = [&](const std::string& what) {
      return ParseError("line " + std::to_string(line_no) + ": " + what);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("invalid JSON (") + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("pid") || !j.contains("visits")) throw fail("expected object with pid and visits");
    if (!j["pid"].is_string()) throw fail("pid must be a string");
    if (!j["visits"].is_array()) throw fail("visits must be an array");
    PatientSequence p;
    p.patient_id = j["pid"].get<std::string>();
    for (const auto& jv : j["visits"]) {
      if (!jv.is_object() || !jv.contains("t") || !jv.contains("codes")) throw fail("visit needs t and codes");
      if (!jv["t"].is_number_integer()) throw fail("visit t must be an integer");
      if (!jv["codes"].is_array()) throw fail("visit codes must be an array");
      Visit v;
      v.t = jv["t"].get<std::int64_t>();
      std::unordered_set<std::string> seen;
      for (const auto& jc : jv["codes"]) {
        if (!jc.is_string()) throw fail("codes must be strings");
        std::string grouped;
        try {
          grouped = group_code(jc.get<std::string>(), grouping);
        } catch (const ParseError& e) {
          throw fail(e.what());
        }
        if (seen.insert(grouped).second) v.codes.push_back(std::move(grouped));
      }
      if (v.codes.empty()) throw fail("visit has no codes");
      p.visits.push_back(std::move(v));
    }
    if (p.visits.size() < 2) {
      ++dropped;
      if (end == text.size()) break;
      continue;
    }
    std::stable_sort(p.visits.begin(), p.visits.end(), [](const Visit& a, const Visit& b) { return a.t < b.t; });
    for (std::size_t i = 1; i < p.visits.size(); ++i)
      if (p.visits[i].t == p.visits[i - 1].t)
        throw DuplicateTimestampError("patient " + p.patient_id + " has two visits at t=" + std::to_string(p.visits[i].t));
    patients.push_back(std::move(p));
    if (end == text.size()) break;
  }
  if (patients.empty()) throw InsufficientDataError("cohort has no patient with at least two visits");
  Cohort cohort = make_cohort(std::move(patients), vocab);
  cohort.dropped_patients = dropped;
  return cohort;
}

inline Cohort load_cohort(const std::filesystem::path& path, const CodeVocabulary* vocab = nullptr,
                          const GroupingOptions& grouping = {}) {
  return parse_cohort(io::read_file(path), vocab, grouping);
}

inline std::string serialize_cohort(const Cohort& cohort) {
  std::string out;
  for (const auto& p : cohort.patients) {
    nlohmann::json j;
    j["pid"] = p.patient_id;
    j["visits"] = nlohmann::json::array();
    for (const auto& v : p.visits) j["visits"].push_back({{"t", v.t}, {"codes", v.codes}});
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string serialize_vocabulary(const CodeVocabulary& vocab) {
  return nlohmann::json(vocab.codes()).dump() + "\n";
}

inline CodeVocabulary parse_vocabulary(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("vocabulary: ") + e.what());
  }
  if (!j.is_array() || j.empty()) throw ParseError("vocabulary must be a nonempty JSON array of strings");
  CodeVocabulary vocab;
  for (const auto& c : j) {
    if (!c.is_string()) throw ParseError("vocabulary entries must be strings");
    const auto before = vocab.size();
    vocab.add(c.get<std::string>());
    if (vocab.size() == before) throw ParseError("vocabulary has a duplicate entry: " + c.get<std::string>());
  }
  return vocab;
}

inline CodeVocabulary load_vocabulary(const std::filesystem::path& path) { return parse_vocabulary(io::read_file(path)); }

inline std::filesystem::path vocabulary_sidecar(const std::filesystem::path& cohort_path) {
  std::filesystem::path p = cohort_path;
  p += ".vocab.json";
  return p;
}

// Writes the cohort and its vocabulary sidecar.
inline void save_cohort(const Cohort& cohort, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_cohort(cohort));
  io::write_file_atomic(vocabulary_sidecar(path), serialize_vocabulary(cohort.vocab));
}

}  // namespace doctorai
