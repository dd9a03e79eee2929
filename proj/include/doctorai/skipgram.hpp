#pragma once

// Skip-gram with negative sampling over per-patient code streams. The
// resulting input-side vectors initialize the network's embedding matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "doctorai/errors.hpp"
#include "doctorai/gru.hpp"
#include "doctorai/io.hpp"
#include "doctorai/tensor.hpp"
#include "doctorai/vocab.hpp"
#include "json.hpp"

namespace doctorai {

struct SkipgramConfig {
  std::size_t dim = 100;
  std::size_t window = 5;
  std::size_t epochs = 5;
  std::size_t negative_samples = 5;
  double learning_rate = 0.025;
  std::uint64_t seed = 0;
};

inline void validate(const SkipgramConfig& c) {
  if (c.dim < 1 || c.window < 1 || c.negative_samples < 1 || c.epochs < 1)
    throw InvalidArgument("SkipgramConfig: dim, window, epochs and negative_samples must be at least 1");
  if (!(c.learning_rate > 0.0)) throw InvalidArgument("SkipgramConfig: learning_rate must be positive");
}

struct EmbeddingTable {
  std::vector<std::string> codes;  // row order
  Matrix vectors;                  // p x dim
};

using CodeStream = std::vector<std::size_t>;

// Concatenates each patient's visits in time order, shuffling codes within a
// visit. Streams never cross patients.
inline std::vector<CodeStream> emit_code_stream(const Cohort& cohort, Rng& rng) {
  if (cohort.patients.empty()) throw InsufficientDataError("emit_code_stream: empty cohort");
  std::vector<CodeStream> streams;
  streams.reserve(cohort.size());
  for (const auto& p : cohort.patients) {
    CodeStream s;
    for (const auto& visit : p.codes) {
      std::vector<std::size_t> v = visit;
      rng.shuffle(v);
      s.insert(s.end(), v.begin(), v.end());
    }
    streams.push_back(std::move(s));
  }
  return streams;
}

// Calls f(center, context) for every positive pair within `window` positions.
template <typename F>
void for_each_positive_pair(const CodeStream& stream, std::size_t window, F&& f) {
  const std::size_t n = stream.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= window ? i - window : 0;
    const std::size_t hi = std::min(n - 1, i + window);
    for (std::size_t j = lo; j <= hi; ++j)
      if (j != i) f(stream[i], stream[j]);
  }
}

namespace detail {

// Cumulative unigram^(3/4) table; draws by binary search.
class NegativeSampler {
 public:
  NegativeSampler(const std::vector<CodeStream>& streams, std::size_t vocab_size) : cumulative_(vocab_size) {
    std::vector<double> counts(vocab_size, 0.0);
    for (const auto& s : streams)
      for (auto c : s) counts.at(c) += 1.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < vocab_size; ++i) {
      acc += std::pow(counts[i], 0.75);
      cumulative_[i] = acc;
    }
    if (!(acc > 0.0)) throw InsufficientDataError("skipgram: streams contain no codes");
  }

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) --it;
    return static_cast<std::size_t>(it - cumulative_.begin());
  }

 private:
  std::vector<double> cumulative_;
};

inline double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

}  // namespace detail

// SGD with a learning rate decaying linearly to 1e-4 of its initial value.
// epoch_loss, when given, receives the mean negative-sampling loss per
// positive pair for each epoch.
inline Matrix train_skipgram(const std::vector<CodeStream>& streams, std::size_t vocab_size,
                             const SkipgramConfig& config, std::vector<double>* epoch_loss = nullptr) {
  validate(config);
  if (streams.empty() || vocab_size == 0) throw InsufficientDataError("train_skipgram: no streams");
  const detail::NegativeSampler sampler(streams, vocab_size);
  Rng rng(config.seed);
  const std::size_t dim = config.dim;
  Matrix in(vocab_size, dim), out(vocab_size, dim);
  for (auto& x : in.span()) x = rng.uniform(-0.5, 0.5) / static_cast<double>(dim);

  std::size_t tokens = 0;
  for (const auto& s : streams) tokens += s.size();
  const double total = static_cast<double>(tokens * config.epochs);
  std::size_t processed = 0;
  std::vector<double> grad_in(dim);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss = 0.0;
    std::size_t pairs = 0;
    for (const auto& s : streams) {
      for (std::size_t i = 0; i < s.size(); ++i, ++processed) {
        const double lr = config.learning_rate * std::max(1e-4, 1.0 - static_cast<double>(processed) / total);
        const std::size_t center = s[i];
        const std::size_t lo = i >= config.window ? i - config.window : 0;
        const std::size_t hi = std::min(s.size() - 1, i + config.window);
        for (std::size_t j = lo; j <= hi; ++j) {
          if (j == i) continue;
          const std::size_t context = s[j];
          double* v = in.row(center);
          std::fill(grad_in.begin(), grad_in.end(), 0.0);
          for (std::size_t k = 0; k <= config.negative_samples; ++k) {
            std::size_t target;
            double label;
            if (k == 0) {
              target = context;
              label = 1.0;
            } else {
              target = sampler.draw(rng);
              if (target == context) continue;
              label = 0.0;
            }
            double* u = out.row(target);
            double score = 0.0;
            for (std::size_t d = 0; d < dim; ++d) score += v[d] * u[d];
            loss -= label > 0.0 ? detail::log_sigmoid(score) : detail::log_sigmoid(-score);
            const double g = lr * (label - sigmoid(score));
            for (std::size_t d = 0; d < dim; ++d) {
              grad_in[d] += g * u[d];
              u[d] += g * v[d];
            }
          }
          for (std::size_t d = 0; d < dim; ++d) v[d] += grad_in[d];
          ++pairs;
        }
      }
    }
    if (epoch_loss) epoch_loss->push_back(pairs ? loss / static_cast<double>(pairs) : 0.0);
  }
  if (!all_finite(in.span())) throw DivergenceError("train_skipgram: embeddings became non-finite");
  return in;
}

inline EmbeddingTable train_skipgram(const Cohort& cohort, const SkipgramConfig& config,
                                     std::vector<double>* epoch_loss = nullptr) {
  Rng stream_rng(config.seed ^ 0x3c6ef372fe94f82bULL);
  const auto streams = emit_code_stream(cohort, stream_rng);
  return {cohort.vocab.codes(), train_skipgram(streams, cohort.vocab.size(), config, epoch_loss)};
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

// Copies table rows into W_emb by code; every vocabulary code must be present.
inline void load_embedding_rows(GruNetworkParams& params, const CodeVocabulary& vocab, const EmbeddingTable& table) {
  if (table.vectors.cols() != params.embedding())
    throw DimensionError("embedding table dimension differs from the network embedding size");
  if (vocab.size() != params.input_codes()) throw DimensionError("vocabulary size differs from the network input size");
  CodeVocabulary table_vocab(table.codes);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto row = table_vocab.find(vocab.code(i));
    if (!row) throw MappingError(vocab.code(i));
    std::copy_n(table.vectors.row(*row), table.vectors.cols(), params.W_emb.row(i));
  }
}

inline constexpr int kEmbeddingFormatVersion = 1;

inline std::string serialize_embeddings(const EmbeddingTable& table) {
  nlohmann::json j;
  j["version"] = kEmbeddingFormatVersion;
  j["p"] = table.vectors.rows();
  j["dim"] = table.vectors.cols();
  j["codes"] = table.codes;
  j["data"] = io::encode_doubles(table.vectors.span());
  return j.dump() + "\n";
}

inline EmbeddingTable parse_embeddings(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError(std::string("embedding file: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kEmbeddingFormatVersion)
      throw UnsupportedVersionError("embedding file version " + j.at("version").dump() + " is not supported");
    const auto p = j.at("p").get<std::size_t>();
    const auto dim = j.at("dim").get<std::size_t>();
    EmbeddingTable t;
    t.codes = j.at("codes").get<std::vector<std::string>>();
    if (t.codes.size() != p) throw CorruptionError("embedding file: code list length differs from p");
    t.vectors = Matrix(p, dim, io::decode_doubles(j.at("data").get<std::string>(), p * dim));
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("embedding file: ") + e.what());
  }
}

inline void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_embeddings(table));
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) { return parse_embeddings(io::read_file(path)); }

}  // namespace doctorai
