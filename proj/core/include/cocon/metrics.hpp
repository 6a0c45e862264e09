#pragma once

// Automatic evaluation: BLEU, NIST, simplified METEOR, embedding-based
// Greedy/Average/Extreme, and Dist-n / Ent-n diversity.

#include "cocon/corpus.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cocon {

using Tokens = std::vector<std::string>;

struct EvalPair {
  Tokens hypothesis;
  Tokens reference;
};

struct BleuResult {
  double score = 0;  // 0-100
  std::vector<double> precisions;      // smoothed for n >= 2
  std::vector<double> raw_precisions;  // unsmoothed
  double brevity_penalty = 0;
  std::size_t hyp_length = 0, ref_length = 0;
  bool raw_zero = false;  // unsmoothed BLEU would be 0
};

/// Corpus BLEU with add-one smoothing on n >= 2 precisions. Throws on an
/// empty corpus.
BleuResult bleu(std::span<const EvalPair> pairs, std::size_t max_n = 4);

/// Corpus NIST with information weights from the references and the NIST
/// brevity factor.
double nist(std::span<const EvalPair> pairs, std::size_t max_n = 4);

/// Suffix stripper used for METEOR-s stem matches (s, es, ed, ing).
std::string simple_stem(const std::string& word);

struct MeteorStats {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double score = 0;
};
/// Exact then stem matching, greedy left to right.
MeteorStats meteor_sentence(const Tokens& hypothesis, const Tokens& reference);
/// Mean of the per-pair scores.
double meteor_simple(std::span<const EvalPair> pairs);

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  /// One token per line followed by its space-separated components.
  static EmbeddingTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  void add(const std::string& token, std::vector<double> vec);
  /// nullptr for OOV tokens (callers use the zero vector).
  const std::vector<double>* find(const std::string& token) const;
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<double>> vectors_;
  std::vector<std::string> order_;
};

/// Word vectors from a truncated eigendecomposition of the positive PMI
/// co-occurrence matrix (window within an utterance). Deterministic.
EmbeddingTable cooccurrence_embeddings(std::span<const Dialogue> dialogues, std::size_t dim, std::size_t window = 2,
                                       std::size_t min_count = 1);

struct EmbeddingScores {
  double greedy = 0, average = 0, extreme = 0;
  std::size_t oov_pairs = 0;  // pairs scored 0 because a side had no known token
};
EmbeddingScores embedding_metrics(std::span<const EvalPair> pairs, const EmbeddingTable& table);

/// Unique / total n-grams pooled over the corpus. Throws if there are none.
double dist_n(std::span<const Tokens> hypotheses, std::size_t n);
/// Entropy (natural log) of the pooled n-gram distribution.
double ent_n(std::span<const Tokens> hypotheses, std::size_t n = 4);

struct MetricsReport {
  std::optional<double> bleu, meteor, nist, greedy, average, extreme;
  double dist1 = 0, dist2 = 0, ent4 = 0;
  std::size_t n_pairs = 0;
  std::size_t oov_pairs = 0;
  bool bleu_raw_zero = false;
};

/// Full battery. Without a table the embedding metrics stay empty. Throws if
/// the lists differ in length or are empty.
MetricsReport evaluate_corpus(std::span<const Tokens> hypotheses, std::span<const Tokens> references,
                              const EmbeddingTable* table);
/// Diversity-only row for reference texts.
MetricsReport diversity_report(std::span<const Tokens> texts);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

}  // namespace cocon
