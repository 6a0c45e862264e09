#pragma once

// Feature interpretability: representative n-grams per feature, mutual
// information against planted labels, toggle success auditing and raw
// feature export.

#include "cocon/corpus.hpp"
#include "cocon/extractor.hpp"
#include "cocon/inference.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cocon {

/// One utterance prepared for analysis.
struct Sentence {
  std::string id;  // "<dialogue id>#<1-based turn>"
  std::vector<std::string> tokens;
  std::vector<int> ids;     // encoded with the model vocabulary
  std::vector<int> labels;  // planted labels for the kind; empty without truth
};

/// Topic labels are the dialogue's topic ids; persona labels the speaker's
/// persona id.
std::vector<Sentence> collect_sentences(std::span<const Dialogue> dialogues, const Vocabulary& vocab,
                                        FeatureKind kind);

// --- n-grams ------------------------------------------------------------------

struct NgramFeatureProfile {
  std::string ngram;  // tokens joined by single spaces
  std::size_t occurrences = 0;  // sentences containing it
  double mean_activation = 0;   // of the feature the list belongs to
};

struct NgramReport {
  std::size_t qualifying = 0;  // n-grams meeting the occurrence threshold
  /// Per feature index, the top_k n-grams by mean activation, ties broken
  /// by lexicographic n-gram.
  std::vector<std::vector<NgramFeatureProfile>> per_feature;
};

struct NgramConfig {
  std::size_t n_max = 4;
  std::size_t min_occurrence = 20;
  std::size_t top_k = 10;
};

/// `features` is sentences.size() x L.
NgramReport ngram_report(const ag::Matrix& features, std::span<const Sentence> sentences, const NgramConfig& config);
NgramReport ngram_report(const ExtractorModel& extractor, std::span<const Sentence> sentences,
                         const NgramConfig& config);

// --- alignment ----------------------------------------------------------------

struct AlignmentReport {
  std::vector<int> label_values;  // sorted distinct labels
  /// mi[j][l]: MI (nats) between binarized feature j and the indicator of
  /// label_values[l].
  std::vector<std::vector<double>> mi;
  std::vector<std::size_t> best_feature;  // per label
  std::vector<double> best_mi;            // per label
  std::vector<double> baseline_mi;        // per label: mean over permutations of the best MI
  double mean_best_mi = 0;
  double mean_baseline_mi = 0;
  std::size_t permutations = 0;
};

/// MI between two binary sequences, in nats.
double binary_mutual_information(std::span<const char> a, std::span<const char> b);

/// Features binarized at 0.5. Throws if any sentence has no labels.
AlignmentReport alignment_score(const ag::Matrix& features, std::span<const Sentence> sentences,
                                std::size_t permutations = 20, std::uint64_t seed = 1);
AlignmentReport alignment_score(const ExtractorModel& extractor, std::span<const Sentence> sentences,
                                std::size_t permutations = 20, std::uint64_t seed = 1);

// --- toggling -----------------------------------------------------------------

struct ToggleReport {
  std::size_t contexts = 0;
  std::size_t eligible = 0;   // aggregate feature inactive before toggling
  std::size_t successes = 0;  // toggled feature active in F(u~)
  std::size_t base_active = 0;  // active in F(u~) without toggling, among eligible
  double success_rate = 0;
  double base_rate = 0;
};

/// Throws std::invalid_argument if no context is eligible.
ToggleReport toggle_success_rate(const FeatureResponder& responder, std::span<const std::vector<std::vector<int>>> contexts,
                                 FeatureKind kind, std::size_t index);

/// Responder whose output features are exactly its (overridden) input
/// features. Input feature j is 1 iff token id 4 + j appears in the context.
class FeatureCopyStub : public FeatureResponder {
 public:
  FeatureCopyStub(std::size_t topic_dim, std::size_t persona_dim) : topic_dim_(topic_dim), persona_dim_(persona_dim) {}
  Response respond(std::span<const std::vector<int>> context,
                   std::span<const FeatureOverride> overrides) const override;
  std::size_t feature_offset(FeatureKind kind) const override;
  std::size_t feature_dim(FeatureKind kind) const override;

 private:
  std::size_t topic_dim_, persona_dim_;
};

// --- export -------------------------------------------------------------------

/// Header "id\tlabel\tf0..f{L-1}"; labels comma-joined (empty if none).
void export_features(const std::filesystem::path& path, const ag::Matrix& features,
                     std::span<const Sentence> sentences);
void export_features(const std::filesystem::path& path, const ExtractorModel& extractor,
                     std::span<const Sentence> sentences);

struct FeatureTable {
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  ag::Matrix features;
};
FeatureTable read_feature_tsv(const std::filesystem::path& path);

}  // namespace cocon
