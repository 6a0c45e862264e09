#pragma once

// Test-time generation: AGG_F feature aggregation from the source turns,
// feature overrides, single responses, rolled multi-turn sessions and the
// chat REPL backend.

#include "cocon/corpus.hpp"
#include "cocon/extractor.hpp"
#include "cocon/generator.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cocon {

struct FeatureOverride {
  FeatureKind kind = FeatureKind::kTopic;
  std::size_t index = 0;
  int value = 1;  // 0 or 1
};

/// "T-17=1", "P-3=0", also "topic-17=1". Throws std::invalid_argument.
FeatureOverride parse_override(std::string_view text);
std::string to_string(const FeatureOverride& o);

struct ResponseDiagnostics {
  std::vector<double> f_in;   // features fed to the generator, after overrides
  std::vector<double> f_out;  // re-extracted from the response (pre-rounding)
};

struct Response {
  std::vector<int> ids;
  std::string text;
  ResponseDiagnostics diagnostics;
};

/// Anything that answers a K-turn context under feature overrides and
/// reports the features going in and coming out.
class FeatureResponder {
 public:
  virtual ~FeatureResponder() = default;
  /// `context` holds K encoded utterances.
  virtual Response respond(std::span<const std::vector<int>> context,
                           std::span<const FeatureOverride> overrides) const = 0;
  /// Column offset of `kind` in the feature vector; throws if absent.
  virtual std::size_t feature_offset(FeatureKind kind) const = 0;
  virtual std::size_t feature_dim(FeatureKind kind) const = 0;
};

/// Everything a trained model directory holds.
struct ModelBundle {
  GeneratorModel generator;
  std::optional<ExtractorModel> topic, persona;
  AggWeights agg;
  Vocabulary vocab;
};

/// Layout: config.json, params.bin, vocab.txt, agg.json, extractors.json
/// (hashes) and extractors/{topic,persona}/.
void save_bundle(const std::filesystem::path& dir, const ModelBundle& bundle);
/// Throws std::runtime_error("checkpoint not found: ...") if dir is missing,
/// or if a stored extractor hash does not match.
ModelBundle load_bundle(const std::filesystem::path& dir);

class InferenceEngine : public FeatureResponder {
 public:
  explicit InferenceEngine(ModelBundle bundle);
  static InferenceEngine load(const std::filesystem::path& dir) { return InferenceEngine(load_bundle(dir)); }

  const ModelBundle& bundle() const { return bundle_; }
  const Vocabulary& vocab() const { return bundle_.vocab; }
  std::size_t context_turns() const { return bundle_.generator.config().context_turns; }
  GeneratorVariant variant() const { return bundle_.generator.variant(); }

  /// Weighted sum of per-turn extractor outputs; rounded at 0.5 (ties to
  /// one) for hard extractors.
  std::vector<double> aggregate_features(std::span<const std::vector<int>> context, FeatureKind kind) const;
  /// All kinds the variant uses, topic first. Empty for S2S.
  std::vector<double> context_features(std::span<const std::vector<int>> context) const;
  /// Throws std::invalid_argument("variant has no features") for S2S, or for
  /// out-of-range indices.
  void apply_overrides(std::vector<double>& features, std::span<const FeatureOverride> overrides) const;

  Response respond(std::span<const std::vector<int>> context,
                   std::span<const FeatureOverride> overrides) const override;
  std::size_t feature_offset(FeatureKind kind) const override;
  std::size_t feature_dim(FeatureKind kind) const override;

  /// Encodes turns; shorter histories are left-padded with empty turns,
  /// longer ones keep the most recent K.
  std::vector<std::vector<int>> encode_context(std::span<const Turn> turns) const;
  /// Re-extracted features of an encoded utterance (pre-rounding).
  std::vector<double> extract_features(const std::vector<int>& utterance) const;

 private:
  const ExtractorModel& extractor(FeatureKind kind) const;
  ModelBundle bundle_;
};

/// Response to an explicit context of Turns (must be exactly K).
Response generate_response(const InferenceEngine& engine, std::span<const Turn> context,
                           std::span<const FeatureOverride> overrides = {});

struct SessionTurn {
  Turn turn;
  bool generated = false;
  std::optional<ResponseDiagnostics> diagnostics;
};

/// Seed turns followed by n_future generated turns; each new turn conditions
/// on the most recent K turns. Throws if the seed is shorter than K or
/// n_future < 1.
std::vector<SessionTurn> generate_session(const InferenceEngine& engine, std::span<const Turn> seed,
                                          std::size_t n_future, std::span<const FeatureOverride> overrides = {});

/// One JSONL line in the corpus schema plus per-turn "generated" and
/// "diagnostics".
std::string session_to_json(const std::string& id, std::span<const SessionTurn> turns);

class ChatSession {
 public:
  explicit ChatSession(const InferenceEngine& engine) : engine_(engine) {}

  struct Reply {
    std::string text;
    bool is_command = false;
    bool ok = true;
  };
  /// Plain text: adds the user turn and returns the generated reply.
  /// Commands: /toggle <T|P>-<idx> on|off, /features, /reset, /save <path>.
  Reply step(const std::string& input);

  const std::vector<SessionTurn>& history() const { return history_; }
  const std::vector<FeatureOverride>& overrides() const { return overrides_; }
  static std::string usage();

 private:
  std::vector<Turn> recent_turns() const;
  const InferenceEngine& engine_;
  std::vector<SessionTurn> history_;
  std::vector<FeatureOverride> overrides_;
};

/// Reads lines from `in` until EOF, writing replies to `out`.
void run_chat(const InferenceEngine& engine, std::istream& in, std::ostream& out);

}  // namespace cocon
