#pragma once

// Dialogue data model, JSONL ingestion, vocabulary, splits and the synthetic
// corpus generator with planted topics and personas.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cocon {

struct Turn {
  int speaker = 0;  // 0 or 1
  std::string text;
  std::vector<std::string> tokens;
};

struct PlantedTruth {
  std::vector<int> topic_ids;
  std::array<int, 2> persona_ids{0, 1};
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;
  std::optional<PlantedTruth> truth;
};

/// Lowercases, splits on whitespace and peels leading/trailing punctuation
/// off each chunk as separate tokens ("hello," -> "hello", ",").
std::vector<std::string> tokenize(std::string_view text);

struct ParseError {
  std::size_t line = 0;
  std::string message;
};

struct LoadResult {
  std::vector<Dialogue> dialogues;
  std::size_t skipped_short = 0;
  std::vector<ParseError> errors;
};

/// Reads the JSONL dialogue schema. Throws std::runtime_error if the file
/// cannot be opened; malformed lines are recorded and skipped.
LoadResult load_dialogues(const std::filesystem::path& path, std::size_t min_turns = 8);
/// Parses one JSONL record; throws std::invalid_argument on schema errors.
Dialogue parse_dialogue(std::string_view json_line);
std::string dialogue_to_json(const Dialogue& d);
void save_dialogues(const std::filesystem::path& path, std::span<const Dialogue> dialogues);

struct CorpusSplit {
  std::vector<Dialogue> train, valid, test;
};

/// Deterministic shuffled split. Valid and test sizes are floor(n * ratio);
/// the remainder goes to train.
CorpusSplit split_corpus(std::vector<Dialogue> dialogues, std::array<double, 3> ratios,
                         std::uint64_t seed);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kReserved = 4;

  Vocabulary();
  /// Tokens in id order, excluding the reserved ones.
  explicit Vocabulary(std::vector<std::string> tokens, std::size_t max_len = 30);

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  std::size_t max_len() const { return max_len_; }
  void set_max_len(std::size_t n) { max_len_ = n; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line in id order (reserved tokens included), first line
  /// is "#max_len <n>".
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  std::string hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t max_len_ = 30;
};

/// Frequency-ranked vocabulary from token counts; ties by lexicographic order.
Vocabulary build_vocab(std::span<const Dialogue> train, std::size_t min_count,
                       std::size_t max_size, std::size_t max_len = 30);

/// Right-padded / truncated id sequence of length vocab.max_len().
std::vector<int> encode_utterance(const Turn& turn, const Vocabulary& vocab);
/// BOS + first max_len tokens + EOS, padded to max_len + 2.
std::vector<int> encode_target(const Turn& turn, const Vocabulary& vocab);
/// Joins ids with spaces, stopping at EOS and skipping PAD/BOS.
std::string decode_ids(std::span<const int> ids, const Vocabulary& vocab);

/// Applies tokenize() to every turn whose token list is empty.
void tokenize_all(std::vector<Dialogue>& dialogues);

struct PersonaStyle {
  std::string name;
  std::vector<std::string> openers;
  std::vector<std::string> closers;
  std::vector<std::string> interleave;
};

struct SynthConfig {
  std::size_t n_dialogues = 200;
  std::size_t n_topics = 4;
  std::size_t n_personas = 6;
  std::size_t turns = 8;
  std::size_t topic_vocab_size = 24;
  /// Each topic's vocabulary is partitioned into this many equal word
  /// clusters; a dialogue draws from one cluster per topic.
  std::size_t subtopics = 4;
  double two_topic_prob = 0.3;
  double interleave_prob = 0.2;
  std::size_t min_topic_tokens = 3;
  std::size_t max_topic_tokens = 6;
};

/// Built-in persona style sets; sets beyond the built-in list are generated.
std::vector<PersonaStyle> persona_styles(std::size_t n_personas);
/// Disjoint per-topic vocabularies.
std::vector<std::vector<std::string>> topic_vocabularies(std::size_t n_topics, std::size_t size);

/// Pure function of (config, seed).
std::vector<Dialogue> synth_corpus(const SynthConfig& config, std::uint64_t seed);

}  // namespace cocon
