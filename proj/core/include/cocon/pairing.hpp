#pragma once

// Balanced positive/negative utterance pairs for the topic and persona
// discrimination tasks.

#include "cocon/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cocon {

enum class FeatureKind { kTopic, kPersona };

std::string to_string(FeatureKind kind);
FeatureKind parse_feature_kind(std::string_view text);

struct TurnRef {
  std::string dialogue_id;
  int turn = 0;  // 1-based
};

struct PairExample {
  std::vector<int> s;
  std::vector<int> t;
  int y = 0;
  FeatureKind kind = FeatureKind::kTopic;
  TurnRef s_ref;
  TurnRef t_ref;
};

struct PairingOptions {
  /// Positives must be strictly more than this many turns apart.
  int min_gap = 4;
  /// Topic positives restricted to different speakers.
  bool cross_speaker_topic_positives = false;
};

struct PairSet {
  std::vector<PairExample> pairs;
  /// Dialogues that could not contribute a positive pair.
  std::size_t dialogues_without_positives = 0;
};

/// 1-based (i, j), i < j, index pairs admissible as positives in a dialogue
/// of `turns` turns.
std::vector<std::pair<int, int>> admissible_positive_pairs(int turns, FeatureKind kind,
                                                           const PairingOptions& options = {});

/// n_pairs/2 same-dialogue positives (gap > min_gap) and n_pairs/2 negatives
/// from two distinct dialogues. n_pairs must be even.
PairSet make_topic_pairs(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t n_pairs,
                         std::uint64_t seed, const PairingOptions& options = {});

/// Same-speaker positives (gap > min_gap) and cross-speaker negatives, both
/// within one dialogue.
PairSet make_persona_pairs(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t n_pairs,
                           std::uint64_t seed, const PairingOptions& options = {});

inline PairSet make_pairs(FeatureKind kind, std::span<const Dialogue> dialogues, const Vocabulary& vocab,
                          std::size_t n_pairs, std::uint64_t seed, const PairingOptions& options = {}) {
  return kind == FeatureKind::kTopic ? make_topic_pairs(dialogues, vocab, n_pairs, seed, options)
                                     : make_persona_pairs(dialogues, vocab, n_pairs, seed, options);
}

/// Uniform shuffle; each pair's (s, t) order swapped with probability 0.5.
std::vector<PairExample> shuffle_and_order(std::vector<PairExample> pairs, std::uint64_t seed);

/// Audit dump, one {"s_ref", "t_ref", "y", "kind"} object per line.
void dump_pairs(const std::filesystem::path& path, std::span<const PairExample> pairs);

}  // namespace cocon
