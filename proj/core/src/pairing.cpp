#include "cocon/pairing.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>
#include <stdexcept>

namespace cocon {

std::string to_string(FeatureKind kind) { return kind == FeatureKind::kTopic ? "topic" : "persona"; }

FeatureKind parse_feature_kind(std::string_view text) {
  if (text == "topic" || text == "T" || text == "t") return FeatureKind::kTopic;
  if (text == "persona" || text == "P" || text == "p") return FeatureKind::kPersona;
  throw std::invalid_argument("unknown feature kind: " + std::string(text));
}

std::vector<std::pair<int, int>> admissible_positive_pairs(int turns, FeatureKind kind,
                                                           const PairingOptions& options) {
  std::vector<std::pair<int, int>> out;
  for (int i = 1; i <= turns; ++i) {
    for (int j = i + options.min_gap + 1; j <= turns; ++j) {
      bool same_speaker = (j - i) % 2 == 0;
      if (kind == FeatureKind::kPersona && !same_speaker) continue;
      if (kind == FeatureKind::kTopic && options.cross_speaker_topic_positives && same_speaker) continue;
      out.emplace_back(i, j);
    }
  }
  return out;
}

namespace {

using Rng = std::mt19937_64;

std::size_t uniform(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

PairExample make_example(const Dialogue& a, int ia, const Dialogue& b, int ib, int y, FeatureKind kind,
                         const Vocabulary& vocab) {
  PairExample ex;
  ex.s = encode_utterance(a.turns[static_cast<std::size_t>(ia - 1)], vocab);
  ex.t = encode_utterance(b.turns[static_cast<std::size_t>(ib - 1)], vocab);
  ex.y = y;
  ex.kind = kind;
  ex.s_ref = {a.id, ia};
  ex.t_ref = {b.id, ib};
  return ex;
}

void check_even(std::size_t n_pairs) {
  if (n_pairs == 0 || n_pairs % 2 != 0) throw std::invalid_argument("n_pairs must be a positive even number");
}

}  // namespace

PairSet make_topic_pairs(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t n_pairs,
                         std::uint64_t seed, const PairingOptions& options) {
  check_even(n_pairs);
  if (dialogues.size() < 2) throw std::invalid_argument("topic pairs need at least 2 dialogues");
  PairSet out;
  std::vector<std::size_t> eligible;
  std::vector<std::vector<std::pair<int, int>>> admissible(dialogues.size());
  for (std::size_t d = 0; d < dialogues.size(); ++d) {
    admissible[d] = admissible_positive_pairs(static_cast<int>(dialogues[d].turns.size()), FeatureKind::kTopic, options);
    if (admissible[d].empty()) {
      ++out.dialogues_without_positives;
    } else {
      eligible.push_back(d);
    }
  }
  if (eligible.empty()) {
    throw std::invalid_argument("no dialogue admits a topic positive (needs two turns more than " +
                                std::to_string(options.min_gap) + " apart)");
  }
  Rng rng(seed);
  const std::size_t half = n_pairs / 2;
  out.pairs.reserve(n_pairs);
  for (std::size_t k = 0; k < half; ++k) {
    std::size_t d = eligible[uniform(rng, eligible.size())];
    auto [i, j] = admissible[d][uniform(rng, admissible[d].size())];
    out.pairs.push_back(make_example(dialogues[d], i, dialogues[d], j, 1, FeatureKind::kTopic, vocab));
  }
  for (std::size_t k = 0; k < half; ++k) {
    std::size_t a = uniform(rng, dialogues.size());
    std::size_t b = uniform(rng, dialogues.size() - 1);
    if (b >= a) ++b;
    int ia = 1 + static_cast<int>(uniform(rng, dialogues[a].turns.size()));
    int ib = 1 + static_cast<int>(uniform(rng, dialogues[b].turns.size()));
    out.pairs.push_back(make_example(dialogues[a], ia, dialogues[b], ib, 0, FeatureKind::kTopic, vocab));
  }
  return out;
}

PairSet make_persona_pairs(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t n_pairs,
                           std::uint64_t seed, const PairingOptions& options) {
  check_even(n_pairs);
  PairSet out;
  std::vector<std::size_t> eligible, with_negatives;
  std::vector<std::vector<std::pair<int, int>>> admissible(dialogues.size());
  for (std::size_t d = 0; d < dialogues.size(); ++d) {
    admissible[d] =
        admissible_positive_pairs(static_cast<int>(dialogues[d].turns.size()), FeatureKind::kPersona, options);
    if (admissible[d].empty()) {
      ++out.dialogues_without_positives;
    } else {
      eligible.push_back(d);
    }
    if (dialogues[d].turns.size() >= 2) with_negatives.push_back(d);
  }
  if (eligible.empty()) {
    throw std::invalid_argument("no dialogue admits a persona positive (needs two same-speaker turns more than " +
                                std::to_string(options.min_gap) + " apart)");
  }
  Rng rng(seed);
  const std::size_t half = n_pairs / 2;
  out.pairs.reserve(n_pairs);
  for (std::size_t k = 0; k < half; ++k) {
    std::size_t d = eligible[uniform(rng, eligible.size())];
    auto [i, j] = admissible[d][uniform(rng, admissible[d].size())];
    out.pairs.push_back(make_example(dialogues[d], i, dialogues[d], j, 1, FeatureKind::kPersona, vocab));
  }
  for (std::size_t k = 0; k < half; ++k) {
    const Dialogue& dlg = dialogues[with_negatives[uniform(rng, with_negatives.size())]];
    const auto turns = dlg.turns.size();
    // Odd offsets give the other speaker.
    int i = 1 + static_cast<int>(uniform(rng, turns));
    int j;
    do {
      j = 1 + static_cast<int>(uniform(rng, turns));
    } while ((j - i) % 2 == 0);
    out.pairs.push_back(make_example(dlg, i, dlg, j, 0, FeatureKind::kPersona, vocab));
  }
  return out;
}

std::vector<PairExample> shuffle_and_order(std::vector<PairExample> pairs, std::uint64_t seed) {
  Rng rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  std::bernoulli_distribution swap(0.5);
  for (auto& p : pairs) {
    if (swap(rng)) {
      std::swap(p.s, p.t);
      std::swap(p.s_ref, p.t_ref);
    }
  }
  return pairs;
}

void dump_pairs(const std::filesystem::path& path, std::span<const PairExample> pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : pairs) {
    nlohmann::json j = {{"s_ref", p.s_ref.dialogue_id + "#" + std::to_string(p.s_ref.turn)},
                        {"t_ref", p.t_ref.dialogue_id + "#" + std::to_string(p.t_ref.turn)},
                        {"y", p.y},
                        {"kind", to_string(p.kind)}};
    out << j.dump() << '\n';
  }
}

}  // namespace cocon
