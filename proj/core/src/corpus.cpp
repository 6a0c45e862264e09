#include "cocon/corpus.hpp"

#include "cocon/hash.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace cocon {

using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string chunk;
  auto is_punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
  auto flush = [&]() {
    if (chunk.empty()) return;
    std::size_t b = 0, e = chunk.size();
    std::vector<std::string> trailing;
    // Clitics such as 'm and 's keep their apostrophe.
    auto clitic = [&](std::size_t i) {
      return chunk[i] == '\'' && i + 1 < e && std::isalpha(static_cast<unsigned char>(chunk[i + 1]));
    };
    while (b < e && is_punct(chunk[b]) && !clitic(b)) out.emplace_back(1, chunk[b++]);
    while (e > b && is_punct(chunk[e - 1])) trailing.emplace_back(1, chunk[--e]);
    if (e > b) out.push_back(chunk.substr(b, e - b));
    out.insert(out.end(), trailing.rbegin(), trailing.rend());
    chunk.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      chunk.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

Dialogue parse_dialogue(std::string_view json_line) {
  json j;
  try {
    j = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("record is not an object");
  if (!j.contains("id") || !j["id"].is_string()) throw std::invalid_argument("missing string field 'id'");
  if (!j.contains("turns") || !j["turns"].is_array()) throw std::invalid_argument("missing array field 'turns'");
  Dialogue d;
  d.id = j["id"].get<std::string>();
  for (const auto& t : j["turns"]) {
    if (!t.is_object() || !t.contains("speaker") || !t.contains("text") || !t["speaker"].is_number_integer() ||
        !t["text"].is_string()) {
      throw std::invalid_argument("turn must have integer 'speaker' and string 'text'");
    }
    Turn turn;
    turn.speaker = t["speaker"].get<int>();
    turn.text = t["text"].get<std::string>();
    turn.tokens = tokenize(turn.text);
    d.turns.push_back(std::move(turn));
  }
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    if (d.turns[i].speaker != static_cast<int>(i % 2)) {
      throw std::invalid_argument("speakers must alternate 0,1,0,... (turn " + std::to_string(i + 1) + ")");
    }
  }
  if (j.contains("truth") && !j["truth"].is_null()) {
    const auto& t = j["truth"];
    PlantedTruth truth;
    truth.topic_ids = t.at("topic_ids").get<std::vector<int>>();
    auto p = t.at("persona_ids").get<std::vector<int>>();
    if (p.size() != 2) throw std::invalid_argument("persona_ids must have two entries");
    truth.persona_ids = {p[0], p[1]};
    d.truth = truth;
  }
  return d;
}

std::string dialogue_to_json(const Dialogue& d) {
  json j;
  j["id"] = d.id;
  j["turns"] = json::array();
  for (const auto& t : d.turns) j["turns"].push_back({{"speaker", t.speaker}, {"text", t.text}});
  if (d.truth) {
    j["truth"] = {{"topic_ids", d.truth->topic_ids},
                  {"persona_ids", {d.truth->persona_ids[0], d.truth->persona_ids[1]}}};
  }
  return j.dump();
}

LoadResult load_dialogues(const std::filesystem::path& path, std::size_t min_turns) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dialogue file " + path.string());
  LoadResult result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Dialogue d = parse_dialogue(line);
      if (d.turns.size() < min_turns) {
        ++result.skipped_short;
        continue;
      }
      result.dialogues.push_back(std::move(d));
    } catch (const std::exception& e) {
      result.errors.push_back({lineno, e.what()});
    }
  }
  return result;
}

void save_dialogues(const std::filesystem::path& path, std::span<const Dialogue> dialogues) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& d : dialogues) out << dialogue_to_json(d) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

CorpusSplit split_corpus(std::vector<Dialogue> dialogues, std::array<double, 3> ratios, std::uint64_t seed) {
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  if (dialogues.size() < 3) throw std::invalid_argument("need at least 3 dialogues to split");
  std::mt19937_64 rng(seed);
  std::shuffle(dialogues.begin(), dialogues.end(), rng);
  const auto n = static_cast<double>(dialogues.size());
  // Small epsilon so that e.g. 100 * 0.1 does not floor to 9.
  auto n_valid = static_cast<std::size_t>(std::floor(n * ratios[1] + 1e-9));
  auto n_test = static_cast<std::size_t>(std::floor(n * ratios[2] + 1e-9));
  CorpusSplit split;
  auto it = dialogues.begin();
  auto n_train = dialogues.size() - n_valid - n_test;
  split.train.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_train)));
  it += static_cast<std::ptrdiff_t>(n_train);
  split.valid.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_valid)));
  it += static_cast<std::ptrdiff_t>(n_valid);
  split.test.assign(std::make_move_iterator(it), std::make_move_iterator(dialogues.end()));
  return split;
}

namespace {
const std::array<std::string, 4> kReservedTokens = {"<pad>", "<unk>", "<bos>", "<eos>"};
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::size_t max_len) : max_len_(max_len) {
  tokens_.assign(kReservedTokens.begin(), kReservedTokens.end());
  tokens_.insert(tokens_.end(), std::make_move_iterator(tokens.begin()), std::make_move_iterator(tokens.end()));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token: " + tokens_[i]);
    }
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "#max_len " << max_len_ << '\n';
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string header;
  std::getline(in, header);
  std::size_t max_len = 30;
  if (header.rfind("#max_len ", 0) != 0) throw std::runtime_error("bad vocabulary header in " + path.string());
  max_len = std::stoul(header.substr(9));
  std::vector<std::string> tokens;
  std::string line;
  std::size_t i = 0;
  while (std::getline(in, line)) {
    if (i < kReservedTokens.size()) {
      if (line != kReservedTokens[i]) throw std::runtime_error("bad reserved token in " + path.string());
    } else {
      tokens.push_back(line);
    }
    ++i;
  }
  return Vocabulary(std::move(tokens), max_len);
}

std::string Vocabulary::hash() const {
  Sha256 h;
  h.update(std::to_string(max_len_));
  for (const auto& t : tokens_) {
    h.update(t);
    h.update(std::string_view("\n"));
  }
  return h.hex_digest();
}

Vocabulary build_vocab(std::span<const Dialogue> train, std::size_t min_count, std::size_t max_size,
                       std::size_t max_len) {
  if (train.empty()) throw std::invalid_argument("build_vocab: empty training set");
  std::map<std::string, std::size_t> counts;
  for (const auto& d : train) {
    for (const auto& t : d.turns) {
      for (const auto& tok : t.tokens) ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, c] : counts) {
    if (c >= min_count && std::find(kReservedTokens.begin(), kReservedTokens.end(), tok) == kReservedTokens.end()) {
      ranked.emplace_back(tok, c);
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > max_size) ranked.resize(max_size);
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, c] : ranked) tokens.push_back(tok);
  return Vocabulary(std::move(tokens), max_len);
}

std::vector<int> encode_utterance(const Turn& turn, const Vocabulary& vocab) {
  std::vector<int> ids(vocab.max_len(), Vocabulary::kPad);
  const auto& toks = turn.tokens.empty() && !turn.text.empty() ? tokenize(turn.text) : turn.tokens;
  for (std::size_t i = 0; i < toks.size() && i < ids.size(); ++i) ids[i] = vocab.id(toks[i]);
  return ids;
}

std::vector<int> encode_target(const Turn& turn, const Vocabulary& vocab) {
  std::vector<int> ids(vocab.max_len() + 2, Vocabulary::kPad);
  const auto& toks = turn.tokens.empty() && !turn.text.empty() ? tokenize(turn.text) : turn.tokens;
  ids[0] = Vocabulary::kBos;
  std::size_t n = std::min(toks.size(), vocab.max_len());
  for (std::size_t i = 0; i < n; ++i) ids[i + 1] = vocab.id(toks[i]);
  ids[n + 1] = Vocabulary::kEos;
  return ids;
}

std::string decode_ids(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kPad || id == Vocabulary::kBos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

void tokenize_all(std::vector<Dialogue>& dialogues) {
  for (auto& d : dialogues) {
    for (auto& t : d.turns) {
      if (t.tokens.empty()) t.tokens = tokenize(t.text);
    }
  }
}

std::vector<PersonaStyle> persona_styles(std::size_t n_personas) {
  std::vector<PersonaStyle> styles = {
      {"abbreviator", {"u", "ur"}, {"thx", "lol"}, {"u", "thx", "wats", "ur", "lol"}},
      {"enthusiast", {"wow", "yay"}, {"!", "amazing"}, {"wow", "amazing", "love", "yay", "!"}},
      {"formal", {"indeed", "certainly"}, {"regards", "kindly"}, {"indeed", "certainly", "furthermore", "regards", "kindly"}},
      {"gloomy", {"sigh", "ugh"}, {"meh", "whatever"}, {"sigh", "meh", "ugh", "whatever", "tired"}},
      {"questioner", {"hmm", "why"}, {"?", "really"}, {"hmm", "why", "?", "really", "curious"}},
      {"gamer", {"gg", "yo"}, {"xd", "noob"}, {"gg", "pog", "noob", "xd", "yo"}},
  };
  if (n_personas <= styles.size()) {
    styles.resize(n_personas);
    return styles;
  }
  for (std::size_t p = styles.size(); p < n_personas; ++p) {
    std::string base = "style" + std::to_string(p) + "x";
    std::vector<std::string> toks;
    for (int k = 0; k < 5; ++k) toks.push_back(base + std::to_string(k));
    styles.push_back({"persona" + std::to_string(p), {toks[0], toks[1]}, {toks[2], toks[3]}, toks});
  }
  return styles;
}

std::vector<std::vector<std::string>> topic_vocabularies(std::size_t n_topics, std::size_t size) {
  static const std::vector<std::string> kNames = {"sport", "music", "food", "travel", "tech",   "movie",
                                                  "pet",   "money", "game", "school", "health", "garden"};
  std::vector<std::vector<std::string>> vocabs(n_topics);
  for (std::size_t k = 0; k < n_topics; ++k) {
    std::string name = k < kNames.size() ? kNames[k] : "topic" + std::to_string(k) + "w";
    for (std::size_t j = 0; j < size; ++j) {
      std::string idx = std::to_string(j);
      if (idx.size() < 2) idx.insert(idx.begin(), '0');
      vocabs[k].push_back(name + idx);
    }
  }
  return vocabs;
}

std::vector<Dialogue> synth_corpus(const SynthConfig& config, std::uint64_t seed) {
  if (config.n_personas < 2) throw std::invalid_argument("synth_corpus: need at least 2 personas");
  if (config.n_topics < 1) throw std::invalid_argument("synth_corpus: need at least 1 topic");
  if (config.subtopics < 1 || config.topic_vocab_size % config.subtopics != 0) {
    throw std::invalid_argument("synth_corpus: topic_vocab_size must be a positive multiple of subtopics");
  }
  if (config.min_topic_tokens < 1 || config.min_topic_tokens > config.max_topic_tokens) {
    throw std::invalid_argument("synth_corpus: bad topic token range");
  }
  const auto topics = topic_vocabularies(config.n_topics, config.topic_vocab_size);
  const auto styles = persona_styles(config.n_personas);
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  std::bernoulli_distribution two_topics(config.n_topics > 1 ? config.two_topic_prob : 0.0);
  std::bernoulli_distribution interleave(config.interleave_prob);

  std::vector<Dialogue> out;
  out.reserve(config.n_dialogues);
  for (std::size_t i = 0; i < config.n_dialogues; ++i) {
    Dialogue d;
    std::ostringstream id;
    id << "synth-" << seed << '-' << i;
    d.id = id.str();

    PlantedTruth truth;
    std::size_t t0 = pick(config.n_topics);
    truth.topic_ids.push_back(static_cast<int>(t0));
    if (two_topics(rng)) {
      std::size_t t1 = pick(config.n_topics - 1);
      if (t1 >= t0) ++t1;
      truth.topic_ids.push_back(static_cast<int>(t1));
    }
    std::size_t p0 = pick(config.n_personas);
    std::size_t p1 = pick(config.n_personas - 1);
    if (p1 >= p0) ++p1;
    truth.persona_ids = {static_cast<int>(p0), static_cast<int>(p1)};

    // One word cluster per topic for the whole dialogue.
    const std::size_t cluster = config.topic_vocab_size / config.subtopics;
    std::vector<std::vector<std::string>> focus;
    for (int t : truth.topic_ids) {
      std::size_t sub = pick(config.subtopics);
      const auto& words = topics[static_cast<std::size_t>(t)];
      focus.emplace_back(words.begin() + static_cast<std::ptrdiff_t>(sub * cluster),
                         words.begin() + static_cast<std::ptrdiff_t>((sub + 1) * cluster));
    }

    for (std::size_t j = 0; j < config.turns; ++j) {
      const auto& style = styles[static_cast<std::size_t>(truth.persona_ids[j % 2])];
      std::vector<std::string> words;
      words.push_back(style.openers[pick(style.openers.size())]);
      std::size_t n_topic = config.min_topic_tokens + pick(config.max_topic_tokens - config.min_topic_tokens + 1);
      for (std::size_t k = 0; k < n_topic; ++k) {
        const auto& f = focus[pick(focus.size())];
        words.push_back(f[pick(f.size())]);
        if (interleave(rng)) words.push_back(style.interleave[pick(style.interleave.size())]);
      }
      words.push_back(style.closers[pick(style.closers.size())]);
      Turn turn;
      turn.speaker = static_cast<int>(j % 2);
      for (std::size_t k = 0; k < words.size(); ++k) {
        if (k) turn.text.push_back(' ');
        turn.text += words[k];
      }
      turn.tokens = tokenize(turn.text);
      d.turns.push_back(std::move(turn));
    }
    d.truth = truth;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace cocon
