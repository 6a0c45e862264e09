#include "cocon/corpus.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

using namespace cocon;

namespace {

std::string eight_turn_line(const std::string& id, int turns = 8) {
  std::ostringstream s;
  s << R"({"id":")" << id << R"(","turns":[)";
  for (int j = 0; j < turns; ++j) s << (j ? "," : "") << R"({"speaker":)" << j % 2 << R"(,"text":"turn )" << j + 1 << "\"}";
  s << "]}";
  return s.str();
}

double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end()), u = sa;
  u.insert(sb.begin(), sb.end());
  std::size_t inter = 0;
  for (const auto& x : sa) inter += sb.count(x);
  return u.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(u.size());
}

std::vector<Dialogue> dialogues(std::size_t n) {
  std::vector<Dialogue> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(test::numbered_dialogue("d" + std::to_string(i), 8));
  return out;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("tokenizer lowercases and peels punctuation") {
    CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
    CHECK(tokenize("  i 'm (fine)  ") == std::vector<std::string>{"i", "'m", "(", "fine", ")"});
    CHECK(tokenize("").empty());
  }

  TEST_CASE("loading well-formed, short and malformed lines") {
    test::TempDir dir("corpus");
    {
      std::ofstream(dir / "ok.jsonl") << eight_turn_line("a") << '\n';
      std::ofstream(dir / "short.jsonl") << eight_turn_line("b", 7) << '\n';
      std::ofstream(dir / "bad.jsonl") << "not json\n" << eight_turn_line("c") << '\n';
    }
    auto ok = load_dialogues(dir / "ok.jsonl", 8);
    REQUIRE(ok.dialogues.size() == 1);
    CHECK(ok.dialogues[0].turns.size() == 8);
    for (std::size_t j = 0; j < 8; ++j) CHECK(ok.dialogues[0].turns[j].speaker == static_cast<int>(j % 2));

    auto s = load_dialogues(dir / "short.jsonl", 8);
    CHECK(s.dialogues.empty());
    CHECK(s.skipped_short == 1);

    auto bad = load_dialogues(dir / "bad.jsonl", 8);
    REQUIRE(bad.errors.size() == 1);
    CHECK(bad.errors[0].line == 1);
    CHECK(bad.dialogues.size() == 1);

    CHECK_THROWS_AS(load_dialogues(dir / "missing.jsonl"), std::runtime_error);
  }

  TEST_CASE("speaker alternation is enforced") {
    CHECK_THROWS_AS(parse_dialogue(R"({"id":"x","turns":[{"speaker":1,"text":"a"}]})"), std::invalid_argument);
  }

  TEST_CASE("JSONL records round-trip") {
    auto corpus = synth_corpus(SynthConfig{}, 3);
    for (const auto& d : corpus) {
      Dialogue back = parse_dialogue(dialogue_to_json(d));
      CHECK(dialogue_to_json(back) == dialogue_to_json(d));
      REQUIRE(back.truth.has_value());
      CHECK(back.truth->topic_ids == d.truth->topic_ids);
    }
  }

  TEST_CASE("split sizes and determinism") {
    auto s = split_corpus(dialogues(100), {0.8, 0.1, 0.1}, 1);
    CHECK(s.train.size() == 80);
    CHECK(s.valid.size() == 10);
    CHECK(s.test.size() == 10);
    auto again = split_corpus(dialogues(100), {0.8, 0.1, 0.1}, 1);
    for (std::size_t i = 0; i < s.test.size(); ++i) CHECK(s.test[i].id == again.test[i].id);
    auto small = split_corpus(dialogues(10), {0.8, 0.1, 0.1}, 1);
    CHECK(small.train.size() == 8);
    CHECK(small.valid.size() == 1);
    CHECK(small.test.size() == 1);
    std::set<std::string> ids;
    for (const auto* part : {&s.train, &s.valid, &s.test}) {
      for (const auto& d : *part) CHECK(ids.insert(d.id).second);
    }
    CHECK_THROWS(split_corpus(dialogues(2), {0.8, 0.1, 0.1}, 1));
    CHECK_THROWS(split_corpus(dialogues(10), {0.8, 0.1, 0.2}, 1));
  }

  TEST_CASE("vocabulary threshold, truncation and ties") {
    auto make = [](const std::vector<std::string>& texts) {
      Dialogue d;
      d.id = "v";
      for (std::size_t i = 0; i < texts.size(); ++i) d.turns.push_back(test::turn(static_cast<int>(i % 2), texts[i]));
      return std::vector<Dialogue>{d};
    };
    auto data = make({"a a a a a", "b b b", "c"});
    auto v = build_vocab(data, 2, 100);
    CHECK(v.tokens() == std::vector<std::string>{"<pad>", "<unk>", "<bos>", "<eos>", "a", "b"});
    CHECK(build_vocab(data, 1, 1).size() == 5);
    CHECK(build_vocab(data, 1, 1).token(4) == "a");
    auto tie = make({"zeta alpha mid"});
    auto tv = build_vocab(tie, 1, 2);
    CHECK(tv.token(4) == "alpha");
    CHECK(tv.token(5) == "mid");
    CHECK_THROWS(build_vocab(std::vector<Dialogue>{}, 1, 10));
  }

  TEST_CASE("encoding pads, truncates and maps unknowns") {
    Dialogue d;
    d.id = "e";
    d.turns.push_back(test::turn(0, "a b"));
    auto v = build_vocab(std::vector<Dialogue>{d}, 1, 100, 5);
    auto ids = encode_utterance(test::turn(0, "a b zzz"), v);
    CHECK(ids == std::vector<int>{v.id("a"), v.id("b"), Vocabulary::kUnk, Vocabulary::kPad, Vocabulary::kPad});
    CHECK(encode_utterance(test::turn(0, ""), v) == std::vector<int>(5, Vocabulary::kPad));
    auto longer = encode_utterance(test::turn(0, "a b a b a b a"), v);
    CHECK(longer.size() == 5);
    CHECK(longer[4] == v.id("a"));
    auto target = encode_target(test::turn(0, "a b"), v);
    CHECK(target.size() == 7);
    CHECK(target[0] == Vocabulary::kBos);
    CHECK(target[3] == Vocabulary::kEos);
    CHECK(decode_ids(std::vector<int>{v.id("a"), v.id("b"), Vocabulary::kEos, v.id("a")}, v) == "a b");
  }

  TEST_CASE("vocabulary file round-trip keeps reserved ids") {
    test::TempDir dir("vocab");
    Vocabulary v({"x", "y"}, 12);
    v.save(dir / "v.txt");
    auto back = Vocabulary::load(dir / "v.txt");
    CHECK(back.hash() == v.hash());
    CHECK(back.max_len() == 12);
    CHECK(back.id("<pad>") == 0);
    CHECK(back.id("<eos>") == 3);
  }

  TEST_CASE("synthetic corpus is deterministic and well formed") {
    SynthConfig cfg;
    auto a = synth_corpus(cfg, 7), b = synth_corpus(cfg, 7);
    REQUIRE(a.size() == 200);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(dialogue_to_json(a[i]) == dialogue_to_json(b[i]));
    for (const auto& d : a) {
      REQUIRE(d.truth.has_value());
      CHECK(d.truth->persona_ids[0] != d.truth->persona_ids[1]);
      CHECK(d.truth->topic_ids.size() >= 1);
      CHECK(d.truth->topic_ids.size() <= 2);
      for (std::size_t j = 0; j < d.turns.size(); ++j) CHECK(d.turns[j].speaker == static_cast<int>(j % 2));
    }
    SynthConfig one;
    one.n_personas = 1;
    CHECK_THROWS(synth_corpus(one, 1));
  }

  TEST_CASE("topic vocabularies are pairwise disjoint") {
    auto vocabs = topic_vocabularies(4, 24);
    for (std::size_t i = 0; i < vocabs.size(); ++i) {
      for (std::size_t j = i + 1; j < vocabs.size(); ++j) {
        std::set<std::string> a(vocabs[i].begin(), vocabs[i].end());
        for (const auto& w : vocabs[j]) CHECK(a.count(w) == 0);
      }
    }
  }

  TEST_CASE("same-dialogue utterances overlap more than cross-dialogue ones") {
    auto corpus = synth_corpus(SynthConfig{}, 7);
    double same = 0, cross = 0;
    std::size_t ns = 0, nc = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto& t = corpus[i].turns;
      for (std::size_t a = 0; a < t.size(); ++a) {
        for (std::size_t b = a + 1; b < t.size(); ++b, ++ns) same += jaccard(t[a].tokens, t[b].tokens);
      }
      const auto& u = corpus[(i + 1) % corpus.size()].turns;
      for (std::size_t a = 0; a < t.size(); ++a, ++nc) cross += jaccard(t[a].tokens, u[a].tokens);
    }
    CHECK(same / static_cast<double>(ns) > cross / static_cast<double>(nc));
  }

  TEST_CASE("persona style tokens only appear in that persona's turns") {
    auto styles = persona_styles(6);
    REQUIRE(styles[0].name == "abbreviator");
    std::set<std::string> own;
    for (const auto* set : {&styles[0].openers, &styles[0].closers, &styles[0].interleave}) own.insert(set->begin(), set->end());
    std::set<std::string> others;
    for (std::size_t p = 1; p < styles.size(); ++p) {
      for (const auto* set : {&styles[p].openers, &styles[p].closers, &styles[p].interleave}) others.insert(set->begin(), set->end());
    }
    std::set<std::string> exclusive;
    for (const auto& w : own) {
      if (!others.count(w)) exclusive.insert(w);
    }
    CHECK(exclusive.count("u"));
    CHECK(exclusive.count("thx"));
    CHECK(exclusive.count("wats"));
    auto corpus = synth_corpus(SynthConfig{}, 7);
    std::size_t seen = 0;
    for (const auto& d : corpus) {
      for (const auto& t : d.turns) {
        const bool mine = d.truth->persona_ids[static_cast<std::size_t>(t.speaker)] == 0;
        for (const auto& w : t.tokens) {
          if (!exclusive.count(w)) continue;
          CHECK(mine);
          ++seen;
        }
      }
    }
    CHECK(seen > 0);
  }
}
