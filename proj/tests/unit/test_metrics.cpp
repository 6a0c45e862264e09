#include "cocon/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

using namespace cocon;

namespace {

Tokens words(const std::string& s) { return tokenize(s); }

std::vector<EvalPair> random_corpus(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(1, 9), word(0, 5);
  const char* lex[] = {"a", "b", "c", "d", "e", "f"};
  std::vector<EvalPair> out(n);
  for (auto& p : out) {
    for (int i = len(rng); i > 0; --i) p.hypothesis.push_back(lex[word(rng)]);
    for (int i = len(rng); i > 0; --i) p.reference.push_back(lex[word(rng)]);
  }
  return out;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("BLEU worked example") {
    std::vector<EvalPair> p = {{words("a b c d"), words("a b c e")}};
    auto r = bleu(p);
    const double expected = 100 * std::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
    CHECK(r.score == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.raw_precisions[3] == 0.0);
    CHECK(r.raw_zero);
    CHECK(r.brevity_penalty == 1.0);
  }

  TEST_CASE("BLEU and NIST agree with brute-force oracles") {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
      auto corpus = random_corpus(seed, 1 + seed % 7);
      CHECK(bleu(corpus).score == doctest::Approx(test::bleu_oracle(corpus)).epsilon(1e-9));
      CHECK(nist(corpus) == doctest::Approx(test::nist_oracle(corpus)).epsilon(1e-9));
    }
  }

  TEST_CASE("identity and disjoint corpora") {
    std::vector<EvalPair> same = {{words("the cat sat on the mat"), words("the cat sat on the mat")},
                                  {words("a dog barked loudly"), words("a dog barked loudly")}};
    CHECK(bleu(same).score == doctest::Approx(100.0).epsilon(1e-12));
    CHECK_FALSE(bleu(same).raw_zero);
    std::vector<EvalPair> disjoint = {{words("x y z"), words("a b c")}};
    auto r = bleu(disjoint);
    CHECK(r.score == 0.0);
    CHECK(r.raw_zero);
    CHECK(nist(disjoint) == 0.0);
    CHECK_THROWS(bleu(std::vector<EvalPair>{}));
  }

  TEST_CASE("short hypotheses are penalized") {
    std::vector<EvalPair> p = {{words("a b c"), words("a b c d e f")}};
    CHECK(bleu(p).brevity_penalty == doctest::Approx(std::exp(-1.0)));
    std::vector<EvalPair> full = {{words("a b c d e f"), words("a b c d e f")}};
    CHECK(nist(p) < nist(full));
  }

  TEST_CASE("NIST is invariant to duplicating the corpus") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto c = random_corpus(seed + 40, 5);
      auto twice = c;
      twice.insert(twice.end(), c.begin(), c.end());
      CHECK(nist(twice) == doctest::Approx(nist(c)).epsilon(1e-12));
    }
  }

  TEST_CASE("METEOR: identity, stems and fragmentation") {
    Tokens ten = words("one two three four five six seven eight nine ten");
    CHECK(meteor_sentence(ten, ten).score == doctest::Approx(0.9995).epsilon(1e-12));
    CHECK(simple_stem("running") == "run");
    CHECK(simple_stem("run") == "run");
    CHECK(simple_stem("cats") == "cat");
    CHECK(simple_stem("glass") == "glass");
    auto st = meteor_sentence(words("running fast"), words("run fast"));
    CHECK(st.matches == 2);
    CHECK(st.chunks == 1);
    auto swapped = meteor_sentence(words("b a"), words("a b"));
    CHECK(swapped.chunks == 2);
    CHECK(swapped.score < meteor_sentence(words("a b"), words("a b")).score);
    CHECK(meteor_sentence(words("x"), words("y")).score == 0.0);
    CHECK(meteor_sentence({}, words("y")).score == 0.0);
  }

  TEST_CASE("embedding metrics on a 3-dimensional table") {
    EmbeddingTable t;
    t.add("a", {1, 0, 0});
    t.add("b", {0, 1, 0});
    t.add("c", {1, 1, 0});
    std::vector<EvalPair> same = {{words("a b"), words("a b")}};
    auto s = embedding_metrics(same, t);
    CHECK(s.average == doctest::Approx(1.0));
    CHECK(s.greedy == doctest::Approx(1.0));
    CHECK(s.extreme == doctest::Approx(1.0));

    std::vector<EvalPair> p = {{words("a"), words("b")}};
    auto o = embedding_metrics(p, t);
    CHECK(o.average == doctest::Approx(0.0));
    CHECK(o.greedy == doctest::Approx(0.0));

    // hyp "a", ref "c": every measure is cos 45 degrees.
    std::vector<EvalPair> q = {{words("a"), words("c")}};
    auto r = embedding_metrics(q, t);
    CHECK(r.average == doctest::Approx(std::sqrt(0.5)));
    CHECK(r.greedy == doctest::Approx(std::sqrt(0.5)));
    CHECK(r.extreme == doctest::Approx(std::sqrt(0.5)));

    std::vector<EvalPair> oov = {{words("zzz"), words("a")}, {words("a"), words("a")}};
    auto u = embedding_metrics(oov, t);
    CHECK(u.oov_pairs == 1);
    CHECK(u.average == doctest::Approx(0.5));

    test::TempDir dir("emb");
    t.save(dir / "e.txt");
    auto back = EmbeddingTable::load(dir / "e.txt");
    CHECK(back.size() == 3);
    CHECK(*back.find("c") == std::vector<double>{1, 1, 0});
  }

  TEST_CASE("distinct-n and entropy") {
    std::vector<Tokens> h = {words("a b a"), words("a c")};
    CHECK(dist_n(h, 1) == doctest::Approx(3.0 / 5.0));
    CHECK(dist_n(h, 2) == doctest::Approx(3.0 / 3.0));
    std::vector<Tokens> rep = {words("a a a a")};
    CHECK(dist_n(rep, 1) == doctest::Approx(0.25));
    CHECK(ent_n(rep, 1) == 0.0);
    std::vector<Tokens> four = {words("a b c d")};
    CHECK(ent_n(four, 1) == doctest::Approx(std::log(4.0)));
    CHECK(ent_n(four, 4) == 0.0);
    std::vector<Tokens> empty = {Tokens{}};
    CHECK_THROWS(dist_n(empty, 1));
  }

  TEST_CASE("co-occurrence embeddings are deterministic and place neighbours close") {
    std::vector<Dialogue> ds = {test::numbered_dialogue("d", 8)};
    ds[0].turns.push_back(test::turn(0, "red apple red apple red apple"));
    ds[0].turns.push_back(test::turn(1, "blue sky blue sky blue sky"));
    auto a = cooccurrence_embeddings(ds, 4), b = cooccurrence_embeddings(ds, 4);
    CHECK(*a.find("red") == *b.find("red"));
    CHECK(a.dim() == 4);
  }

  TEST_CASE("report JSON round-trip and the human row") {
    std::vector<Tokens> hyp = {words("a b c"), words("d e")}, ref = {words("a b d"), words("d e")};
    auto r = evaluate_corpus(hyp, ref, nullptr);
    CHECK(r.bleu.has_value());
    CHECK_FALSE(r.greedy.has_value());
    CHECK(r.n_pairs == 2);
    auto back = metrics_report_from_json(to_json(r));
    CHECK(*back.bleu == *r.bleu);
    CHECK(*back.nist == *r.nist);
    CHECK(back.dist2 == r.dist2);
    CHECK(back.ent4 == r.ent4);

    auto human = diversity_report(ref);
    CHECK_FALSE(human.bleu.has_value());
    CHECK(human.dist1 == doctest::Approx(dist_n(ref, 1)));
    CHECK_THROWS(evaluate_corpus(hyp, std::span(ref).subspan(0, 1), nullptr));
  }
}
