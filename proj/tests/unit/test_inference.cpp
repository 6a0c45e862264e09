#include "cocon/inference.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace cocon;
using ag::Matrix;

namespace {

CnnConfig toy_cnn(std::size_t vocab) {
  CnnConfig c;
  c.vocab_size = vocab;
  c.max_len = 8;
  c.embed_dim = 5;
  c.filters = 6;
  c.width = 3;
  c.stride = 2;
  c.out_dim = 7;
  return c;
}

AggKindWeights uniform(FeatureKind kind, std::size_t k) {
  AggKindWeights w;
  w.logits.assign(k, 0.0);
  w.mask = agg_mask(kind, k);
  return w;
}

std::vector<Dialogue> corpus() {
  SynthConfig sc;
  sc.n_dialogues = 12;
  return synth_corpus(sc, 5);
}

ModelBundle make_bundle(GeneratorVariant v, std::uint64_t seed = 1) {
  auto data = corpus();
  Vocabulary vocab = build_vocab(data, 1, 1000, 8);
  const FeatureMode mode = variant_mode(v);
  GeneratorConfig gc;
  gc.variant = v;
  gc.cnn = toy_cnn(vocab.size());
  gc.context_dim = 6;
  gc.h0_hidden = 7;
  gc.h0_dim = 5;
  gc.hidden = 6;
  gc.topic_dim = uses_topic(v) ? 4 : 0;
  gc.persona_dim = uses_persona(v) ? 3 : 0;
  std::optional<ExtractorModel> topic, persona;
  AggWeights agg;
  if (uses_topic(v)) {
    ExtractorConfig ec;
    ec.mode = mode;
    ec.cnn = toy_cnn(vocab.size());
    ec.feature_dim = 4;
    ec.matcher_hidden = 8;
    topic.emplace(ec, seed + 10);
    agg.topic = uniform(FeatureKind::kTopic, 4);
  }
  if (uses_persona(v)) {
    ExtractorConfig ec;
    ec.kind = FeatureKind::kPersona;
    ec.mode = mode;
    ec.cnn = toy_cnn(vocab.size());
    ec.feature_dim = 3;
    ec.matcher_hidden = 8;
    persona.emplace(ec, seed + 20);
    agg.persona = uniform(FeatureKind::kPersona, 4);
  }
  return ModelBundle{GeneratorModel(gc, seed), std::move(topic), std::move(persona), agg, vocab};
}

std::vector<Turn> first_turns(std::size_t n) {
  auto data = corpus();
  return {data[0].turns.begin(), data[0].turns.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<std::vector<int>> encode(const InferenceEngine& e, const std::vector<Turn>& turns) {
  std::vector<std::vector<int>> out;
  for (const auto& t : turns) out.push_back(encode_utterance(t, e.vocab()));
  return out;
}

}  // namespace

TEST_SUITE("inference") {
  TEST_CASE("override parsing") {
    auto o = parse_override("T-17=1");
    CHECK(o.kind == FeatureKind::kTopic);
    CHECK(o.index == 17);
    CHECK(o.value == 1);
    auto p = parse_override("persona-3=0");
    CHECK(p.kind == FeatureKind::kPersona);
    CHECK(p.value == 0);
    CHECK(to_string(parse_override(to_string(o))) == to_string(o));
    for (const char* bad : {"T17=1", "X-1=1", "T-1=2", "T--1=1", "T-1"}) CHECK_THROWS_AS(parse_override(bad), std::invalid_argument);
  }

  TEST_CASE("aggregation of identical turns returns their features") {
    InferenceEngine e(make_bundle(GeneratorVariant::kTP));
    auto t = first_turns(1);
    std::vector<Turn> same(4, t[0]);
    auto ctx = encode(e, same);
    auto f = e.aggregate_features(ctx, FeatureKind::kTopic);
    Matrix one = extract_matrix(*e.bundle().topic, std::span(ctx).subspan(0, 1));
    for (std::size_t j = 0; j < f.size(); ++j) CHECK(f[j] == doctest::Approx(one(0, static_cast<Eigen::Index>(j))).epsilon(1e-12));
  }

  TEST_CASE("aggregation with all weight on one turn") {
    auto bundle = make_bundle(GeneratorVariant::kTP);
    bundle.agg.topic->mask = {1, 0, 0, 0};
    InferenceEngine e(std::move(bundle));
    auto ctx = encode(e, first_turns(4));
    Matrix each = extract_matrix(*e.bundle().topic, ctx);
    auto f = e.aggregate_features(ctx, FeatureKind::kTopic);
    for (std::size_t j = 0; j < f.size(); ++j) CHECK(f[j] == each(0, static_cast<Eigen::Index>(j)));
  }

  TEST_CASE("hard aggregation rounds the weighted sum at 0.5") {
    auto bundle = make_bundle(GeneratorVariant::kTPBin);
    bundle.agg.topic->mask = {1, 1, 0, 0};
    bundle.agg.topic->logits = {std::log(0.6), std::log(0.4), 0.0, 0.0};
    InferenceEngine e(std::move(bundle));
    auto ctx = encode(e, first_turns(4));
    Matrix each = extract_matrix(*e.bundle().topic, ctx);
    auto f = e.aggregate_features(ctx, FeatureKind::kTopic);
    for (std::size_t j = 0; j < f.size(); ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      const double mix = 0.6 * each(0, c) + 0.4 * each(1, c);
      CHECK(f[j] == (mix >= 0.5 ? 1.0 : 0.0));
    }
  }

  TEST_CASE("responses are deterministic and overrides touch only their index") {
    InferenceEngine e(make_bundle(GeneratorVariant::kTP));
    auto ctx = encode(e, first_turns(4));
    auto a = e.respond(ctx, {}), b = e.respond(ctx, {});
    CHECK(a.ids == b.ids);
    CHECK(a.text == b.text);
    CHECK(a.diagnostics.f_in.size() == 7);
    CHECK(a.diagnostics.f_out.size() == 7);

    FeatureOverride o{FeatureKind::kPersona, 1, 1};
    FeatureOverride list[] = {o};
    auto c = e.respond(ctx, list);
    for (std::size_t j = 0; j < 7; ++j) {
      if (j == e.feature_offset(FeatureKind::kPersona) + 1) {
        CHECK(c.diagnostics.f_in[j] == 1.0);
      } else {
        CHECK(c.diagnostics.f_in[j] == a.diagnostics.f_in[j]);
      }
    }
    FeatureOverride out_of_range[] = {{FeatureKind::kTopic, 4, 1}};
    CHECK_THROWS_AS(e.respond(ctx, out_of_range), std::invalid_argument);
  }

  TEST_CASE("S2S rejects overrides") {
    InferenceEngine e(make_bundle(GeneratorVariant::kS2S));
    auto ctx = encode(e, first_turns(4));
    CHECK(e.respond(ctx, {}).diagnostics.f_in.empty());
    FeatureOverride list[] = {{FeatureKind::kTopic, 0, 1}};
    CHECK_THROWS_WITH(e.respond(ctx, list), doctest::Contains("variant has no features"));
  }

  TEST_CASE("T variant has no persona block") {
    InferenceEngine e(make_bundle(GeneratorVariant::kT));
    CHECK(e.feature_dim(FeatureKind::kTopic) == 4);
    CHECK_THROWS(e.feature_offset(FeatureKind::kPersona));
  }

  TEST_CASE("explicit contexts must have exactly K turns") {
    InferenceEngine e(make_bundle(GeneratorVariant::kTP));
    auto four = first_turns(4);
    CHECK_NOTHROW(generate_response(e, four));
    auto three = first_turns(3);
    CHECK_THROWS(generate_response(e, three));
  }

  TEST_CASE("short histories are left-padded, long ones keep the last K") {
    InferenceEngine e(make_bundle(GeneratorVariant::kTP));
    auto two = first_turns(2);
    auto ctx = e.encode_context(two);
    REQUIRE(ctx.size() == 4);
    CHECK(ctx[0] == std::vector<int>(8, Vocabulary::kPad));
    CHECK(ctx[3] == encode_utterance(two[1], e.vocab()));
    auto six = first_turns(6);
    auto last = e.encode_context(six);
    CHECK(last[0] == encode_utterance(six[2], e.vocab()));
  }

  TEST_CASE("sessions alternate speakers and mark generated turns") {
    InferenceEngine e(make_bundle(GeneratorVariant::kTP));
    auto seed = first_turns(4);
    for (std::size_t future : {4u, 7u}) {
      auto s = generate_session(e, seed, future);
      REQUIRE(s.size() == 4 + future);
      for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(s[i].turn.speaker == static_cast<int>(i % 2));
        CHECK(s[i].generated == (i >= 4));
        CHECK(s[i].diagnostics.has_value() == (i >= 4));
      }
      auto j = nlohmann::json::parse(session_to_json("x", s));
      CHECK(j["turns"].size() == 4 + future);
      CHECK(j["turns"][4]["generated"] == true);
      CHECK(j["turns"][4]["diagnostics"].contains("f_in"));
      CHECK_FALSE(j["turns"][0].contains("generated"));
      // Generated turns still parse as corpus records.
      CHECK_NOTHROW(parse_dialogue(session_to_json("x", s)));
    }
    CHECK_THROWS(generate_session(e, first_turns(3), 2));
    CHECK_THROWS(generate_session(e, seed, 0));
  }

  TEST_CASE("chat toggles persist, reset clears, bad commands change nothing") {
    InferenceEngine e(make_bundle(GeneratorVariant::kTP));
    ChatSession chat(e);
    auto r = chat.step("/toggle T-2 on");
    CHECK(r.ok);
    chat.step("hello there");
    chat.step("how are you");
    REQUIRE(chat.history().size() == 4);
    CHECK(chat.history()[1].generated);
    CHECK(chat.history()[1].diagnostics->f_in[2] == 1.0);
    CHECK(chat.history()[3].diagnostics->f_in[2] == 1.0);
    CHECK(chat.overrides().size() == 1);

    chat.step("/toggle T-2 off");
    CHECK(chat.overrides().size() == 1);
    CHECK(chat.overrides()[0].value == 0);
    CHECK(chat.step("/features").ok);

    auto before = chat.history().size();
    auto bad = chat.step("/frob");
    CHECK_FALSE(bad.ok);
    CHECK(bad.text.find("/toggle") != std::string::npos);
    CHECK(chat.history().size() == before);
    CHECK_FALSE(chat.step("/toggle T-99 on").ok);
    CHECK_FALSE(chat.step("/toggle T-1 maybe").ok);
    CHECK(chat.overrides().size() == 1);

    test::TempDir dir("chat");
    CHECK(chat.step("/save " + (dir / "s.jsonl").string()).ok);
    std::ifstream in(dir / "s.jsonl");
    std::string line;
    std::getline(in, line);
    CHECK(nlohmann::json::parse(line)["turns"].size() == before);

    chat.step("/reset");
    CHECK(chat.history().empty());
    CHECK(chat.overrides().empty());
  }

  TEST_CASE("chat loop stops on /quit") {
    InferenceEngine e(make_bundle(GeneratorVariant::kT));
    std::istringstream in("hi\n/help\n/quit\nnever\n");
    std::ostringstream out;
    run_chat(e, in, out);
    CHECK(out.str().find("> ") != std::string::npos);
    CHECK(out.str().find("/toggle") != std::string::npos);
  }

  TEST_CASE("bundles round-trip and detect tampered extractors") {
    test::TempDir dir("bundle");
    {
      auto b = make_bundle(GeneratorVariant::kTP, 3);
      save_bundle(dir.path(), b);
    }
    InferenceEngine a(make_bundle(GeneratorVariant::kTP, 3));
    InferenceEngine b = InferenceEngine::load(dir.path());
    auto ctx = encode(a, first_turns(4));
    CHECK(a.respond(ctx, {}).ids == b.respond(ctx, {}).ids);
    CHECK(a.respond(ctx, {}).diagnostics.f_in == b.respond(ctx, {}).diagnostics.f_in);

    CHECK_THROWS_WITH(load_bundle(dir / "nope"), doctest::Contains("checkpoint not found"));
    auto other = make_bundle(GeneratorVariant::kTP, 9);
    other.topic->save(dir / "extractors" / "topic");
    CHECK_THROWS(load_bundle(dir.path()));
  }

  TEST_CASE("engine rejects mismatched parts") {
    auto b = make_bundle(GeneratorVariant::kTP);
    b.topic.reset();
    CHECK_THROWS(InferenceEngine(std::move(b)));
    auto c = make_bundle(GeneratorVariant::kTP);
    c.agg.k = 3;
    CHECK_THROWS(InferenceEngine(std::move(c)));
  }
}
