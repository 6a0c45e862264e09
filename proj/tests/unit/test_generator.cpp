#include "cocon/generator.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

using namespace cocon;
using ag::Matrix;
using ag::Var;

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

struct Fixture {
  std::vector<Dialogue> corpus;
  Vocabulary vocab;
  std::vector<GenWindow> windows;
  ExtractorModel topic, persona;

  static std::vector<Dialogue> make_corpus() {
    SynthConfig sc;
    sc.n_dialogues = 12;
    return synth_corpus(sc, 3);
  }
  static ExtractorModel make_extractor(FeatureKind kind, std::size_t vocab, std::size_t dim, std::uint64_t seed) {
    ExtractorConfig c;
    c.kind = kind;
    c.cnn = toy_cnn(vocab);
    c.feature_dim = dim;
    return ExtractorModel(c, seed);
  }

  Fixture()
      : corpus(make_corpus()),
        vocab(build_vocab(corpus, 1, 1000, 8)),
        windows(make_windows(corpus, vocab, 4)),
        topic(make_extractor(FeatureKind::kTopic, vocab.size(), 4, 1)),
        persona(make_extractor(FeatureKind::kPersona, vocab.size(), 3, 2)) {}

  GeneratorConfig config(GeneratorVariant v) const {
    GeneratorConfig c;
    c.variant = v;
    c.cnn = toy_cnn(vocab.size());
    c.context_dim = 6;
    c.h0_hidden = 7;
    c.h0_dim = 5;
    c.hidden = 6;
    c.topic_dim = uses_topic(v) ? 4 : 0;
    c.persona_dim = uses_persona(v) ? 3 : 0;
    return c;
  }
  FeatureExtractors extractors() const { return {&topic, &persona}; }

  std::vector<std::vector<int>> contexts(std::size_t n) const {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), windows[i].context.begin(), windows[i].context.end());
    return out;
  }
  std::vector<std::vector<int>> targets(std::size_t n) const {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(windows[i].target);
    return out;
  }
};

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

}  // namespace

TEST_SUITE("generator") {
  TEST_CASE("windows slide over every admissible target") {
    std::vector<Dialogue> ds = {test::numbered_dialogue("d", 8)};
    auto vocab = build_vocab(ds, 1, 100, 4);
    auto w = make_windows(ds, vocab, 4);
    REQUIRE(w.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(w[i].target_turn == static_cast<int>(i + 5));
      CHECK(w[i].context.size() == 4);
      CHECK(w[i].target.size() == 6);
    }
    CHECK(make_windows(ds, vocab, 8).empty());
  }

  TEST_CASE("context encoding and H0 shapes") {
    Fixture fx;
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 1);
    auto ctx = fx.contexts(3);
    Var c = m.encode_context(ctx, 3);
    CHECK(c.rows() == 3);
    CHECK(c.cols() == 6);
    CHECK_THROWS_AS(m.encode_context(ctx, 2), std::invalid_argument);
    auto short_ctx = std::vector<std::vector<int>>(ctx.begin(), ctx.begin() + 3);
    CHECK_THROWS_AS(m.encode_context(short_ctx, 1), std::invalid_argument);

    Var h_a = m.init_hidden(c, ag::constant(Matrix::Zero(3, 7)));
    Var h_b = m.init_hidden(c, ag::constant(Matrix::Ones(3, 7)));
    CHECK(h_a.cols() == 5);
    CHECK((h_a.value() - h_b.value()).cwiseAbs().maxCoeff() > 1e-6);
    CHECK_THROWS(m.init_hidden(c, ag::constant(Matrix::Zero(3, 4))));

    GeneratorModel s2s(fx.config(GeneratorVariant::kS2S), 1);
    CHECK(s2s.init_hidden(s2s.encode_context(ctx, 3), ag::constant(Matrix(3, 0))).rows() == 3);
    CHECK_THROWS(s2s.init_hidden(s2s.encode_context(ctx, 3), ag::constant(Matrix::Zero(3, 4))));
  }

  TEST_CASE("invalid configurations are rejected") {
    Fixture fx;
    auto c = fx.config(GeneratorVariant::kT);
    c.persona_dim = 3;
    CHECK_THROWS(GeneratorModel(c, 1));
    auto s = fx.config(GeneratorVariant::kS2S);
    s.topic_dim = 2;
    CHECK_THROWS(GeneratorModel(s, 1));
    auto h = fx.config(GeneratorVariant::kTP);
    h.init_state = "h0";
    CHECK_THROWS(GeneratorModel(h, 1));
    h.h0_dim = h.hidden;
    CHECK_NOTHROW(GeneratorModel(h, 1));
  }

  TEST_CASE("extractor compatibility checks") {
    Fixture fx;
    auto cfg = fx.config(GeneratorVariant::kTP);
    CHECK_NOTHROW(check_extractors(cfg, fx.extractors()));
    CHECK_THROWS(check_extractors(cfg, {&fx.topic, nullptr}));
    CHECK_THROWS(check_extractors(cfg, {&fx.persona, &fx.persona}));
    CHECK_THROWS(check_extractors(fx.config(GeneratorVariant::kTPBin), fx.extractors()));
  }

  TEST_CASE("uniform output layer gives NLL ln V and PAD tails are ignored") {
    Fixture fx;
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 2);
    m.params().get("out.w").node()->value.setZero();
    m.params().get("out.b").node()->value.setZero();
    Var h0 = m.init_hidden(m.encode_context(fx.contexts(2), 2), ag::constant(random_matrix(2, 7, 1)));
    CHECK(m.loss_mle(h0, fx.targets(2)).scalar() ==
          doctest::Approx(std::log(static_cast<double>(fx.vocab.size()))).epsilon(1e-12));

    GeneratorModel g(fx.config(GeneratorVariant::kTP), 3);
    Var h = g.init_hidden(g.encode_context(fx.contexts(1), 1), ag::constant(random_matrix(1, 7, 2)));
    std::vector<std::vector<int>> plain = {{Vocabulary::kBos, 5, 6, Vocabulary::kEos}};
    std::vector<std::vector<int>> padded = {{Vocabulary::kBos, 5, 6, Vocabulary::kEos, 0, 0, 0}};
    CHECK(g.loss_mle(h, plain).scalar() == doctest::Approx(g.loss_mle(h, padded).scalar()).epsilon(1e-14));
    std::vector<std::vector<int>> too_short = {{Vocabulary::kBos}};
    CHECK_THROWS(g.loss_mle(h, too_short));
  }

  TEST_CASE("straight-through rollout forward equals greedy decoding") {
    Fixture fx;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      GeneratorModel m(fx.config(GeneratorVariant::kTP), seed);
      Var h0 = m.init_hidden(m.encode_context(fx.contexts(5), 5), ag::constant(random_matrix(5, 7, seed)));
      auto greedy = m.greedy_decode(h0.value(), 8);
      for (double tau : {1.0, 0.3, 0.01}) {
        for (bool fb : {false, true}) CHECK(m.rollout_st(h0, 8, tau, fb).tokens == greedy);
      }
    }
  }

  TEST_CASE("first-step selection gradient scales with 1/tau") {
    Fixture fx;
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 4);
    Matrix h0v = random_matrix(3, 5, 9);
    Matrix g = random_matrix(3, static_cast<Eigen::Index>(fx.vocab.size()), 10);
    auto grad_at = [&](double tau) {
      Var h0 = ag::leaf(h0v);
      auto r = m.rollout_st(h0, 4, tau);
      ag::backward(ag::sum(ag::mul(r.selections.front(), ag::constant(g))));
      m.params().zero_grad();
      return Matrix(h0.grad());
    };
    Matrix one = grad_at(1.0), small = grad_at(0.01);
    REQUIRE(one.cwiseAbs().maxCoeff() > 0.0);
    CHECK((small - 100.0 * one).cwiseAbs().maxCoeff() < 1e-9 * small.cwiseAbs().maxCoeff());
  }

  TEST_CASE("EOS first yields an empty response and an all-PAD extractor input") {
    Fixture fx;
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 5);
    m.params().get("out.w").node()->value.setZero();
    auto& b = m.params().get("out.b").node()->value;
    b.setZero();
    b(0, Vocabulary::kEos) = 10.0;
    Matrix h0 = random_matrix(2, 5, 3);
    auto out = m.greedy_decode(h0, 8);
    CHECK(out[0].empty());
    CHECK(out[1].empty());
    auto r = m.rollout_st(ag::constant(h0), 8, 0.5);
    CHECK(r.selections.size() == 1);
    const Matrix& oh = r.utterance_onehots.value();
    CHECK(oh.rows() == 16);
    CHECK((oh.col(Vocabulary::kPad).array() == 1.0).all());
    CHECK(oh.sum() == 16.0);
    CHECK_THROWS(m.greedy_decode(h0, 0));
    CHECK_THROWS(m.rollout_st(ag::constant(h0), 0, 1.0));
    CHECK_THROWS(m.rollout_st(ag::constant(h0), 4, 0.0));
  }

  TEST_CASE("cycle loss values") {
    std::vector<double> a = {0.2, 0.9, 0.4};
    CHECK(loss_cycle(a, a) == 0.0);
    std::vector<double> x = {1, 0}, y = {0.5, 0.5};
    CHECK(loss_cycle(x, y) == doctest::Approx(0.5));
    CHECK_THROWS(loss_cycle(x, a));
  }

  TEST_CASE("cycle loss gradient w.r.t. the one-hot utterance matches finite differences") {
    Fixture fx;
    const auto v = static_cast<Eigen::Index>(fx.vocab.size());
    Var onehots = ag::leaf(random_matrix(2 * 8, v, 4));
    Matrix f_in = random_matrix(2, 7, 5);
    auto loss = [&] {
      Var parts[] = {fx.topic.extract_onehot(onehots, 2).probs, fx.persona.extract_onehot(onehots, 2).probs};
      return ag::mean(ag::rowwise_sqdist(ag::constant(f_in), ag::concat_cols(parts)));
    };
    auto r = test::check_gradients(loss, {onehots}, 1e-6, 200);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-3);
  }

  TEST_CASE("one-hot extractor input agrees with id input") {
    Fixture fx;
    const auto v = static_cast<Eigen::Index>(fx.vocab.size());
    auto utt = fx.windows[0].context;
    Matrix oh = Matrix::Zero(static_cast<Eigen::Index>(utt.size() * 8), v);
    for (std::size_t e = 0; e < utt.size(); ++e) {
      for (std::size_t t = 0; t < 8; ++t) oh(static_cast<Eigen::Index>(e * 8 + t), utt[e][t]) = 1.0;
    }
    Matrix a = fx.topic.extract_onehot(ag::constant(oh), utt.size()).probs.value();
    Matrix b = fx.topic.extract(utt).probs.value();
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("teacher-forced MLE gradient matches finite differences") {
    Fixture fx;
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 6);
    auto ctx = fx.contexts(2);
    auto tgt = fx.targets(2);
    Matrix f = random_matrix(2, 7, 6);
    auto loss = [&] { return m.loss_mle(m.init_hidden(m.encode_context(ctx, 2), ag::constant(f)), tgt); };
    auto r = test::check_gradients(loss, m.params().vars(), 1e-6, 12);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-3);
  }

  TEST_CASE("eta = 0 trains on the MLE objective alone; extractors stay frozen") {
    Fixture fx;
    std::span<const GenWindow> all(fx.windows);
    REQUIRE(all.size() >= 48);
    auto train = all.subspan(0, 32), valid = all.subspan(32, 16);
    GeneratorTrainConfig tc;
    tc.lr = 1e-2;
    tc.max_epochs = 2;
    tc.batch_size = 16;
    tc.eta = 0.0;
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 1);
    auto h = train_generator(m, train, valid, fx.extractors(), tc);
    for (const auto& e : h.epochs) {
      CHECK(e.train_loss == e.train_mle);
      CHECK(e.train_cycle == 0.0);
      CHECK(e.valid_loss == e.valid_mle);
    }

    tc.eta = 0.5;
    GeneratorModel c(fx.config(GeneratorVariant::kTP), 1);
    const auto topic_hash = fx.topic.params().hash();
    auto hc = train_generator(c, train, valid, fx.extractors(), tc);
    CHECK(hc.topic_hash_before == hc.topic_hash_after);
    CHECK(hc.persona_hash_before == hc.persona_hash_after);
    CHECK(fx.topic.params().hash() == topic_hash);
    CHECK(hc.epochs[0].train_cycle > 0.0);
    CHECK(fx.topic.params().vars().front().requires_grad());
    CHECK(hc.epochs[1].tau == doctest::Approx(0.01));

    // A longer schedule than the run: tau stops partway down.
    tc.anneal_epochs = 12;
    GeneratorModel a(fx.config(GeneratorVariant::kTP), 1);
    auto ha = train_generator(a, train, valid, fx.extractors(), tc);
    CHECK(ha.epochs[1].tau == doctest::Approx(st_tau(2, 12)));
    CHECK(ha.epochs[1].tau > 0.05);
    tc.anneal_epochs = 0;

    // S2S has no features, so eta has nothing to act on.
    GeneratorModel s0(fx.config(GeneratorVariant::kS2S), 2), s1(fx.config(GeneratorVariant::kS2S), 2);
    tc.eta = 0.0;
    train_generator(s0, train, valid, {}, tc);
    tc.eta = 0.5;
    train_generator(s1, train, valid, {}, tc);
    CHECK(s0.params().hash() == s1.params().hash());
  }

  TEST_CASE("temperature schedule") {
    CHECK(st_tau(1, 10) == 1.0);
    CHECK(st_tau(10, 10) == doctest::Approx(0.01));
    double prev = 2.0;
    for (std::size_t e = 1; e <= 10; ++e) {
      CHECK(st_tau(e, 10) < prev);
      prev = st_tau(e, 10);
    }
    CHECK(st_tau(1, 1, 0.05) == 0.05);
    CHECK_THROWS(st_tau(1, 5, 0.0));
  }

  TEST_CASE("aggregation weights: simplex, persona mask and recency") {
    const std::size_t k = 4;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::vector<Matrix> windows;
    Matrix recent(200, 6), same_speaker(200, 6);
    for (Eigen::Index n = 0; n < 200; ++n) {
      Matrix f = random_matrix(4, 6, static_cast<std::uint64_t>(n) + 100);
      windows.push_back(f);
      for (Eigen::Index j = 0; j < 6; ++j) {
        recent(n, j) = f(3, j) + noise(rng);
        same_speaker(n, j) = f(2, j) + noise(rng);
      }
    }
    auto topic = fit_agg_weights(windows, recent, k, FeatureKind::kTopic);
    auto w = topic.weights();
    double total = 0;
    for (double x : w) {
      CHECK(x >= 0.0);
      total += x;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(w[3] > 1.0 / static_cast<double>(k));
    CHECK(agg_objective(windows, recent, w) < agg_objective(windows, recent, std::vector<double>(k, 0.25)));

    CHECK(agg_mask(FeatureKind::kPersona, 4) == std::vector<char>{1, 0, 1, 0});
    CHECK(agg_mask(FeatureKind::kPersona, 5) == std::vector<char>{0, 1, 0, 1, 0});
    auto persona = fit_agg_weights(windows, same_speaker, k, FeatureKind::kPersona).weights();
    CHECK(persona[1] == 0.0);
    CHECK(persona[3] == 0.0);
    CHECK(persona[0] + persona[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(persona[2] > persona[0]);

    CHECK_THROWS(fit_agg_weights(windows, recent, 1, FeatureKind::kTopic));
    AggWeights aw;
    aw.topic = topic;
    CHECK(agg_weights_from_json(to_json(aw)).get(FeatureKind::kTopic).weights() == w);
    CHECK_THROWS(aw.get(FeatureKind::kPersona));
  }

  TEST_CASE("checkpoints reproduce generation exactly") {
    Fixture fx;
    test::TempDir dir("generator");
    GeneratorModel m(fx.config(GeneratorVariant::kTP), 8);
    m.save(dir.path());
    auto back = GeneratorModel::load(dir.path());
    CHECK(back.params().hash() == m.params().hash());
    auto ctx = fx.contexts(4);
    Matrix f = random_matrix(4, 7, 1);
    CHECK(back.generate(ctx, 4, f) == m.generate(ctx, 4, f));
    CHECK_THROWS_WITH(GeneratorModel::load(dir / "missing"), doctest::Contains("checkpoint not found"));
  }

  TEST_CASE("hard features fed to the generator are binary") {
    Fixture fx;
    ExtractorConfig c = fx.topic.config();
    c.mode = FeatureMode::kHard;
    ExtractorModel hard_t(c, 1);
    c = fx.persona.config();
    c.mode = FeatureMode::kHard;
    ExtractorModel hard_p(c, 2);
    auto utts = fx.contexts(3);
    Matrix f = features_for(GeneratorVariant::kTPBin, {&hard_t, &hard_p}, utts);
    CHECK(f.cols() == 7);
    CHECK(((f.array() == 0.0) || (f.array() == 1.0)).all());
    CHECK(features_for(GeneratorVariant::kS2S, {}, utts).cols() == 0);
  }
}
