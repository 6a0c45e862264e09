#include "cocon/extractor.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace cocon;
using ag::Matrix;
using ag::Var;

namespace {

ExtractorConfig toy_config(FeatureMode mode, FeatureKind kind = FeatureKind::kTopic) {
  ExtractorConfig c;
  c.kind = kind;
  c.mode = mode;
  c.cnn.vocab_size = 12;
  c.cnn.max_len = 8;
  c.cnn.embed_dim = 5;
  c.cnn.filters = 6;
  c.cnn.width = 3;
  c.cnn.stride = 2;
  c.cnn.out_dim = 7;
  c.feature_dim = 4;
  c.matcher_hidden = 8;
  return c;
}

std::vector<std::vector<int>> random_batch(std::size_t n, std::uint64_t seed, int vocab = 12, std::size_t len = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<std::vector<int>> out(n, std::vector<int>(len));
  for (auto& s : out) {
    for (auto& x : s) x = d(rng);
  }
  return out;
}

Matrix column_pair(std::initializer_list<double> a, std::initializer_list<double> b) {
  Matrix m(static_cast<Eigen::Index>(a.size()), 2);
  Eigen::Index i = 0;
  for (double x : a) m(i++, 0) = x;
  i = 0;
  for (double x : b) m(i++, 1) = x;
  return m;
}

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Pairs over two "topic words": same word means same topic.
std::vector<PairExample> separable_pairs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<PairExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int a = coin(rng) ? 4 : 5, b = coin(rng) ? 4 : 5;
    PairExample p;
    p.s = std::vector<int>(8, 0);
    p.t = std::vector<int>(8, 0);
    for (int k = 0; k < 3; ++k) {
      p.s[static_cast<std::size_t>(k)] = a;
      p.t[static_cast<std::size_t>(k)] = b;
    }
    p.y = a == b;
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_SUITE("extractor") {
  TEST_CASE("encoder shape, determinism, degenerate input and id range") {
    ExtractorModel m(toy_config(FeatureMode::kSoft), 1);
    auto batch = random_batch(3, 2);
    Var a = m.cnn_encode(batch);
    CHECK(a.rows() == 3);
    CHECK(a.cols() == 7);
    CHECK(m.cnn_encode(batch).value() == a.value());
    std::vector<std::vector<int>> pad(2, std::vector<int>(8, Vocabulary::kPad));
    CHECK(m.cnn_encode(pad).value().allFinite());
    batch[0][0] = 12;
    CHECK_THROWS_AS(m.cnn_encode(batch), std::out_of_range);
  }

  TEST_CASE("default architecture produces a 500-dim encoding") {
    ExtractorConfig c;
    c.cnn.vocab_size = 20;
    ExtractorModel m(c, 1);
    auto out = m.cnn_encode(random_batch(2, 3, 20, 30));
    CHECK(out.cols() == 500);
    CHECK(m.extract(random_batch(2, 3, 20, 30)).features.cols() == 100);
  }

  TEST_CASE("soft features lie in (0,1), hard features in {0,1}") {
    ExtractorModel soft(toy_config(FeatureMode::kSoft), 1), hard(toy_config(FeatureMode::kHard), 1);
    auto batch = random_batch(16, 4);
    Matrix fs = soft.extract(batch).features.value();
    CHECK(fs.minCoeff() > 0.0);
    CHECK(fs.maxCoeff() < 1.0);
    auto h = hard.extract(batch);
    for (Eigen::Index i = 0; i < h.features.value().size(); ++i) {
      const double x = h.features.value().data()[i];
      CHECK((x == 0.0 || x == 1.0));
      CHECK(x == (h.probs.value().data()[i] >= 0.5 ? 1.0 : 0.0));
    }
  }

  TEST_CASE("zero head pre-activation gives exactly 0.5") {
    ExtractorModel m(toy_config(FeatureMode::kSoft), 1);
    m.params().get("head.w").node()->value.setZero();
    m.params().get("head.b").node()->value.setZero();
    Matrix f = m.extract(random_batch(3, 5)).features.value();
    CHECK((f.array() == 0.5).all());
  }

  TEST_CASE("hard head passes gradients straight through the rounding") {
    ExtractorModel m(toy_config(FeatureMode::kHard), 1);
    Matrix enc = Matrix::Random(5, 7);
    Matrix g = Matrix::Random(5, 4);
    Var e1 = ag::leaf(enc), e2 = ag::leaf(enc);
    ag::backward(ag::sum(ag::mul(m.head(e1).features, ag::constant(g))));
    ag::backward(ag::sum(ag::mul(m.head(e2).probs, ag::constant(g))));
    CHECK((e1.grad() - e2.grad()).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("soft matcher values") {
    std::vector<double> zero(4, 0.0), ones(4, 1.0);
    CHECK(match_soft(zero, zero, 1.0) == 0.5);
    CHECK(match_soft(ones, ones, 1.0) == doctest::Approx(0.9820137900).epsilon(1e-9));
    CHECK(match_soft(ones, ones, 2.0) == doctest::Approx(0.8807970780).epsilon(1e-9));
    CHECK_THROWS(match_soft(ones, ones, 0.0));
    CHECK_THROWS(match_soft(ones, ones, -1.0));
    std::vector<double> a = {0.1, 0.7, 0.3, 0.9}, b = {0.8, 0.2, 0.6, 0.4};
    CHECK(match_soft(a, b, 0.7) == match_soft(b, a, 0.7));
    Var va = ag::constant(Matrix::Random(6, 4)), vb = ag::constant(Matrix::Random(6, 4));
    CHECK(match_soft(va, vb, 1.3).value() == match_soft(vb, va, 1.3).value());
  }

  TEST_CASE("hard matcher: zero final layer gives 0.5, outputs stay in (0,1)") {
    ExtractorModel m(toy_config(FeatureMode::kHard), 2);
    auto batch = random_batch(6, 3);
    auto fs = m.extract(batch).features, ft = m.extract(random_batch(6, 4)).features;
    Matrix p = m.match(fs, ft).value();
    CHECK(p.minCoeff() > 0.0);
    CHECK(p.maxCoeff() < 1.0);
    m.params().get("mlp.w2").node()->value.setZero();
    m.params().get("mlp.b2").node()->value.setZero();
    CHECK((m.match(fs, ft).value().array() == 0.5).all());
  }

  TEST_CASE("cross-entropy values and clipping") {
    std::vector<double> y = {1, 0};
    Matrix p(2, 1);
    p << 0.5, 0.5;
    CHECK(loss_xent(ag::constant(p), y).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Matrix good(1, 1);
    good << 1.0 - 1e-12;
    std::vector<double> one = {1};
    CHECK(loss_xent(ag::constant(good), one).scalar() < 1e-6);
    Matrix bad(1, 1);
    bad << 1.0;
    std::vector<double> zero = {0};
    const double v = loss_xent(ag::constant(bad), zero).scalar();
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
    CHECK_THROWS(loss_xent(ag::constant(p), one));
  }

  TEST_CASE("decorrelation loss values") {
    CHECK(loss_decorr(ag::constant(column_pair({0, 1, 0, 1}, {0, 1, 0, 1}))).scalar() == doctest::Approx(1.0));
    CHECK(loss_decorr(ag::constant(column_pair({0, 1, 0, 1}, {0, 0, 1, 1}))).scalar() == doctest::Approx(0.0));
    CHECK(loss_decorr(ag::constant(column_pair({0, 1, 0, 1}, {3, 3, 3, 3}))).scalar() == 0.0);
    CHECK_THROWS(loss_decorr(ag::constant(Matrix::Ones(1, 3))));
  }

  TEST_CASE("decorrelation is non-negative and vanishes only without off-diagonal correlation") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d;
    for (int trial = 0; trial < 20; ++trial) {
      Matrix f(10, 4);
      for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = d(rng);
      const double loss = loss_decorr(ag::constant(f)).scalar();
      Matrix c = ag::correlation_matrix(f);
      double off = 0;
      for (Eigen::Index i = 0; i < 4; ++i) {
        for (Eigen::Index j = 0; j < 4; ++j) {
          if (i != j) off += c(i, j) * c(i, j);
        }
      }
      CHECK(loss >= 0.0);
      CHECK(loss == doctest::Approx(off / 2));
    }
  }

  TEST_CASE("gradient check of L_xent + lambda L_DeCorr through the soft matcher") {
    ExtractorConfig cfg = toy_config(FeatureMode::kSoft);
    ExtractorModel m(cfg, 3);
    auto s = random_batch(6, 7), t = random_batch(6, 8);
    std::vector<double> y = {1, 0, 1, 0, 0, 1};
    auto loss = [&] {
      auto fs = m.extract(s).features, ft = m.extract(t).features;
      Var both[] = {fs, ft};
      return ag::add(loss_xent(m.match(fs, ft), y), ag::scale(loss_decorr(ag::concat_rows(both)), 0.5));
    };
    auto r = test::check_gradients(loss, m.params().vars(), 1e-6, 30, 1e-6);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("gradient check of the hard matcher on fixed binary inputs") {
    ExtractorModel m(toy_config(FeatureMode::kHard), 3);
    Matrix a(4, 4), b(4, 4);
    a << 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 0, 0;
    b << 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 1;
    std::vector<double> y = {1, 0, 1, 0};
    // Paired init puts some pre-activations exactly on the ReLU kink.
    m.params().get("mlp.b1").node()->value += Matrix::Constant(1, 8, 0.05);
    std::vector<Var> mlp = {m.params().get("mlp.w1"), m.params().get("mlp.b1"), m.params().get("mlp.w2"),
                            m.params().get("mlp.b2")};
    auto loss = [&] { return loss_xent(m.match(ag::constant(a), ag::constant(b)), y); };
    CHECK(test::check_gradients(loss, mlp).max_rel_error < 1e-4);
  }

  TEST_CASE("accuracy: tie rule, oracle predictions and chance level") {
    std::vector<double> preds = {0.5, 0.9, 0.2};
    std::vector<int> labels = {0, 1, 0};
    CHECK(accuracy_from_predictions(preds, labels) == 1.0);
    std::vector<int> flipped = {1, 1, 0};
    CHECK(accuracy_from_predictions(preds, flipped) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS(accuracy_from_predictions({}, {}));

    auto corpus = synth_corpus(SynthConfig{}, 7);
    auto vocab = build_vocab(corpus, 1, 1000, 16);
    auto pairs = make_topic_pairs(corpus, vocab, 1000, 1).pairs;
    ExtractorConfig c = toy_config(FeatureMode::kSoft);
    c.cnn.vocab_size = vocab.size();
    c.cnn.max_len = 16;
    ExtractorModel m(c, 1);
    const double acc = eval_matching_accuracy(m, pairs);
    CHECK(acc == doctest::Approx(0.5).epsilon(0.1));
    CHECK_THROWS(eval_matching_accuracy(m, std::vector<PairExample>{}));
  }

  TEST_CASE("training is seed-deterministic and restores the best epoch") {
    auto train = separable_pairs(256, 1), valid = separable_pairs(64, 2);
    ExtractorTrainConfig tc;
    tc.lr = 1e-2;
    tc.max_epochs = 3;
    tc.batch_size = 32;
    ExtractorModel a(toy_config(FeatureMode::kSoft), 4), b(toy_config(FeatureMode::kSoft), 4);
    auto ha = train_extractor(a, train, valid, tc);
    train_extractor(b, train, valid, tc);
    CHECK(a.params().hash() == b.params().hash());
    CHECK(ha.epochs.size() == 3);
    CHECK(ha.best_epoch >= 1);
    CHECK(evaluate_pair_loss(a, valid, tc.lambda, 64).total == doctest::Approx(ha.epochs[ha.best_epoch - 1].valid_loss));
  }

  TEST_CASE("training loss trends down on a separable pair set (median of 3 seeds)") {
    for (FeatureMode mode : {FeatureMode::kSoft, FeatureMode::kHard}) {
      std::vector<int> down;
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        ExtractorModel m(toy_config(mode), seed);
        ExtractorTrainConfig tc;
        tc.lr = 1e-2;
        tc.max_epochs = 8;
        tc.batch_size = 32;
        tc.patience = 100;
        tc.seed = seed;
        auto h = train_extractor(m, separable_pairs(512, seed), separable_pairs(64, seed + 10), tc);
        const double first = (h.epochs[0].train_loss + h.epochs[1].train_loss) / 2;
        const double last = (h.epochs[6].train_loss + h.epochs[7].train_loss) / 2;
        down.push_back(last < first);
      }
      std::sort(down.begin(), down.end());
      CHECK_MESSAGE(down[1] == 1, "mode " << to_string(mode));
    }
  }

  TEST_CASE("checkpoints round-trip bit-exactly") {
    test::TempDir dir("extractor");
    ExtractorModel m(toy_config(FeatureMode::kHard, FeatureKind::kPersona), 9);
    m.save(dir.path());
    ExtractorModel back = ExtractorModel::load(dir.path());
    CHECK(back.params().hash() == m.params().hash());
    CHECK(back.kind() == FeatureKind::kPersona);
    CHECK(back.mode() == FeatureMode::kHard);
    auto batch = random_batch(4, 3);
    CHECK(back.extract(batch).probs.value() == m.extract(batch).probs.value());
  }

  TEST_CASE("mean absolute off-diagonal correlation") {
    CHECK(mean_abs_offdiag_correlation(column_pair({0, 1, 0, 1}, {1, 0, 1, 0})) == doctest::Approx(1.0));
    CHECK(mean_abs_offdiag_correlation(column_pair({0, 1, 0, 1}, {0, 0, 1, 1})) == doctest::Approx(0.0));
  }
}
