// Desk-scale microbenchmarks for the hot paths.

#include "cocon/extractor.hpp"
#include "cocon/generator.hpp"
#include "cocon/metrics.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace cocon;

namespace {

constexpr std::size_t kVocab = 400;

CnnConfig desk_cnn() {
  CnnConfig c;
  c.vocab_size = kVocab;
  c.max_len = 16;
  c.embed_dim = 32;
  c.filters = 48;
  c.out_dim = 64;
  return c;
}

std::vector<std::vector<int>> random_batch(std::size_t n, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(4, static_cast<int>(kVocab) - 1);
  std::vector<std::vector<int>> out(n, std::vector<int>(len));
  for (auto& s : out) {
    for (auto& x : s) x = d(rng);
  }
  return out;
}

void BM_ExtractFeatures(benchmark::State& state) {
  ExtractorConfig c;
  c.cnn = desk_cnn();
  c.feature_dim = 32;
  c.matcher_hidden = 64;
  ExtractorModel m(c, 1);
  auto batch = random_batch(static_cast<std::size_t>(state.range(0)), c.cnn.max_len, 2);
  ag::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(m.extract(batch).probs.value().data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ExtractFeatures)->Arg(1)->Arg(128);

void BM_ExtractorTrainStep(benchmark::State& state) {
  ExtractorConfig c;
  c.cnn = desk_cnn();
  c.feature_dim = 32;
  c.matcher_hidden = 64;
  ExtractorModel m(c, 1);
  auto s = random_batch(128, c.cnn.max_len, 3), t = random_batch(128, c.cnn.max_len, 4);
  std::vector<double> y(128);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<double>(i % 2);
  for (auto _ : state) {
    auto fs = m.extract(s).features, ft = m.extract(t).features;
    ag::backward(loss_xent(m.match(fs, ft), y));
    m.params().zero_grad();
  }
}
BENCHMARK(BM_ExtractorTrainStep)->Unit(benchmark::kMillisecond);

GeneratorModel desk_generator() {
  GeneratorConfig c;
  c.variant = GeneratorVariant::kTP;
  c.cnn = desk_cnn();
  c.context_dim = c.h0_hidden = c.h0_dim = c.hidden = 64;
  c.topic_dim = c.persona_dim = 32;
  return GeneratorModel(c, 5);
}

void BM_GreedyDecode(benchmark::State& state) {
  auto g = desk_generator();
  std::mt19937_64 rng(6);
  ag::Matrix h0 = ag::Matrix::NullaryExpr(state.range(0), 64, [&] { return std::normal_distribution<double>()(rng); });
  for (auto _ : state) benchmark::DoNotOptimize(g.greedy_decode(h0, 16));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GreedyDecode)->Arg(1)->Arg(64);

void BM_RolloutBackward(benchmark::State& state) {
  auto g = desk_generator();
  std::mt19937_64 rng(7);
  ag::Matrix h0v = ag::Matrix::NullaryExpr(64, 64, [&] { return std::normal_distribution<double>()(rng); });
  for (auto _ : state) {
    ag::Var h0 = ag::leaf(h0v);
    auto r = g.rollout_st(h0, 16, 0.5);
    ag::backward(ag::sum(r.utterance_onehots));
    g.params().zero_grad();
  }
}
BENCHMARK(BM_RolloutBackward)->Unit(benchmark::kMillisecond);

std::vector<EvalPair> random_pairs(std::size_t n) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> len(5, 15), word(0, 199);
  std::vector<EvalPair> out(n);
  for (auto& p : out) {
    for (int i = len(rng); i > 0; --i) p.hypothesis.push_back("w" + std::to_string(word(rng)));
    for (int i = len(rng); i > 0; --i) p.reference.push_back("w" + std::to_string(word(rng)));
  }
  return out;
}

void BM_Bleu(benchmark::State& state) {
  auto pairs = random_pairs(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(bleu(pairs).score);
}
BENCHMARK(BM_Bleu)->Arg(1000);

void BM_Nist(benchmark::State& state) {
  auto pairs = random_pairs(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(nist(pairs));
}
BENCHMARK(BM_Nist)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
