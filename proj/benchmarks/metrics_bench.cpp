#include <benchmark/benchmark.h>

#include <random>

#include "sibyl/metrics.hpp"

namespace {

using namespace sibyl::metrics;

const char* kWords[] = {"i", "am", "so", "sorry", "to", "hear", "that", "you", "lost", "your",
                        "job", "it", "must", "be", "hard", "what", "happened", "glad", "great", "news"};

std::string sentence(std::mt19937_64& rng, std::size_t len) {
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += kWords[rng() % std::size(kWords)];
  }
  return s;
}

std::vector<EvalPair> corpus(std::size_t n) {
  std::mt19937_64 rng(1);
  std::vector<EvalPair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pairs.push_back(make_pair(sentence(rng, 12), {sentence(rng, 14)}));
  return pairs;
}

void BM_Bleu4(benchmark::State& state) {
  const auto pairs = corpus(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(bleu(pairs, 4));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Bleu4)->Arg(100)->Arg(1000);

void BM_Meteor(benchmark::State& state) {
  const auto pairs = corpus(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(meteor(pairs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Meteor)->Arg(100)->Arg(1000);

void BM_Cider(benchmark::State& state) {
  const auto pairs = corpus(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(cider(pairs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Cider)->Arg(100)->Arg(1000);

void BM_Evaluate(benchmark::State& state) {
  const auto pairs = corpus(static_cast<std::size_t>(state.range(0)));
  HashEmbeddingProvider provider(64, 0);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(pairs, provider));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Evaluate)->Arg(1000);

void BM_PorterStem(benchmark::State& state) {
  for (auto _ : state) {
    for (const char* w : {"generalizations", "relational", "hopping", "conditional", "happiness"}) {
      benchmark::DoNotOptimize(porter_stem(w));
    }
  }
}
BENCHMARK(BM_PorterStem);

}  // namespace
BENCHMARK_MAIN();
