#include <benchmark/benchmark.h>

#include "protogate/dataset.hpp"
#include "protogate/genetic.hpp"

namespace {

void BM_EncodeGenetic(benchmark::State& state) {
    std::string s(static_cast<size_t>(state.range(0)), 'A');
    for (size_t i = 0; i < s.size(); i += 3) s[i] = 'G';
    auto seq = protogate::GeneticSequence::parse(s);
    for (auto _ : state) {
        auto t = protogate::encode_genetic(seq, 720);
        benchmark::DoNotOptimize(t.values.data());
    }
}
BENCHMARK(BM_EncodeGenetic)->Arg(128)->Arg(720);

void BM_SynthGenerate(benchmark::State& state) {
    protogate::SynthConfig cfg;
    cfg.class_count = static_cast<int>(state.range(0));
    cfg.per_class = 20;
    for (auto _ : state) {
        auto ds = protogate::synth_generate(cfg, 7);
        benchmark::DoNotOptimize(ds.samples.data());
    }
}
BENCHMARK(BM_SynthGenerate)->Arg(4)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
