#include <benchmark/benchmark.h>

#include "snaplab/decoder.hpp"
#include "snaplab/evolve.hpp"
#include "snaplab/sampler.hpp"

namespace {

using namespace snaplab;

const NoiseSchedule kCos = NoiseSchedule::cosine();

// Args: kind (0 ResNet, 1 cross-attention), width.
void BM_BlockForward(benchmark::State& state) {
  const BlockKind kind = state.range(0) ? BlockKind::CrossAttention : BlockKind::ResNet;
  const IsolatedBlock block(kind, static_cast<int>(state.range(1)), ModelConfig{}, 256, 1);
  for (auto _ : state) benchmark::DoNotOptimize(block.run());
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_BlockForward)->ArgsProduct({{0, 1}, {32, 64, 128}})->Unit(benchmark::kMicrosecond);

// One guided DDIM step of the default desk model on a batch of 256.
void BM_DdimStep(benchmark::State& state) {
  const Model model(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  Rng rng(2);
  const LatentState z = LatentState::uniform(rng.normal(256, 2), 0.5);
  const std::vector<int> labels(256, 3);
  const GuidanceScale w(static_cast<double>(state.range(0)));
  for (auto _ : state) {
    const Prediction p = guided_predict(model, z, labels, w);
    benchmark::DoNotOptimize(ddim_step(kCos, z, p, 0.4).z.data());
  }
}
BENCHMARK(BM_DdimStep)->Arg(1)->Arg(7)->Unit(benchmark::kMillisecond);

void BM_OracleStep(benchmark::State& state) {
  const ConditionalDataset data = ConditionalDataset::toy_2d(0);
  const MixtureOracle oracle = data.oracle(kCos);
  Rng rng(3);
  const LatentState z = LatentState::uniform(rng.normal(4096, 2), 0.5);
  const std::vector<int> labels = balanced_labels(4096, 8);
  for (auto _ : state) benchmark::DoNotOptimize(oracle.predict(z, labels).value.data());
}
BENCHMARK(BM_OracleStep)->Unit(benchmark::kMillisecond);

// Arg: keep ratio in percent (100 = unpruned teacher).
void BM_DecoderDecode(benchmark::State& state) {
  const ConvDecoder teacher(DecoderSpec{}, 11);
  const ConvDecoder model = state.range(0) == 100 ? teacher : prune_decoder(teacher, state.range(0) / 100.0, 12);
  Rng rng(4);
  const Tensor latents = rng.normal(16, model.spec().latent_dim());
  for (auto _ : state) benchmark::DoNotOptimize(model.decode(latents).data());
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_DecoderDecode)->Arg(100)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_GenomeLatencyLookup(benchmark::State& state) {
  const ArchitectureGenome g = ArchitectureGenome::reference_origin();
  const LatencyTable table = proxy_latency_table(genome_space(g), ModelConfig{}, 0.01);
  for (auto _ : state) benchmark::DoNotOptimize(genome_latency(g, table));
}
BENCHMARK(BM_GenomeLatencyLookup);

}  // namespace

BENCHMARK_MAIN();
