// Batch-1 construction latency of each pyramid variant at the default desk
// scale, the microbenchmark behind the comparison table's latency column.

#include <benchmark/benchmark.h>

#include "pyrdet/config.hpp"
#include "pyrdet/model.hpp"

namespace {

using namespace pyrdet;

const ExperimentConfig& bench_config() {
  static const ExperimentConfig cfg;
  return cfg;
}

// One shared hierarchy: pyramid cost is what varies between variants.
const FeatureHierarchy<float>& bench_hierarchy() {
  static const FeatureHierarchy<float> hier = [] {
    const auto& cfg = bench_config();
    Backbone<float> backbone(cfg.backbone_config(), cfg.seed);
    auto image = Tensor<float>::zeros(
        {1, 1, cfg.scene.image_size, cfg.scene.image_size});
    for (auto& v : image.raw()) v = 0.5f;
    return backbone.forward(image);
  }();
  return hier;
}

void BM_PyramidForward(benchmark::State& state, PyramidVariant variant) {
  const auto& cfg = bench_config();
  PyramidNetwork<float> net(cfg.backbone_config(), variant, cfg.pyramid, cfg.seed);
  const auto& hier = bench_hierarchy();
  for (auto _ : state) {
    auto out = net.forward(hier);
    benchmark::DoNotOptimize(out);
  }
}

void BM_PyramidForwardConcurrent(benchmark::State& state, PyramidVariant variant) {
  const auto& cfg = bench_config();
  PyramidNetwork<float> net(cfg.backbone_config(), variant, cfg.pyramid, cfg.seed);
  const auto& hier = bench_hierarchy();
  for (auto _ : state) {
    auto out = net.forward_concurrent(hier);
    benchmark::DoNotOptimize(out);
  }
}

void BM_BackboneForward(benchmark::State& state) {
  const auto& cfg = bench_config();
  Backbone<float> backbone(cfg.backbone_config(), cfg.seed);
  auto image = Tensor<float>::zeros(
      {1, 1, cfg.scene.image_size, cfg.scene.image_size});
  for (auto& v : image.raw()) v = 0.5f;
  for (auto _ : state) {
    auto hier = backbone.forward(image);
    benchmark::DoNotOptimize(hier);
  }
}

void BM_ModelForward(benchmark::State& state) {
  auto model = DetectorModel<float>::create(bench_config());
  auto image = Tensor<float>::zeros({1, 1, bench_config().scene.image_size,
                                     bench_config().scene.image_size});
  for (auto& v : image.raw()) v = 0.5f;
  for (auto _ : state) {
    auto out = model.forward(image);
    benchmark::DoNotOptimize(out);
  }
}

}  // namespace

BENCHMARK_CAPTURE(BM_PyramidForward, identity, PyramidVariant::kIdentity)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PyramidForward, lateral, PyramidVariant::kLateral)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PyramidForward, local_only_no_residual,
                  PyramidVariant::kLocalOnlyNoResidual)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PyramidForward, local_only, PyramidVariant::kLocalOnly)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PyramidForward, global_local, PyramidVariant::kGlobalLocal)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PyramidForward, global_local_deep_only,
                  PyramidVariant::kGlobalLocalDeepOnly)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PyramidForwardConcurrent, global_local,
                  PyramidVariant::kGlobalLocal)
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BackboneForward)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
