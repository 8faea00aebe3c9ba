#include <benchmark/benchmark.h>

#include "flowdistill/afwm.hpp"
#include "flowdistill/generator.hpp"
#include "flowdistill/losses.hpp"
#include "flowdistill/ops.hpp"
#include "flowdistill/optim.hpp"
#include "flowdistill/rng.hpp"
#include "flowdistill/synth.hpp"

using flowdistill::Rng;
using flowdistill::Shape;
using flowdistill::Tensor;

static void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  auto x = Tensor<float>::randn(Shape{1, c, 48, 36}, rng);
  auto w = Tensor<float>::randn(Shape{c, c, 3, 3}, rng, 0.05f);
  Tensor<float> b(Shape{c});
  for (auto _ : state) {
    auto y = flowdistill::conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(32)->Arg(64);

// Forward plus full reverse sweep; the gap against the forward-only run above
// is the tape overhead plus the dw/dx accumulation loops.
static void BM_Conv2dTrainStep(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  auto x = Tensor<float>::randn(Shape{1, c, 48, 36}, rng);
  auto w = Tensor<float>::randn(Shape{c, c, 3, 3}, rng, 0.05f);
  Tensor<float> b(Shape{c});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    w.zero_grad();
    b.zero_grad();
    auto loss = flowdistill::mean(flowdistill::conv2d(x, w, b, 1, 1));
    loss.backward();
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv2dTrainStep)->Arg(32)->Arg(64);

static void BM_GridSample(benchmark::State& state) {
  Rng rng(2);
  auto img = Tensor<float>::randn(Shape{1, 3, 64, 48}, rng);
  auto flow = Tensor<float>::randn(Shape{1, 2, 64, 48}, rng,  0.1f);
  for (auto _ : state) {
    auto y = flowdistill::grid_sample(img, flow);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_GridSample);

static void BM_Correlation(benchmark::State& state) {
  const int r = static_cast<int>(state.range(0));
  Rng rng(3);
  auto a = Tensor<float>::randn(Shape{1, 32, 16, 12}, rng);
  auto b = Tensor<float>::randn(Shape{1, 32, 16, 12}, rng);
  for (auto _ : state) {
    auto y = flowdistill::correlation(a, b, r);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Correlation)->Arg(1)->Arg(2)->Arg(3);

static void BM_InstanceNorm(benchmark::State& state) {
  Rng rng(4);
  auto x = Tensor<float>::randn(Shape{1, 32, 64, 48}, rng);
  for (auto _ : state) {
    auto y = flowdistill::instance_norm(x);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_InstanceNorm);

// Full cascade flow estimation at working resolution: two pyramid encoders
// plus one correlation -> refinement pass per level.
static void BM_FlowEstimation(benchmark::State& state) {
  Rng rng(5);
  flowdistill::AfwmConfig cfg;
  cfg.levels = 3;
  cfg.base_width = 16;
  flowdistill::Afwm<float> afwm(cfg, rng);
  auto clothes = Tensor<float>::randn(Shape{1, 3, 64, 48}, rng);
  auto cond = Tensor<float>::randn(Shape{1, 12, 64, 48}, rng);
  for (auto _ : state) {
    auto cascade = afwm.estimate_flows(afwm.extract_pyramids(clothes, cond));
    benchmark::DoNotOptimize(cascade.flows.back().data().data());
  }
}
BENCHMARK(BM_FlowEstimation);

// One optimizer step of the warp-and-generate objective on a synthetic
// sample: flow cascade, garment warp, generator pass, composite loss,
// backward, Adam update. This is the unit the training loop repeats.
static void BM_TeacherStep(benchmark::State& state) {
  Rng rng(6);
  flowdistill::AfwmConfig acfg;
  acfg.levels = 3;
  acfg.base_width = 16;
  flowdistill::GmConfig gcfg;
  gcfg.in_channels = acfg.clothes_channels + acfg.cond_channels;
  gcfg.base_width = 16;
  flowdistill::Afwm<float> afwm(acfg, rng);
  flowdistill::TryOnGenerator<float> gm(gcfg, rng);
  flowdistill::PerceptualExtractor<float> perc(rng);
  flowdistill::LossWeights weights;

  auto params = flowdistill::param_tensors(afwm.params());
  for (auto& [name, t] : gm.params()) params.push_back(t);
  for (auto& t : params) t.set_requires_grad(true);
  flowdistill::Adam<float> opt(params, 1e-3f);

  auto s = flowdistill::synth_sample<float>(11, {});
  auto cond = flowdistill::person_representation(s);

  for (auto _ : state) {
    opt.zero_grad();
    auto cascade = afwm.estimate_flows(afwm.extract_pyramids(s.clothes, cond));
    auto warped = flowdistill::warp_clothes(s.clothes, cascade);
    auto generated = gm.forward(flowdistill::concat_channels(warped, cond));
    auto loss = flowdistill::total_generation_loss(generated, s.person, cascade,
                                                   perc, weights);
    loss.backward();
    opt.step();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TeacherStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
