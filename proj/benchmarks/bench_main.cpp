#include <benchmark/benchmark.h>

#include <random>

#include "idd/interclass.hpp"
#include "idd/kd_losses.hpp"
#include "idd/metrics.hpp"
#include "idd/models.hpp"
#include "idd/nn.hpp"
#include "idd/position.hpp"

using namespace idd;

namespace {

Tensor<float> noise(int n, int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.f, 1.f);
  Tensor<float> t(n, c, h, w);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

LabelMap labels(int n, int h, int w, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabelMap l(n, h, w);
  for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % classes);
  return l;
}

}  // namespace

static void BM_Conv3x3Forward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  nn::Conv2d<float> conv(c, c, nn::ConvOptions{}, "bench");
  std::mt19937_64 rng(1);
  conv.init(rng);
  const auto x = noise(8, c, 32, 32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x, false));
}
BENCHMARK(BM_Conv3x3Forward)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMicrosecond);

static void BM_ModelForward(benchmark::State& state) {
  const auto spec = state.range(0) ? models::ModelSpec::default_teacher(6) : models::ModelSpec::default_student(6);
  models::Model<float> m(spec, 1);
  const auto x = noise(8, 3, 64, 64, 3);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(x, false));
  state.SetLabel(state.range(0) ? "teacher" : "student");
}
BENCHMARK(BM_ModelForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_InterclassLoss(benchmark::State& state) {
  const auto t = noise(8, 32, 64, 64, 4), s = noise(8, 16, 64, 64, 5);
  const auto l = labels(8, 64, 64, 6, 6);
  Tensor<float> g;
  for (auto _ : state) benchmark::DoNotOptimize(interclass::interclass_distance_loss<float>(t, s, l, 6, &g));
}
BENCHMARK(BM_InterclassLoss)->Unit(benchmark::kMicrosecond);

static void BM_PairwiseAffinity(benchmark::State& state) {
  const auto t = noise(8, 32, 64, 64, 7), s = noise(8, 16, 64, 64, 8);
  const int grid = static_cast<int>(state.range(0));
  Tensor<float> g;
  for (auto _ : state) benchmark::DoNotOptimize(kd::pairwise_affinity_loss(t, s, grid, &g));
}
BENCHMARK(BM_PairwiseAffinity)->Arg(4)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);

static void BM_ChannelwiseKd(benchmark::State& state) {
  const auto t = noise(8, 6, 64, 64, 9), s = noise(8, 6, 64, 64, 10);
  Tensor<float> g;
  for (auto _ : state) benchmark::DoNotOptimize(kd::channelwise_kd_loss(t, s, 4.0, &g));
}
BENCHMARK(BM_ChannelwiseKd)->Unit(benchmark::kMicrosecond);

static void BM_PositionLoss(benchmark::State& state) {
  const auto t = noise(8, 2, 64, 64, 11), s = noise(8, 2, 64, 64, 12);
  Tensor<float> g;
  for (auto _ : state) benchmark::DoNotOptimize(position::position_info_loss(t, s, 1e-12, &g));
}
BENCHMARK(BM_PositionLoss)->Unit(benchmark::kMicrosecond);

static void BM_Confusion(benchmark::State& state) {
  const auto p = labels(200, 64, 64, 6, 13), g = labels(200, 64, 64, 6, 14);
  for (auto _ : state) {
    metrics::ConfusionMatrix cm(6);
    metrics::accumulate_confusion(cm, p, g);
    benchmark::DoNotOptimize(metrics::compute_iou(cm));
  }
}
BENCHMARK(BM_Confusion)->Unit(benchmark::kMicrosecond);

static void BM_StudentTrainStep(benchmark::State& state) {
  models::Model<float> teacher(models::ModelSpec::default_teacher(6), 1);
  teacher.freeze();
  models::Model<float> student(models::ModelSpec::default_student(6), 2);
  position::PositionHead<float> th(teacher.spec().feature_dim, 8, 3), sh(student.spec().feature_dim, 8, 4);
  th.freeze();
  kd::LossWeights w = kd::LossWeights::preset(state.range(0) ? "full-idd" : "baseline");
  const auto x = noise(8, 3, 64, 64, 15);
  const auto l = labels(8, 64, 64, 6, 16);
  nn::Sgd<float> opt(student.params(), 0.9, 5e-4);
  for (auto _ : state) {
    opt.zero_grad();
    sh.zero_grad();
    const auto out = student.forward(x, true);
    models::ForwardOutput<float> tout;
    if (w.any_enabled()) tout = teacher.forward(x, false);
    kd::StudentGrads<float> grads;
    benchmark::DoNotOptimize(kd::total_loss(tout, out, l, kd::PositionHeads<float>{&th, &sh}, w, &grads));
    student.backward(w.any_enabled() ? &grads.features : nullptr, grads.logits);
    opt.step(0.001);
  }
  state.SetLabel(state.range(0) ? "full-idd" : "baseline");
}
BENCHMARK(BM_StudentTrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
