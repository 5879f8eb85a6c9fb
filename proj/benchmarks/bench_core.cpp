#include "typeii/modulation_ode.hpp"
#include "typeii/profile_builder.hpp"
#include "typeii/renormalized_flow.hpp"
#include "typeii/spectral.hpp"

#include <benchmark/benchmark.h>

#include <cmath>

using namespace typeii;

namespace {

void BM_ApplyH(benchmark::State& state) {
  const auto g = RadialGrid::make_patched(1e4, 1.0 / static_cast<double>(state.range(0)));
  const auto f = RadialFunction::sample(g, [](double y) { return 1.0 / (1.0 + y * y); });
  for (auto _ : state) benchmark::DoNotOptimize(apply_H(f));
  state.SetComplexityN(g->size());
}
BENCHMARK(BM_ApplyH)->Arg(25)->Arg(50)->Arg(100)->Complexity();

void BM_SolveShifted(benchmark::State& state) {
  const auto g = RadialGrid::make_patched(1e4, 1.0 / static_cast<double>(state.range(0)));
  const auto op = assemble_operator(g);
  const Vec rhs = Vec::Ones(op.size());
  for (auto _ : state) benchmark::DoNotOptimize(op.solve_shifted(rhs, -4.0));
  state.SetComplexityN(op.size());
}
BENCHMARK(BM_SolveShifted)->Arg(25)->Arg(50)->Arg(100)->Complexity();

void BM_BuildCorrections(benchmark::State& state) {
  const double b1 = std::pow(10.0, -static_cast<double>(state.range(0)));
  const ProfileBuilder pb(grid_for_b1(b1, 0.02));
  for (auto _ : state) benchmark::DoNotOptimize(pb.build_corrections(b1));
}
BENCHMARK(BM_BuildCorrections)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_SpectralPack(benchmark::State& state) {
  const double M = static_cast<double>(state.range(0));
  const auto g = spectral_grid(M, 0.02);
  for (auto _ : state) benchmark::DoNotOptimize(build_spectral_pack(g, M));
}
BENCHMARK(BM_SpectralPack)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_IntegrateBSystem(benchmark::State& state) {
  const auto start = frame_from_V2(1e3, -0.8931);
  for (auto _ : state) benchmark::DoNotOptimize(integrate(start, 1e9, {}));
}
BENCHMARK(BM_IntegrateBSystem)->Unit(benchmark::kMillisecond);

void BM_FlowStep(benchmark::State& state) {
  const FlowContext ctx(1e4, 1.1e4, FlowConfig{});
  const FlowState start = build_initial_data(ctx, 0.0, 0.0, 1e4);
  for (auto _ : state) {
    FlowState st = start;
    benchmark::DoNotOptimize(step(ctx, st, ctx.config().ds));
  }
}
BENCHMARK(BM_FlowStep)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
