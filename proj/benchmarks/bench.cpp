// Copyright 2026 The moesched Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <benchmark/benchmark.h>

#include <numeric>

#include "moesched/scheduler.hpp"
#include "moesched/solver.hpp"

namespace {

using namespace moesched;

Topology topology(std::uint32_t E, std::uint32_t N) {
  Topology t;
  t.G = E;
  t.E = E;
  t.N = N;
  t.k = 2;
  t.B = 8;
  t.S_seq = 16;
  t.vocab = 4096;
  return t;
}

void BM_Ceo(benchmark::State& state) {
  const auto tokens = static_cast<std::uint32_t>(state.range(0));
  const auto topo = topology(4, 16);
  PlantedOptions o;
  o.tokens_per_cluster = tokens / 4;
  o.noise = 0.2;
  o.seed = 1;
  const auto p = synthesize_planted_profile(topo, o);
  SolverConfig c;
  c.samples = 64;
  c.n_steps = 20;
  for (auto _ : state) benchmark::DoNotOptimize(solve_ceo(p.profile.layers[0], topo, c));
}
BENCHMARK(BM_Ceo)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

LookupBundle bundle(std::uint32_t vocab, std::uint32_t E) {
  LookupBundle b;
  b.vocab = vocab;
  b.clusters = E;
  b.num_experts = E;
  std::vector<std::uint32_t> ids(vocab), labels(vocab);
  std::iota(ids.begin(), ids.end(), 0u);
  for (std::uint32_t i = 0; i < vocab; ++i) labels[i] = (i * 2654435761u >> 7) % E;
  b.token_tables.push_back(make_token_table(vocab, E, ids, labels, std::vector<double>(vocab, 0.5)));
  std::vector<std::uint32_t> experts(E);
  std::iota(experts.begin(), experts.end(), 0u);
  b.expert_tables.push_back(experts);
  b.ngram.n = 1;
  b.ngram.clusters = E;
  b.ngram.probs.assign(E * E, 1.0 / E);
  b.ngram.observations.assign(E, 1);
  b.ngram.best.assign(E, 0);
  return b;
}

std::vector<std::uint32_t> batch(std::size_t n, std::uint32_t vocab) {
  Rng rng(3);
  std::vector<std::uint32_t> b(n);
  for (auto& t : b) t = static_cast<std::uint32_t>(rng.below(vocab));
  return b;
}

void BM_Lookup(benchmark::State& state) {
  const auto b = bundle(32768, 8);
  const auto tokens = batch(static_cast<std::size_t>(state.range(0)), 32768);
  std::vector<std::uint32_t> history(tokens.size());
  for (std::size_t i = 0; i < history.size(); ++i) history[i] = static_cast<std::uint32_t>(i % 8);
  for (auto _ : state) benchmark::DoNotOptimize(lookup_device(tokens, history, b, 0));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Lookup)->Arg(1024)->Arg(16384);

void BM_RebatchResume(benchmark::State& state) {
  const auto b = bundle(32768, 8);
  const auto tokens = batch(static_cast<std::size_t>(state.range(0)), 32768);
  for (auto _ : state) {
    const auto rb = rebatch_tokens(tokens, {}, b, 0, 8);
    benchmark::DoNotOptimize(resume_tokens(rb.tokens, rb.indices));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_RebatchResume)->Arg(1024)->Arg(16384);

}  // namespace

BENCHMARK_MAIN();
