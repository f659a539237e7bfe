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

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "moesched/comm_model.hpp"
#include "moesched/predictor.hpp"
#include "moesched/scheduler.hpp"
#include "moesched/solver.hpp"

namespace moesched {
namespace {

using testing::make_topology;
using testing::random_matrix;

LookupBundle random_bundle(std::uint32_t vocab, std::uint32_t E, std::uint32_t N, std::uint32_t n, Rng& rng) {
  LookupBundle b;
  b.vocab = vocab;
  b.clusters = E;
  b.layers = 1;
  b.num_experts = N;
  std::vector<std::uint32_t> ids(vocab), labels(vocab);
  std::vector<double> conf(vocab);
  for (std::uint32_t i = 0; i < vocab; ++i) {
    ids[i] = i;
    labels[i] = static_cast<std::uint32_t>(rng.below(E));
    conf[i] = rng.uniform();
  }
  b.token_tables.push_back(make_token_table(vocab, E, ids, labels, conf));
  std::vector<std::uint32_t> experts(N);
  for (std::uint32_t e = 0; e < N; ++e) experts[e] = e % E;
  rng.shuffle(std::span<std::uint32_t>(experts));
  b.expert_tables.push_back(experts);
  std::size_t rows = 1;
  for (std::uint32_t i = 0; i < n; ++i) rows *= E;
  b.ngram.n = n;
  b.ngram.clusters = E;
  b.ngram.observations.assign(rows, 1);
  for (std::size_t r = 0; r < rows * E; ++r) b.ngram.probs.push_back(rng.uniform());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::uint32_t c = 0; c < E; ++c) s += b.ngram.probs[r * E + c];
    for (std::uint32_t c = 0; c < E; ++c) b.ngram.probs[r * E + c] /= s;
  }
  b.ngram.best.assign(rows, 0);
  b.ngram.refresh_best();
  return b;
}

TEST(Property, RebatchResumeIsIdentity) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::uint32_t G = 1u << (1 + rng.below(3));
    auto bundle = random_bundle(500, G, G * 2, 1, rng);
    std::vector<std::uint32_t> batch(1 + rng.below(1000));
    for (auto& t : batch) t = static_cast<std::uint32_t>(rng.below(600));
    std::vector<std::uint32_t> history(batch.size());
    for (auto& h : history) h = static_cast<std::uint32_t>(rng.below(G));
    const auto rb = rebatch_tokens(batch, rng.bernoulli(0.5) ? history : std::vector<std::uint32_t>{}, bundle, 0, G);
    EXPECT_EQ(resume_tokens(rb.tokens, rb.indices), batch);
    EXPECT_EQ(rb.tokens.size(), static_cast<std::size_t>(rb.indices.group_size) * G);
    // Non-pad slots hold each input exactly once, grouped by ascending device.
    std::vector<std::uint32_t> seen;
    for (std::size_t s = 0; s < rb.indices.perm.size(); ++s) {
      if (!rb.indices.pad_mask[s]) seen.push_back(rb.indices.perm[s]);
    }
    std::sort(seen.begin(), seen.end());
    std::vector<std::uint32_t> all(batch.size());
    std::iota(all.begin(), all.end(), 0u);
    EXPECT_EQ(seen, all);
  }
}

TEST(Property, StableShuffleKeepsOrderWithinGroups) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<std::uint32_t> dev(1 + rng.below(200));
    for (auto& d : dev) d = static_cast<std::uint32_t>(rng.below(4));
    const auto idx = make_shuffle_indices(dev, 4);
    for (std::size_t s = 1; s < idx.perm.size(); ++s) {
      if (idx.pad_mask[s] || idx.pad_mask[s - 1]) continue;
      if (idx.device_of_slot(s) == idx.device_of_slot(s - 1)) EXPECT_LT(idx.perm[s - 1], idx.perm[s]);
    }
  }
}

TEST(Property, SampledExpertLabelsRespectCapacity) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::uint32_t E = 1 + static_cast<std::uint32_t>(rng.below(4));
    const std::uint32_t N = E * (1 + static_cast<std::uint32_t>(rng.below(4)));
    std::vector<double> p(N * E);
    for (auto& x : p) x = rng.bernoulli(0.3) ? 0.0 : rng.uniform();
    const auto labels = sample_labels(p, E, SampleKind::kExpert, {}, 1.0, rng);
    for (std::uint32_t c = 0; c < E; ++c) EXPECT_EQ(std::count(labels.begin(), labels.end(), c), N / E);
  }
}

TEST(Property, TokenSamplesStayWithinSoftCapacity) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::uint32_t E = 2 + static_cast<std::uint32_t>(rng.below(3));
    const std::size_t t = 5 + rng.below(30);
    std::vector<std::int64_t> freq(t);
    for (auto& f : freq) f = 1 + static_cast<std::int64_t>(rng.below(9));
    std::vector<double> p(t * E);
    for (auto& x : p) x = rng.uniform();
    const auto labels = sample_labels(p, E, SampleKind::kToken, freq, 1.1, rng);
    const double S = static_cast<double>(std::accumulate(freq.begin(), freq.end(), std::int64_t{0}));
    const auto max_f = *std::max_element(freq.begin(), freq.end());
    std::vector<double> load(E, 0.0);
    for (std::size_t j = 0; j < t; ++j) load[labels[j]] += static_cast<double>(freq[j]);
    // A cluster closes once it reaches capacity, so it overshoots by less than one row.
    for (double l : load) EXPECT_LT(l, S / E * 1.1 + static_cast<double>(max_f));
  }
}

TEST(Property, SolversProduceFeasibleAssignments) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const std::uint32_t E = 1 + static_cast<std::uint32_t>(rng.below(3));
    const std::uint32_t N = E * (1 + static_cast<std::uint32_t>(rng.below(3)));
    const auto topo = make_topology(E, E, N, 1);
    const auto m = random_matrix(3 + static_cast<std::uint32_t>(rng.below(8)), N, 5, seed);
    SolverConfig c;
    c.samples = 16;
    c.n_steps = 5;
    c.seed = seed;
    const auto ceo = solve_ceo(m, topo, c);
    EXPECT_TRUE(check_constraints(ceo.assignment, topo).empty());
    for (double x : ceo.token_confidence) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0 + 1e-12);
    }
    if (m.total > 0) {
      EXPECT_TRUE(check_constraints(baseline_two_stage_kmeans(m, topo, seed), topo).empty());
    }
    EXPECT_TRUE(check_constraints(baseline_round_robin(topo, m.token_ids), topo).empty());
  }
}

TEST(Property, CrossMassEqualsOneMinusLar) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto m = random_matrix(8, 6, 4, seed);
    if (m.total == 0) continue;
    Assignment a{3, m.token_ids, {}, {0, 1, 2, 0, 1, 2}};
    for (int j = 0; j < 8; ++j) a.token_labels.push_back(static_cast<std::uint32_t>(rng.below(3)));
    rng.shuffle(std::span<std::uint32_t>(a.expert_labels));
    const auto v = objective(a, m, 0.5);
    EXPECT_NEAR(v.l2, static_cast<double>(m.total) * (1.0 - metrics(a, m).lar), 1e-9);
    EXPECT_GE(v.l1, 0.0);
  }
}

TEST(Property, GateShuffleIsTransparent) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng rng(seed);
    std::vector<std::uint32_t> table(16);
    for (std::uint32_t e = 0; e < 16; ++e) table[e] = e % 4;
    rng.shuffle(std::span<std::uint32_t>(table));
    std::vector<float> logits(16);
    for (auto& x : logits) x = static_cast<float>(rng.normal());
    std::vector<std::uint32_t> ids(16);
    std::iota(ids.begin(), ids.end(), 0u);
    const auto sh = apply_expert_shuffle<std::uint32_t, float>(ids, logits, table, 4);
    for (std::uint32_t k : {1u, 2u, 6u}) {
      std::set<std::uint32_t> before, after;
      for (auto e : top_k_experts(logits, k)) before.insert(e);
      for (auto s : top_k_experts(sh.gate_columns, k)) after.insert(sh.payloads[s]);
      EXPECT_EQ(before, after);
    }
    // Each cluster occupies a contiguous block of slots.
    for (std::uint32_t s = 0; s < 16; ++s) EXPECT_EQ(table[sh.permutation.expert_perm[s]], s / 4);
  }
}

TEST(Property, SchedulerWindowsUseEveryDevice) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::uint32_t E = 2 + static_cast<std::uint32_t>(rng.below(6));
    auto bundle = random_bundle(200, E, E, 1, rng);
    RequestScheduler sched(E);
    for (int w = 0; w < 20; ++w) {
      std::set<std::uint32_t> used;
      for (std::uint32_t i = 0; i < E; ++i) {
        std::vector<std::uint32_t> req(1 + rng.below(20));
        for (auto& t : req) t = static_cast<std::uint32_t>(rng.below(250));
        used.insert(sched.schedule(req, bundle.token_tables[0]));
      }
      EXPECT_EQ(used.size(), E);
    }
  }
}

TEST(Property, ProbabilityRowsAreNormalized) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto topo = make_topology(4, 4, 16, 2, 3, 4, 16, 300);
    const auto trace = testing::uniform_trace(topo, 20, seed);
    const auto mats = build_matrices(trace, 16);
    for (const auto& m : mats) {
      const auto conf = build_confidence_table(m);
      for (std::size_t j = 0; j < m.num_tokens(); ++j) {
        const auto row = conf.row(j);
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
      }
      EXPECT_TRUE(validate(m).empty());
    }
    std::vector<std::vector<std::uint32_t>> layout(3);
    for (auto& l : layout) {
      for (std::uint32_t e = 0; e < 16; ++e) l.push_back(e / 4);
    }
    const auto ng = build_ngram_table(trace, layout, 4, 2);
    for (std::size_t r = 0; r < ng.rows(); ++r) {
      if (!ng.observed(r)) continue;
      double s = 0;
      for (std::uint32_t c = 0; c < 4; ++c) s += ng.probs[r * 4 + c];
      EXPECT_NEAR(s, 1.0, 1e-9);
      EXPECT_EQ(ng.probs[r * 4 + ng.best[r]], *std::max_element(ng.probs.begin() + r * 4, ng.probs.begin() + r * 4 + 4));
    }
  }
}

TEST(Property, SplitPartitionsRequests) {
  const auto topo = make_topology(2, 2, 4, 1, 1, 4, 8, 100);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto trace = testing::uniform_trace(topo, 37, seed);
    const auto [a, b] = split_by_request(trace, 0.25, seed);
    EXPECT_EQ(a.requests.size(), 9u);
    std::set<std::uint32_t> ids;
    for (const auto& r : a.requests) ids.insert(r.id);
    for (const auto& r : b.requests) ids.insert(r.id);
    EXPECT_EQ(ids.size(), 37u);
  }
}

TEST(Property, BundleSerializationRoundTrips) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::uint32_t E = 2 + static_cast<std::uint32_t>(rng.below(3));
    const auto b = random_bundle(50 + static_cast<std::uint32_t>(rng.below(50)), E, E * 2, 2, rng);
    std::stringstream s;
    write_bundle(s, b);
    const auto r = read_bundle(s);
    EXPECT_EQ(r.token_tables[0].labels, b.token_tables[0].labels);
    EXPECT_EQ(r.token_tables[0].confidence, b.token_tables[0].confidence);
    EXPECT_EQ(r.expert_tables, b.expert_tables);
    EXPECT_EQ(r.ngram.best, b.ngram.best);
    EXPECT_EQ(s.str().size(), 28 + bundle_memory_bytes(b).total() - b.ngram.rows() * 2);
  }
}

TEST(Property, SavingDecreasesWithVolume) {
  for (double G : {2.0, 4.0, 8.0, 16.0}) {
    for (double k : {1.0, 2.0, 6.0}) {
      const auto sw = sweep_alpha(G, k, 21);
      for (std::size_t i = 1; i < sw.size(); ++i) {
        EXPECT_LT(sw[i].smoe_volume, sw[i - 1].smoe_volume);
        EXPECT_GT(sw[i].saving, sw[i - 1].saving);
      }
    }
  }
}

}  // namespace
}  // namespace moesched
