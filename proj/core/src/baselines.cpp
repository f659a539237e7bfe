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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "moesched/error.hpp"
#include "moesched/solver.hpp"

namespace moesched {

namespace {

// Number of labelings of n items into e clusters of n/e each, saturating.
double balanced_labelings(std::uint32_t n, std::uint32_t e) {
  const std::uint32_t per = n / e;
  double log_count = std::lgamma(n + 1.0) - e * std::lgamma(per + 1.0);
  return std::exp(log_count);
}

// Calls fn(labels) for every balanced labeling in lexicographic order.
template <typename Fn>
void for_each_balanced(std::uint32_t n, std::uint32_t e, Fn&& fn) {
  const std::uint32_t cap = n / e;
  std::vector<std::uint32_t> labels(n, 0);
  std::vector<std::uint32_t> fill(e, 0);
  auto rec = [&](auto&& self, std::uint32_t pos) -> void {
    if (pos == n) {
      fn(labels);
      return;
    }
    for (std::uint32_t c = 0; c < e; ++c) {
      if (fill[c] == cap) continue;
      labels[pos] = c;
      ++fill[c];
      self(self, pos + 1);
      --fill[c];
    }
  };
  rec(rec, 0);
}

}  // namespace

BruteForceResult solve_bruteforce(const TokenExpertMatrix& matrix, const Topology& topo, double theta,
                                  std::uint64_t limit) {
  const std::uint32_t E = topo.E;
  const std::uint32_t N = matrix.num_experts;
  if (E == 0 || N % E != 0) throw ValidationError("E does not divide N");
  const std::size_t t = matrix.num_tokens();
  const double enumerations = std::pow(static_cast<double>(E), static_cast<double>(t)) * balanced_labelings(N, E);
  if (!(enumerations <= static_cast<double>(limit))) {
    throw ValidationError("instance too large for exhaustive search (" + std::to_string(enumerations) +
                          " assignments > limit " + std::to_string(limit) + ")");
  }

  BruteForceResult best;
  best.assignment.clusters = E;
  best.assignment.token_ids = matrix.token_ids;
  best.objective.combined = std::numeric_limits<double>::infinity();
  const double target = static_cast<double>(matrix.total) / E;

  std::vector<std::int64_t> mass(t * E);
  std::vector<std::uint32_t> tokens(t);
  std::vector<double> loads(E);
  for_each_balanced(N, E, [&](const std::vector<std::uint32_t>& experts) {
    std::fill(mass.begin(), mass.end(), 0);
    for (std::size_t j = 0; j < t; ++j) {
      for (std::size_t e = 0; e < N; ++e) mass[j * E + experts[e]] += matrix.count(j, e);
    }
    std::fill(tokens.begin(), tokens.end(), 0u);
    while (true) {
      ++best.enumerated;
      std::fill(loads.begin(), loads.end(), 0.0);
      std::int64_t local = 0;
      for (std::size_t j = 0; j < t; ++j) {
        loads[tokens[j]] += static_cast<double>(matrix.freq[j]);
        local += mass[j * E + tokens[j]];
      }
      ObjectiveValue v;
      for (double l : loads) v.l1 += std::abs(l - target);
      v.l2 = static_cast<double>(matrix.total - local);
      v.combined = theta * v.l1 + (1.0 - theta) * v.l2;
      if (v.combined < best.objective.combined) {
        best.objective = v;
        best.assignment.expert_labels = experts;
        best.assignment.token_labels = tokens;
      }
      // Next token labeling in lexicographic order (last token varies fastest).
      std::size_t pos = t;
      while (pos > 0 && tokens[pos - 1] == E - 1) tokens[--pos] = 0;
      if (pos == 0) break;
      ++tokens[pos - 1];
    }
  });
  return best;
}

Assignment baseline_round_robin(const Topology& topo, std::span<const std::uint32_t> token_ids) {
  if (topo.E == 0 || topo.N % topo.E != 0) throw ValidationError("E does not divide N");
  Assignment a;
  a.clusters = topo.E;
  a.token_ids.assign(token_ids.begin(), token_ids.end());
  if (!std::is_sorted(a.token_ids.begin(), a.token_ids.end())) throw ValidationError("token ids must be ascending");
  for (auto tok : a.token_ids) a.token_labels.push_back(tok % topo.E);
  const std::uint32_t per = topo.experts_per_cluster();
  for (std::uint32_t e = 0; e < topo.N; ++e) a.expert_labels.push_back(e / per);
  return a;
}

Assignment baseline_round_robin(const Topology& topo, std::uint32_t vocab) {
  std::vector<std::uint32_t> ids(vocab);
  std::iota(ids.begin(), ids.end(), 0u);
  return baseline_round_robin(topo, ids);
}

namespace {

struct KMeansRun {
  std::vector<std::uint32_t> labels;
  double inertia = std::numeric_limits<double>::infinity();
};

double squared_distance(const std::vector<double>& a, const double* b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Lloyd iterations where each assignment step fills clusters greedily by
// increasing distance, capping every cluster at n/e members.
KMeansRun balanced_kmeans(const std::vector<std::vector<double>>& points, std::uint32_t e, Rng& rng) {
  const std::size_t n = points.size();
  const std::size_t dim = points.empty() ? 0 : points[0].size();
  const std::size_t cap = n / e;
  std::vector<double> centroids(e * dim);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  std::copy(points[first].begin(), points[first].end(), centroids.begin());
  for (std::uint32_t c = 1; c < e; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], centroids.data() + (c - 1) * dim));
    }
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    const std::size_t pick = total > 0.0 ? rng.categorical(d2) : rng.below(n);
    std::copy(points[pick].begin(), points[pick].end(), centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }

  KMeansRun run;
  run.labels.assign(n, 0);
  std::vector<std::uint32_t> previous;
  std::vector<std::tuple<double, std::size_t, std::uint32_t>> pairs;
  for (int iter = 0; iter < 100; ++iter) {
    pairs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::uint32_t c = 0; c < e; ++c) pairs.emplace_back(squared_distance(points[i], centroids.data() + c * dim), i, c);
    }
    std::sort(pairs.begin(), pairs.end());
    std::vector<bool> placed(n, false);
    std::vector<std::size_t> fill(e, 0);
    run.inertia = 0.0;
    for (const auto& [d, i, c] : pairs) {
      if (placed[i] || fill[c] == cap) continue;
      placed[i] = true;
      ++fill[c];
      run.labels[i] = c;
      run.inertia += d;
    }
    if (run.labels == previous) break;
    previous = run.labels;
    std::fill(centroids.begin(), centroids.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < dim; ++k) centroids[run.labels[i] * dim + k] += points[i][k];
    }
    for (std::uint32_t c = 0; c < e; ++c) {
      for (std::size_t k = 0; k < dim; ++k) centroids[c * dim + k] /= static_cast<double>(cap);
    }
  }
  return run;
}

}  // namespace

Assignment baseline_two_stage_kmeans(const TokenExpertMatrix& matrix, const Topology& topo, std::uint64_t seed,
                                     double beta) {
  const std::uint32_t E = topo.E;
  const std::uint32_t N = matrix.num_experts;
  if (E == 0 || N % E != 0) throw ValidationError("E does not divide N");
  if (matrix.total == 0) throw ValidationError("two-stage k-means needs a non-empty activation matrix");
  const std::size_t t = matrix.num_tokens();

  Assignment a;
  a.clusters = E;
  a.token_ids = matrix.token_ids;
  a.expert_labels.assign(N, 0);
  a.token_labels.assign(t, 0);
  if (E == 1) return a;

  // Stage 1: expert columns of the row-normalized counts.
  std::vector<std::vector<double>> columns(N, std::vector<double>(t, 0.0));
  for (std::size_t j = 0; j < t; ++j) {
    if (matrix.freq[j] == 0) continue;
    for (std::size_t e = 0; e < N; ++e) {
      columns[e][j] = static_cast<double>(matrix.count(j, e)) / static_cast<double>(matrix.freq[j]);
    }
  }
  constexpr int kRestarts = 8;
  KMeansRun best;
  for (int r = 0; r < kRestarts; ++r) {
    Rng rng(stream_seed(seed, 0x6b6d, static_cast<std::uint64_t>(r)));
    auto run = balanced_kmeans(columns, E, rng);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  a.expert_labels = best.labels;

  // Stage 2: tokens, heaviest first, to the cluster holding most of their mass.
  std::vector<std::size_t> order(t);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return matrix.freq[x] > matrix.freq[y]; });
  const double capacity = static_cast<double>(matrix.total) / E * beta;
  std::vector<double> load(E, 0.0);
  std::vector<std::int64_t> mass(E);
  std::vector<std::uint32_t> rank(E);
  for (auto j : order) {
    std::fill(mass.begin(), mass.end(), 0);
    for (std::size_t e = 0; e < N; ++e) mass[a.expert_labels[e]] += matrix.count(j, e);
    std::iota(rank.begin(), rank.end(), 0u);
    std::stable_sort(rank.begin(), rank.end(), [&](std::uint32_t x, std::uint32_t y) { return mass[x] > mass[y]; });
    std::uint32_t chosen = E;
    for (auto c : rank) {
      if (load[c] < capacity) {
        chosen = c;
        break;
      }
    }
    if (chosen == E) chosen = static_cast<std::uint32_t>(std::min_element(load.begin(), load.end()) - load.begin());
    a.token_labels[j] = chosen;
    load[chosen] += static_cast<double>(matrix.freq[j]);
  }
  return a;
}

PlacementMetrics metrics(const Assignment& assign, const TokenExpertMatrix& matrix) {
  if (matrix.total == 0) throw ValidationError("no activation events to score");
  if (assign.expert_labels.size() != matrix.num_experts) throw ValidationError("expert layout size mismatch");
  PlacementMetrics out;
  out.cluster_load.assign(assign.clusters, 0);
  std::int64_t local = 0;
  for (std::size_t j = 0; j < matrix.num_tokens(); ++j) {
    const auto c = assign.label_of_token(matrix.token_ids[j]);
    for (std::size_t e = 0; e < matrix.num_experts; ++e) {
      const auto n = matrix.count(j, e);
      out.cluster_load[assign.expert_labels[e]] += n;
      if (assign.expert_labels[e] == c) local += n;
    }
  }
  out.lar = static_cast<double>(local) / static_cast<double>(matrix.total);
  std::vector<std::int64_t> sorted = out.cluster_load;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? static_cast<double>(sorted[n / 2])
                                   : 0.5 * static_cast<double>(sorted[n / 2 - 1] + sorted[n / 2]);
  out.imbalance = median > 0.0 ? static_cast<double>(sorted.back()) / median : std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace moesched
