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

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moesched/random.hpp"
#include "moesched/trace.hpp"

namespace moesched {

/// Token -> cluster (R) and expert -> cluster (C) labels of one layer.
struct Assignment {
  std::uint32_t clusters = 1;
  std::vector<std::uint32_t> token_ids;     // ascending, aligned with token_labels
  std::vector<std::uint32_t> token_labels;  // R
  std::vector<std::uint32_t> expert_labels; // C

  /// Cluster of `token`; tokens without a label use token mod E.
  std::uint32_t label_of_token(std::uint32_t token) const;
};

struct SolverConfig {
  double theta = 0.5;
  std::uint32_t n_steps = 50;
  std::uint32_t samples = 128;  // K, per CEO iteration
  double rho = 0.2;
  double beta = 1.1;
  double eta = 0.7;
  std::uint32_t ft_steps = 64;
  double alpha_e = 1.0;
  double beta_e = 1.0;
  double gamma_e = 1.0;
  double alpha_r = 1.0;
  double beta_r = 1.0;
  bool strict_request_balance = true;
  std::uint32_t threads = 1;
  std::uint64_t seed = 0;

  /// Throws ValidationError when a field leaves its documented range.
  void validate() const;
};

struct ObjectiveValue {
  double l1 = 0.0;        // sum_i |token load of cluster i - S/E|
  double l2 = 0.0;        // activation mass between different clusters
  double combined = 0.0;  // theta * l1 + (1 - theta) * l2
};

ObjectiveValue objective(const Assignment& assign, const TokenExpertMatrix& matrix, double theta);

/// Human-readable violations of the hard constraints (label ranges, one
/// label per token/expert, exactly N/E experts per cluster). Empty when valid.
std::vector<std::string> check_constraints(const Assignment& assign, const Topology& topo);

enum class SampleKind { kExpert, kToken };

/// Draws one label per row of `p_matrix` (rows x clusters, row-major) in row
/// order. Expert rows mask a cluster once it holds rows/clusters members;
/// token rows add `freq[i]` to their cluster and mask it once the load
/// reaches sum(freq)/clusters * beta. A row whose remaining mass is zero
/// draws uniformly from the unmasked clusters; when every cluster is masked
/// the least-loaded one is used.
std::vector<std::uint32_t> sample_labels(std::span<const double> p_matrix, std::uint32_t clusters, SampleKind kind,
                                         std::span<const std::int64_t> freq, double beta, Rng& rng);

struct CeoResult {
  Assignment assignment;
  std::vector<double> token_confidence;   // T_p, aligned with token rows
  std::vector<double> expert_confidence;
  ObjectiveValue objective;
  std::vector<double> iteration_best_score;   // best sample score per iteration
  std::vector<double> best_so_far_score;      // running max of the above
  bool from_best_sample = false;              // true when a sampled start beat the decoded argmax
};

/// Cross-entropy co-clustering of tokens and experts. Each iteration draws
/// K capacity-masked expert and token samples, scores pair s by its
/// within-cluster activation mass, and moves both probability matrices
/// toward the label frequencies of the top-rho elite. Labels are decoded by
/// row argmax (experts with a capacity-respecting greedy pass). The decoded
/// labels, the best sample seen and the final elite samples are each improved
/// by local search (token moves, token swaps, expert swaps) and the lowest
/// objective wins.
CeoResult solve_ceo(const TokenExpertMatrix& matrix, const Topology& topo, const SolverConfig& config);

struct AlternatingResult {
  Assignment assignment;
  std::vector<double> token_confidence;
  std::vector<std::uint32_t> request_labels;  // aligned with the input requests
  double score = 0.0;                         // load excess + predicted remote fraction
};

/// Alternates greedy expert placement (fixed requests) with greedy request
/// scheduling (fixed experts) and keeps the best-scoring iterate. Token
/// labels follow the clusters their occurrences were scheduled to.
AlternatingResult solve_alternating(const TokenExpertMatrix& matrix, const RequestTrace& requests,
                                    const Topology& topo, const SolverConfig& config);

struct BruteForceResult {
  Assignment assignment;
  ObjectiveValue objective;
  std::uint64_t enumerated = 0;
};

inline constexpr std::uint64_t kBruteForceLimit = 10'000'000;

/// Exhaustive optimum over balanced expert partitions x token labelings.
/// Ties resolve to the lexicographically smallest (experts, tokens) pair.
BruteForceResult solve_bruteforce(const TokenExpertMatrix& matrix, const Topology& topo, double theta,
                                  std::uint64_t limit = kBruteForceLimit);

/// Contiguous expert blocks and token id mod E.
Assignment baseline_round_robin(const Topology& topo, std::span<const std::uint32_t> token_ids);
Assignment baseline_round_robin(const Topology& topo, std::uint32_t vocab);

/// Balanced k-means over expert columns of the row-normalized counts, then
/// capacity-limited greedy token placement.
Assignment baseline_two_stage_kmeans(const TokenExpertMatrix& matrix, const Topology& topo, std::uint64_t seed,
                                     double beta = 1.1);

struct PlacementMetrics {
  double lar = 0.0;
  double imbalance = 0.0;
  std::vector<std::int64_t> cluster_load;  // activations processed by each cluster's experts
};

/// Local activation rate and max/median cluster load of `matrix` under `assign`.
PlacementMetrics metrics(const Assignment& assign, const TokenExpertMatrix& matrix);

}  // namespace moesched
