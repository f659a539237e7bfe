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
#include <limits>
#include <span>
#include <vector>

#include "moesched/trace.hpp"

namespace moesched {

/// Pr(expert | token) estimated from activation counts.
struct TokenExpertConfidence {
  std::uint32_t layer = 0;
  std::uint32_t num_experts = 0;
  std::vector<std::uint32_t> token_ids;
  std::vector<double> probs;  // t x N
  std::vector<bool> unseen;   // rows with zero frequency are all-zero

  std::span<const double> row(std::size_t j) const { return {probs.data() + j * num_experts, num_experts}; }
  std::optional<std::size_t> row_of(std::uint32_t token) const;
  /// Experts with the k largest probabilities, lowest index first on ties.
  std::vector<std::uint32_t> top_k(std::size_t row, std::uint32_t k) const;
};

TokenExpertConfidence build_confidence_table(const TokenExpertMatrix& matrix);

enum class Provenance : std::uint8_t { kProfiled = 0, kExtrapolated = 1, kFallback = 2 };

/// Token -> device lookup for the whole vocabulary.
struct TokenDeviceTable {
  std::uint32_t clusters = 1;
  std::vector<std::uint16_t> labels;
  std::vector<float> confidence;
  std::vector<Provenance> provenance;

  std::size_t vocab() const { return labels.size(); }
};

/// Table whose profiled rows come from a solver and whose remaining rows
/// use the fallback rule (label = token mod E, confidence = 1/E).
TokenDeviceTable make_token_table(std::uint32_t vocab, std::uint32_t clusters,
                                  std::span<const std::uint32_t> token_ids,
                                  std::span<const std::uint32_t> labels,
                                  std::span<const double> confidences);

/// Token table for a fixed expert layout: each profiled token goes to the
/// cluster holding most of its predicted activation mass.
TokenDeviceTable token_table_for_layout(const TokenExpertConfidence& confidence,
                                        std::span<const std::uint32_t> expert_cluster, std::uint32_t clusters,
                                        std::uint32_t vocab);

/// Fills every non-profiled token from its nearest profiled neighbour by
/// cosine similarity (ties to the lower token id). Tokens with a zero-norm
/// embedding, or with no usable profiled neighbour, keep the fallback rule.
TokenDeviceTable extrapolate_oov(const TokenDeviceTable& table, const EmbeddingTable& embeddings,
                                 std::span<const std::uint32_t> profiled);

/// n-gram model over the device sequence of a token's previous n layers.
struct DeviceNGramTable {
  std::uint32_t n = 2;
  std::uint32_t clusters = 1;
  std::vector<double> probs;         // clusters^n x clusters
  std::vector<std::uint16_t> best;   // row argmax
  std::vector<std::int64_t> observations;  // per row

  std::size_t rows() const { return best.size(); }
  bool observed(std::size_t r) const { return observations[r] > 0; }
  /// Confidence of the row's best device; 0 for unobserved rows.
  double confidence(std::size_t r) const { return observed(r) ? probs[r * clusters + best[r]] : 0.0; }
  /// Row index for a history given oldest device first.
  std::size_t row_index(std::span<const std::uint32_t> history) const;
  /// Recomputes `best` from `probs` (ties to the lowest device).
  void refresh_best();
};

/// Device of a routing event is the cluster of the gate's top-1 expert.
/// `expert_cluster` holds one expert -> cluster map per layer.
DeviceNGramTable build_ngram_table(const RequestTrace& trace,
                                   const std::vector<std::vector<std::uint32_t>>& expert_cluster,
                                   std::uint32_t clusters, std::uint32_t n);

struct PredictorScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t predicted = 0;  // predictions issued (k per occurrence of a known token)
  std::int64_t correct = 0;
  std::int64_t actual = 0;     // holdout activation events
};

/// Static top-k prediction scored against holdout activations.
///
/// Every occurrence of a token known to `confidence` predicts that token's k
/// most likely experts. A prediction is correct when the occurrence actually
/// activated that expert. Counting is micro-averaged over (token, expert)
/// events: precision = correct / predicted, recall = correct / actual, and
/// occurrences of unknown tokens only add to `actual`.
PredictorScore evaluate_predictor(const TokenExpertConfidence& confidence, const TokenExpertMatrix& holdout,
                                  std::uint32_t k);

/// Pearson kurtosis m4 / m2^2 of each row's N counts. Rows with zero
/// variance report +infinity.
std::vector<double> activation_kurtosis(const TokenExpertMatrix& matrix);

inline constexpr double kZeroVarianceKurtosis = std::numeric_limits<double>::infinity();

}  // namespace moesched
