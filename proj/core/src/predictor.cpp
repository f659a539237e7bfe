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

#include "moesched/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moesched/error.hpp"

namespace moesched {

std::optional<std::size_t> TokenExpertConfidence::row_of(std::uint32_t token) const {
  const auto it = std::lower_bound(token_ids.begin(), token_ids.end(), token);
  if (it == token_ids.end() || *it != token) return std::nullopt;
  return static_cast<std::size_t>(it - token_ids.begin());
}

std::vector<std::uint32_t> TokenExpertConfidence::top_k(std::size_t row_idx, std::uint32_t k) const {
  const auto r = row(row_idx);
  std::vector<std::uint32_t> idx(num_experts);
  std::iota(idx.begin(), idx.end(), 0u);
  const auto keep = std::min<std::size_t>(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return r[a] > r[b] || (r[a] == r[b] && a < b); });
  idx.resize(keep);
  return idx;
}

TokenExpertConfidence build_confidence_table(const TokenExpertMatrix& matrix) {
  TokenExpertConfidence c;
  c.layer = matrix.layer;
  c.num_experts = matrix.num_experts;
  c.token_ids = matrix.token_ids;
  c.probs.assign(matrix.counts.size(), 0.0);
  c.unseen.assign(matrix.num_tokens(), false);
  for (std::size_t j = 0; j < matrix.num_tokens(); ++j) {
    if (matrix.freq[j] <= 0) {
      c.unseen[j] = true;
      continue;
    }
    const double a = static_cast<double>(matrix.freq[j]);
    for (std::size_t e = 0; e < matrix.num_experts; ++e) {
      c.probs[j * matrix.num_experts + e] = static_cast<double>(matrix.count(j, e)) / a;
    }
  }
  return c;
}

TokenDeviceTable make_token_table(std::uint32_t vocab, std::uint32_t clusters,
                                  std::span<const std::uint32_t> token_ids,
                                  std::span<const std::uint32_t> labels,
                                  std::span<const double> confidences) {
  if (clusters == 0 || clusters > 65536) throw ValidationError("cluster count must lie in [1, 65536]");
  if (token_ids.size() != labels.size() || labels.size() != confidences.size()) {
    throw ValidationError("token table inputs have different lengths");
  }
  TokenDeviceTable table;
  table.clusters = clusters;
  table.labels.resize(vocab);
  table.confidence.assign(vocab, 1.0f / static_cast<float>(clusters));
  table.provenance.assign(vocab, Provenance::kFallback);
  for (std::uint32_t tok = 0; tok < vocab; ++tok) table.labels[tok] = static_cast<std::uint16_t>(tok % clusters);
  for (std::size_t j = 0; j < token_ids.size(); ++j) {
    const auto tok = token_ids[j];
    if (tok >= vocab) throw ValidationError("token id " + std::to_string(tok) + " outside vocabulary");
    if (labels[j] >= clusters) throw ValidationError("token label out of range");
    table.labels[tok] = static_cast<std::uint16_t>(labels[j]);
    table.confidence[tok] = static_cast<float>(std::clamp(confidences[j], 0.0, 1.0));
    table.provenance[tok] = Provenance::kProfiled;
  }
  return table;
}

TokenDeviceTable token_table_for_layout(const TokenExpertConfidence& confidence,
                                        std::span<const std::uint32_t> expert_cluster, std::uint32_t clusters,
                                        std::uint32_t vocab) {
  if (expert_cluster.size() != confidence.num_experts) throw ValidationError("expert layout size mismatch");
  std::vector<std::uint32_t> ids;
  std::vector<std::uint32_t> labels;
  std::vector<double> conf;
  std::vector<double> mass(clusters);
  for (std::size_t j = 0; j < confidence.token_ids.size(); ++j) {
    if (confidence.unseen[j]) continue;
    std::fill(mass.begin(), mass.end(), 0.0);
    const auto r = confidence.row(j);
    for (std::size_t e = 0; e < r.size(); ++e) mass[expert_cluster[e]] += r[e];
    const auto best = static_cast<std::uint32_t>(std::max_element(mass.begin(), mass.end()) - mass.begin());
    ids.push_back(confidence.token_ids[j]);
    labels.push_back(best);
    conf.push_back(mass[best]);
  }
  return make_token_table(vocab, clusters, ids, labels, conf);
}

TokenDeviceTable extrapolate_oov(const TokenDeviceTable& table, const EmbeddingTable& embeddings,
                                 std::span<const std::uint32_t> profiled) {
  if (profiled.empty()) throw ValidationError("extrapolation needs at least one profiled token");
  if (embeddings.vocab() < table.vocab()) throw ValidationError("embeddings do not cover the vocabulary");

  std::vector<std::uint32_t> anchors(profiled.begin(), profiled.end());
  std::sort(anchors.begin(), anchors.end());
  anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
  std::vector<bool> is_profiled(table.vocab(), false);
  for (auto tok : anchors) {
    if (tok >= table.vocab()) throw ValidationError("profiled token outside vocabulary");
    is_profiled[tok] = true;
  }
  std::vector<double> anchor_norm(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) anchor_norm[a] = embeddings.norm(anchors[a]);

  TokenDeviceTable out = table;
  const std::uint32_t dim = embeddings.dim;
  for (std::uint32_t tok = 0; tok < table.vocab(); ++tok) {
    if (is_profiled[tok]) continue;
    out.labels[tok] = static_cast<std::uint16_t>(tok % table.clusters);
    out.confidence[tok] = 1.0f / static_cast<float>(table.clusters);
    out.provenance[tok] = Provenance::kFallback;
    const double norm = embeddings.norm(tok);
    if (norm == 0.0) continue;
    const auto q = embeddings.row(tok);
    double best_sim = -std::numeric_limits<double>::infinity();
    std::int64_t best = -1;
    // Anchors are ascending, so a strict comparison keeps the lowest id on ties.
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (anchor_norm[a] == 0.0) continue;
      const auto v = embeddings.row(anchors[a]);
      double dot = 0.0;
      for (std::uint32_t d = 0; d < dim; ++d) dot += static_cast<double>(q[d]) * v[d];
      const double sim = dot / (norm * anchor_norm[a]);
      if (sim > best_sim) {
        best_sim = sim;
        best = static_cast<std::int64_t>(a);
      }
    }
    if (best < 0) continue;
    const auto src = anchors[static_cast<std::size_t>(best)];
    out.labels[tok] = table.labels[src];
    out.confidence[tok] = table.confidence[src];
    out.provenance[tok] = Provenance::kExtrapolated;
  }
  return out;
}

std::size_t DeviceNGramTable::row_index(std::span<const std::uint32_t> history) const {
  std::size_t r = 0;
  for (auto d : history) r = r * clusters + d;
  return r;
}

void DeviceNGramTable::refresh_best() {
  for (std::size_t r = 0; r < rows(); ++r) {
    const auto* p = probs.data() + r * clusters;
    best[r] = static_cast<std::uint16_t>(std::max_element(p, p + clusters) - p);
  }
}

DeviceNGramTable build_ngram_table(const RequestTrace& trace,
                                   const std::vector<std::vector<std::uint32_t>>& expert_cluster,
                                   std::uint32_t clusters, std::uint32_t n) {
  if (!trace.has_routing()) throw ValidationError("n-gram model needs routed trace data");
  if (expert_cluster.size() != trace.layers) throw ValidationError("need one expert layout per layer");
  if (clusters == 0) throw ValidationError("cluster count must be positive");
  std::size_t rows = 1;
  for (std::uint32_t i = 0; i < n; ++i) {
    rows *= clusters;
    if (rows > (1u << 24)) throw ValidationError("n-gram table too large");
  }
  DeviceNGramTable table;
  table.n = n;
  table.clusters = clusters;
  table.probs.assign(rows * clusters, 0.0);
  table.best.assign(rows, 0);
  table.observations.assign(rows, 0);

  std::vector<std::int64_t> counts(rows * clusters, 0);
  std::vector<std::uint32_t> devices(trace.layers);
  for (const auto& req : trace.requests) {
    for (std::size_t pos = 0; pos < req.tokens.size(); ++pos) {
      for (std::uint32_t l = 0; l < trace.layers; ++l) {
        const auto top1 = trace.experts(req, pos, l)[0];
        if (top1 >= expert_cluster[l].size()) throw ValidationError("expert layout does not cover routed expert");
        devices[l] = expert_cluster[l][top1];
      }
      for (std::uint32_t l = n; l < trace.layers; ++l) {
        const auto r = table.row_index(std::span<const std::uint32_t>(devices).subspan(l - n, n));
        counts[r * clusters + devices[l]] += 1;
        table.observations[r] += 1;
      }
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (table.observations[r] == 0) continue;
    const double total = static_cast<double>(table.observations[r]);
    for (std::uint32_t d = 0; d < clusters; ++d) {
      table.probs[r * clusters + d] = static_cast<double>(counts[r * clusters + d]) / total;
    }
  }
  table.refresh_best();
  return table;
}

PredictorScore evaluate_predictor(const TokenExpertConfidence& confidence, const TokenExpertMatrix& holdout,
                                  std::uint32_t k) {
  if (holdout.total == 0) throw ValidationError("holdout profile is empty");
  if (holdout.num_experts != confidence.num_experts) throw ValidationError("holdout has a different expert count");
  if (k == 0) throw ValidationError("k must be positive");
  PredictorScore s;
  s.actual = holdout.total;
  for (std::size_t j = 0; j < holdout.num_tokens(); ++j) {
    const auto src = confidence.row_of(holdout.token_ids[j]);
    if (!src || confidence.unseen[*src]) continue;
    // Each occurrence routes to k experts, so occurrences = a_j / k.
    s.predicted += holdout.freq[j];
    for (auto e : confidence.top_k(*src, k)) s.correct += holdout.count(j, e);
  }
  s.precision = s.predicted > 0 ? static_cast<double>(s.correct) / static_cast<double>(s.predicted) : 0.0;
  s.recall = static_cast<double>(s.correct) / static_cast<double>(s.actual);
  s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::vector<double> activation_kurtosis(const TokenExpertMatrix& matrix) {
  std::vector<double> out(matrix.num_tokens());
  const double n = static_cast<double>(matrix.num_experts);
  for (std::size_t j = 0; j < matrix.num_tokens(); ++j) {
    const auto r = matrix.row(j);
    double mean = 0.0;
    for (auto c : r) mean += static_cast<double>(c);
    mean /= n;
    double m2 = 0.0;
    double m4 = 0.0;
    for (auto c : r) {
      const double d = static_cast<double>(c) - mean;
      m2 += d * d;
      m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    out[j] = m2 > 0.0 ? m4 / (m2 * m2) : kZeroVarianceKurtosis;
  }
  return out;
}

}  // namespace moesched
