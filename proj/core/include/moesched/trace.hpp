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
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moesched {

/// Deployment shape. `E` clusters are mapped one-to-one onto expert-parallel
/// ranks; `G` is the device count the communication model prices.
struct Topology {
  std::uint32_t G = 1;      // devices
  std::uint32_t E = 1;      // EP degree / number of co-clusters
  std::uint32_t N = 1;      // experts per MoE layer
  std::uint32_t k = 1;      // experts routed per token
  std::uint32_t L = 1;      // MoE layers
  std::uint32_t B = 1;      // global batch size (requests per batch)
  std::uint32_t S_seq = 1;  // sequence length
  std::uint32_t vocab = 1;

  /// Throws ValidationError when a field is zero, k > N or E does not divide N.
  void validate() const;
  std::uint32_t experts_per_cluster() const { return N / E; }

  friend bool operator==(const Topology&, const Topology&) = default;
};

/// Parses `key=value` lines (`#` comments allowed). Unknown keys are ignored
/// so the same file can carry experiment settings.
Topology parse_topology(std::istream& in);
Topology load_topology(const std::filesystem::path& path);
void write_topology(std::ostream& out, const Topology& topo);

/// Per-layer activation counts. Row j describes token `token_ids[j]`; tokens
/// that never occur in the profile have no row.
struct TokenExpertMatrix {
  std::uint32_t layer = 0;
  std::uint32_t num_experts = 0;
  std::vector<std::uint32_t> token_ids;  // ascending
  std::vector<std::int64_t> counts;      // row-major, token_ids.size() x num_experts
  std::vector<std::int64_t> freq;        // a[j], row sums
  std::int64_t total = 0;                // S

  /// Builds a matrix and derives `freq` and `total` from `counts`.
  static TokenExpertMatrix from_counts(std::uint32_t layer, std::uint32_t num_experts,
                                       std::vector<std::uint32_t> token_ids,
                                       std::vector<std::int64_t> counts);

  std::size_t num_tokens() const { return token_ids.size(); }
  std::int64_t count(std::size_t row, std::size_t expert) const {
    return counts[row * num_experts + expert];
  }
  std::span<const std::int64_t> row(std::size_t j) const {
    return {counts.data() + j * num_experts, num_experts};
  }
  bool unseen(std::size_t j) const { return freq[j] == 0; }
  std::optional<std::size_t> row_of(std::uint32_t token) const;
  /// Activation load received by each expert (column sums).
  std::vector<std::int64_t> expert_loads() const;
};

struct ValidationIssue {
  std::string what;
  std::int64_t row = -1;
  std::int64_t col = -1;
};

/// Every violated structural invariant, with its index. Empty when valid.
std::vector<ValidationIssue> validate(const TokenExpertMatrix& matrix);

/// One request: its tokens and, optionally, the gate's routing decisions.
struct Request {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> tokens;
  /// tokens.size() * layers * k expert ids in gate-rank order, or empty.
  std::vector<std::uint32_t> routed;
};

struct RequestTrace {
  std::uint32_t layers = 1;
  std::uint32_t top_k = 1;
  std::vector<Request> requests;

  bool has_routing() const;
  std::span<const std::uint32_t> experts(const Request& r, std::size_t pos, std::size_t layer) const {
    return {r.routed.data() + (pos * layers + layer) * top_k, top_k};
  }
  std::size_t num_occurrences() const;
};

/// Throws ValidationError naming the first request that breaks the
/// token-range or routing invariants.
void validate_trace(const RequestTrace& trace, const Topology& topo);

struct Profile {
  std::vector<TokenExpertMatrix> layers;
  RequestTrace trace;
};

/// Per-layer deduplicated activation matrices of a routed trace.
std::vector<TokenExpertMatrix> build_matrices(const RequestTrace& trace, std::uint32_t num_experts);

/// Reads the JSONL trace format
/// `{"req": int, "pos": int, "token": int, "layer": int, "experts": [int; k]}`.
/// Malformed records raise ValidationError with the 1-based line number.
Profile ingest_profile(std::istream& in, const Topology& topo);
Profile ingest_profile(const std::filesystem::path& path, const Topology& topo);

/// Writes one record per (request, position, layer). Requests without
/// routing are skipped since the format requires an expert list.
void write_trace_jsonl(std::ostream& out, const RequestTrace& trace);

/// Splits by request: a seeded shuffle puts round(fraction * R) requests in
/// the first half.
std::pair<RequestTrace, RequestTrace> split_by_request(const RequestTrace& trace, double fraction,
                                                       std::uint64_t seed);

struct EmbeddingTable {
  std::uint32_t dim = 0;
  std::vector<float> vectors;  // vocab x dim

  std::size_t vocab() const { return dim == 0 ? 0 : vectors.size() / dim; }
  std::span<const float> row(std::size_t token) const { return {vectors.data() + token * dim, dim}; }
  double norm(std::size_t token) const;
};

/// Rejects NaN entries. Returns the ids of zero-norm rows.
std::vector<std::uint32_t> validate_embeddings(const EmbeddingTable& table);

/// CSV (`vocab,dim` header line then one row per token) or binary
/// (`MSEM`, u32 vocab, u32 dim, little-endian float32 rows). Detected by magic.
EmbeddingTable load_embeddings(const std::filesystem::path& path);
void write_embeddings_csv(std::ostream& out, const EmbeddingTable& table);
void write_embeddings_binary(std::ostream& out, const EmbeddingTable& table);

struct PlantedOptions {
  std::uint32_t tokens_per_cluster = 10;  // m
  std::uint32_t occurrences_per_token = 8;
  double noise = 0.0;                     // epsilon
  double skew = 0.0;                      // within-block Zipf exponent, 0 = uniform
  bool pure_requests = true;              // each request drawn from one cluster
  std::uint32_t embedding_dim = 0;        // 0 = no embeddings
  std::uint64_t seed = 0;
};

struct PlantedProfile {
  Profile profile;
  std::vector<std::uint32_t> token_ids;       // planted tokens, ascending
  std::vector<std::uint32_t> token_cluster;   // aligned with token_ids
  std::vector<std::vector<std::uint32_t>> expert_block;  // [layer][expert]
  std::vector<std::uint32_t> request_cluster;  // only meaningful for pure requests
  std::optional<EmbeddingTable> embeddings;
};

/// Bi-clustered synthetic profile. Each token belongs to one of `topo.E`
/// clusters; every routed slot picks the token's own expert block with
/// probability 1 - noise and a uniformly chosen other block otherwise, then
/// an unused expert of that block (weighted by the token's within-block
/// preference when skew > 0). Expert blocks have exactly N/E experts and are
/// a fresh random partition per layer. Requires k <= N/E and m*E <= vocab.
PlantedProfile synthesize_planted_profile(const Topology& topo, const PlantedOptions& opts);

}  // namespace moesched
