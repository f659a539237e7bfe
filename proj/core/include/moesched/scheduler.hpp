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
#include <vector>

#include "moesched/error.hpp"
#include "moesched/predictor.hpp"
#include "moesched/trace.hpp"

namespace moesched {

/// Solved lookup tables for every MoE layer of one deployment.
struct LookupBundle {
  std::uint32_t vocab = 0;
  std::uint32_t clusters = 1;  // E
  std::uint32_t layers = 1;    // L
  std::uint32_t num_experts = 1;
  std::vector<TokenDeviceTable> token_tables;            // per layer
  std::vector<std::vector<std::uint32_t>> expert_tables; // per layer, expert -> cluster
  DeviceNGramTable ngram;

  /// Throws ValidationError on out-of-range labels or confidences, or
  /// tables whose sizes disagree with the header fields.
  void validate() const;
};

/// Serializes the bundle, little-endian:
///   char[4] "MSLB", u32 version (1), u32 vocab, u32 E, u32 n, u32 L, u32 N,
///   i16 token labels [L][vocab], f32 token confidences [L][vocab],
///   f32 n-gram probabilities [E^n][E], i16 expert labels [L][N].
void write_bundle(std::ostream& out, const LookupBundle& bundle);
LookupBundle read_bundle(std::istream& in);
void save_bundle(const std::filesystem::path& path, const LookupBundle& bundle);
LookupBundle load_bundle(const std::filesystem::path& path);

/// Device per token: the n-gram table's device when the token has a history
/// row whose confidence strictly exceeds the token table's, else the token
/// table's label. `history` holds n devices per token (oldest first) or is
/// empty when no previous layers exist.
std::vector<std::uint32_t> lookup_device(std::span<const std::uint32_t> batch,
                                         std::span<const std::uint32_t> history, const LookupBundle& bundle,
                                         std::uint32_t layer);

inline constexpr std::uint32_t kPadToken = 0xffffffffu;

/// Output slot s holds input element perm[s]; sources >= `inputs` are
/// padding. Slots [g * group_size, (g + 1) * group_size) belong to device g.
struct ShuffleIndices {
  std::vector<std::uint32_t> perm;
  std::vector<bool> pad_mask;
  std::uint32_t inputs = 0;
  std::uint32_t devices = 1;
  std::uint32_t group_size = 0;

  std::uint32_t device_of_slot(std::size_t slot) const { return static_cast<std::uint32_t>(slot / group_size); }
};

/// Stable argsort by device, grouped per device and padded so every group has
/// as many slots as the largest one.
ShuffleIndices make_shuffle_indices(std::span<const std::uint32_t> device_ids, std::uint32_t devices);

template <typename T>
std::vector<T> apply_shuffle(std::span<const T> values, const ShuffleIndices& idx, const T& pad) {
  if (values.size() != idx.inputs) throw ValidationError("shuffle input length differs from the indices");
  std::vector<T> out(idx.perm.size(), pad);
  for (std::size_t s = 0; s < idx.perm.size(); ++s) {
    if (!idx.pad_mask[s]) out[s] = values[idx.perm[s]];
  }
  return out;
}

template <typename T>
std::vector<T> resume(std::span<const T> shuffled, const ShuffleIndices& idx) {
  if (shuffled.size() != idx.perm.size()) throw ValidationError("resume input length differs from the indices");
  std::vector<T> out(idx.inputs);
  for (std::size_t s = 0; s < idx.perm.size(); ++s) {
    if (!idx.pad_mask[s]) out[idx.perm[s]] = shuffled[s];
  }
  return out;
}

struct RebatchResult {
  std::vector<std::uint32_t> tokens;  // shuffled, kPadToken in padding slots
  ShuffleIndices indices;
};

RebatchResult rebatch_tokens(std::span<const std::uint32_t> batch, std::span<const std::uint32_t> history,
                             const LookupBundle& bundle, std::uint32_t layer, std::uint32_t devices);
std::vector<std::uint32_t> resume_tokens(std::span<const std::uint32_t> shuffled, const ShuffleIndices& indices);

/// Attention-DP request placement. Not thread-safe: one caller at a time.
class RequestScheduler {
 public:
  explicit RequestScheduler(std::uint32_t devices);

  /// Device with the most request tokens labeled for it among the devices not
  /// yet used in the current round (lowest id on ties). The mask resets once
  /// every device has been used.
  std::uint32_t schedule(std::span<const std::uint32_t> request, const TokenDeviceTable& table);

  const std::vector<char>& open_devices() const { return open_; }

 private:
  std::uint32_t devices_;
  std::vector<char> open_;
  std::vector<double> score_;
};

/// slot -> original expert, placing clusters contiguously.
struct GatePermutation {
  std::vector<std::uint32_t> expert_perm;
  std::vector<std::uint32_t> inverse;  // original expert -> slot
};

GatePermutation make_gate_permutation(std::span<const std::uint32_t> expert_cluster, std::uint32_t clusters);

template <typename Payload, typename Column>
struct ShuffledExperts {
  std::vector<Payload> payloads;
  std::vector<Column> gate_columns;
  GatePermutation permutation;
};

/// Reorders expert payloads and gate columns with the same permutation so a
/// gate evaluated on the shuffled columns selects the same physical experts.
template <typename Payload, typename Column>
ShuffledExperts<Payload, Column> apply_expert_shuffle(std::span<const Payload> payloads,
                                                      std::span<const Column> gate_columns,
                                                      std::span<const std::uint32_t> expert_cluster,
                                                      std::uint32_t clusters) {
  if (payloads.size() != expert_cluster.size() || gate_columns.size() != expert_cluster.size()) {
    throw ValidationError("expert payloads, gate columns and table must have N entries each");
  }
  ShuffledExperts<Payload, Column> out;
  out.permutation = make_gate_permutation(expert_cluster, clusters);
  for (auto e : out.permutation.expert_perm) {
    out.payloads.push_back(payloads[e]);
    out.gate_columns.push_back(gate_columns[e]);
  }
  return out;
}

/// Indices of the k largest logits (lowest index on ties), descending.
std::vector<std::uint32_t> top_k_experts(std::span<const float> logits, std::uint32_t k);

struct BundleMemory {
  std::uint64_t token_labels = 0;       // vocab * L * 2 (int16)
  std::uint64_t token_confidences = 0;  // vocab * L * 4 (float32)
  std::uint64_t ngram = 0;              // E^n rows * (E * 4 + 2)
  std::uint64_t expert_labels = 0;      // L * N * 2
  std::uint64_t total() const { return token_labels + token_confidences + ngram + expert_labels; }
};

BundleMemory bundle_memory_bytes(std::uint64_t vocab, std::uint64_t layers, std::uint64_t clusters,
                                 std::uint64_t ngram_depth, std::uint64_t num_experts);
BundleMemory bundle_memory_bytes(const LookupBundle& bundle);

}  // namespace moesched
