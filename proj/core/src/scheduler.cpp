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

#include "moesched/scheduler.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace moesched {

namespace {

constexpr char kBundleMagic[4] = {'M', 'S', 'L', 'B'};
constexpr std::uint32_t kBundleVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  out.write(b, 4);
}

void put_i16(std::ostream& out, std::int16_t v) {
  const auto u = static_cast<std::uint16_t>(v);
  const char b[2] = {static_cast<char>(u), static_cast<char>(u >> 8)};
  out.write(b, 2);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ValidationError("truncated bundle");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::int16_t get_i16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  if (!in) throw ValidationError("truncated bundle");
  return static_cast<std::int16_t>(static_cast<std::uint16_t>(b[0] | (b[1] << 8)));
}

float get_f32(std::istream& in) {
  const std::uint32_t bits = get_u32(in);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::uint64_t ipow(std::uint64_t base, std::uint64_t exp) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 0; i < exp; ++i) r *= base;
  return r;
}

}  // namespace

void LookupBundle::validate() const {
  if (clusters == 0 || clusters > 32768) throw ValidationError("bundle cluster count must lie in [1, 32768]");
  if (token_tables.size() != layers || expert_tables.size() != layers) {
    throw ValidationError("bundle needs one token table and one expert table per layer");
  }
  for (const auto& t : token_tables) {
    if (t.vocab() != vocab || t.confidence.size() != vocab) throw ValidationError("token table size differs from vocab");
    for (std::size_t i = 0; i < vocab; ++i) {
      if (t.labels[i] >= clusters) throw ValidationError("token label out of range");
      if (!(t.confidence[i] >= 0.0f && t.confidence[i] <= 1.0f)) throw ValidationError("token confidence outside [0,1]");
    }
  }
  for (const auto& x : expert_tables) {
    if (x.size() != num_experts) throw ValidationError("expert table size differs from N");
    for (auto c : x) {
      if (c >= clusters) throw ValidationError("expert label out of range");
    }
  }
  if (ngram.clusters != clusters) throw ValidationError("n-gram table cluster count differs");
  if (ngram.rows() != ipow(clusters, ngram.n) || ngram.probs.size() != ngram.rows() * clusters) {
    throw ValidationError("n-gram table has the wrong shape");
  }
  for (double p : ngram.probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("n-gram probability outside [0,1]");
  }
}

void write_bundle(std::ostream& out, const LookupBundle& b) {
  b.validate();
  out.write(kBundleMagic, 4);
  put_u32(out, kBundleVersion);
  put_u32(out, b.vocab);
  put_u32(out, b.clusters);
  put_u32(out, b.ngram.n);
  put_u32(out, b.layers);
  put_u32(out, b.num_experts);
  for (const auto& t : b.token_tables) {
    for (auto l : t.labels) put_i16(out, static_cast<std::int16_t>(l));
  }
  for (const auto& t : b.token_tables) {
    for (auto c : t.confidence) put_f32(out, c);
  }
  for (double p : b.ngram.probs) put_f32(out, static_cast<float>(p));
  for (const auto& x : b.expert_tables) {
    for (auto c : x) put_i16(out, static_cast<std::int16_t>(c));
  }
  if (!out) throw IoError("failed writing bundle");
}

LookupBundle read_bundle(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kBundleMagic, 4) != 0) throw ValidationError("not a lookup bundle (bad magic)");
  if (get_u32(in) != kBundleVersion) throw ValidationError("unsupported bundle version");
  LookupBundle b;
  b.vocab = get_u32(in);
  b.clusters = get_u32(in);
  const std::uint32_t n = get_u32(in);
  b.layers = get_u32(in);
  b.num_experts = get_u32(in);
  if (b.clusters == 0 || b.clusters > 32768 || n > 16 || ipow(b.clusters, n) > (1u << 24)) {
    throw ValidationError("bundle header out of range");
  }
  b.token_tables.resize(b.layers);
  for (auto& t : b.token_tables) {
    t.clusters = b.clusters;
    t.labels.resize(b.vocab);
    t.provenance.assign(b.vocab, Provenance::kProfiled);
    for (auto& l : t.labels) {
      const auto v = get_i16(in);
      if (v < 0) throw ValidationError("negative token label in bundle");
      l = static_cast<std::uint16_t>(v);
    }
  }
  for (auto& t : b.token_tables) {
    t.confidence.resize(b.vocab);
    for (auto& c : t.confidence) c = get_f32(in);
  }
  b.ngram.n = n;
  b.ngram.clusters = b.clusters;
  const std::size_t rows = ipow(b.clusters, n);
  b.ngram.probs.resize(rows * b.clusters);
  for (auto& p : b.ngram.probs) p = get_f32(in);
  b.ngram.best.assign(rows, 0);
  b.ngram.observations.assign(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::uint32_t c = 0; c < b.clusters; ++c) sum += b.ngram.probs[r * b.clusters + c];
    // Row observation counts are not stored; a non-empty row counts as observed.
    b.ngram.observations[r] = sum > 0.0 ? 1 : 0;
  }
  b.ngram.refresh_best();
  b.expert_tables.assign(b.layers, std::vector<std::uint32_t>(b.num_experts));
  for (auto& x : b.expert_tables) {
    for (auto& c : x) {
      const auto v = get_i16(in);
      if (v < 0) throw ValidationError("negative expert label in bundle");
      c = static_cast<std::uint32_t>(v);
    }
  }
  b.validate();
  return b;
}

void save_bundle(const std::filesystem::path& path, const LookupBundle& bundle) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write bundle " + path.string());
  write_bundle(out, bundle);
}

LookupBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open bundle " + path.string());
  return read_bundle(in);
}

std::vector<std::uint32_t> lookup_device(std::span<const std::uint32_t> batch,
                                         std::span<const std::uint32_t> history, const LookupBundle& bundle,
                                         std::uint32_t layer) {
  if (layer >= bundle.layers) throw ValidationError("layer outside bundle");
  const auto& table = bundle.token_tables[layer];
  const std::uint32_t n = bundle.ngram.n;
  const bool with_history = !history.empty() && n > 0;
  if (with_history && history.size() != batch.size() * n) {
    throw ValidationError("history must hold n devices per token");
  }
  std::vector<std::uint32_t> devices(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto tok = batch[i];
    std::uint32_t dev = 0;
    float token_conf = 0.0f;
    if (tok < table.vocab()) {
      dev = table.labels[tok];
      token_conf = table.confidence[tok];
    } else {
      dev = tok % bundle.clusters;
      token_conf = 1.0f / static_cast<float>(bundle.clusters);
    }
    if (with_history) {
      const auto row = bundle.ngram.row_index(history.subspan(i * n, n));
      // The table stores float32 confidences, so compare at that precision.
      if (static_cast<float>(bundle.ngram.confidence(row)) > token_conf) dev = bundle.ngram.best[row];
    }
    devices[i] = dev;
  }
  return devices;
}

ShuffleIndices make_shuffle_indices(std::span<const std::uint32_t> device_ids, std::uint32_t devices) {
  if (devices == 0) throw ValidationError("device count must be positive");
  ShuffleIndices idx;
  idx.inputs = static_cast<std::uint32_t>(device_ids.size());
  idx.devices = devices;
  std::vector<std::vector<std::uint32_t>> groups(devices);
  for (std::uint32_t i = 0; i < device_ids.size(); ++i) {
    if (device_ids[i] >= devices) throw ValidationError("device id out of range");
    groups[device_ids[i]].push_back(i);
  }
  std::size_t largest = 0;
  for (const auto& g : groups) largest = std::max(largest, g.size());
  const std::size_t even = (device_ids.size() + devices - 1) / devices;
  idx.group_size = static_cast<std::uint32_t>(std::max(largest, even));
  if (idx.group_size == 0) idx.group_size = 1;

  std::uint32_t next_pad = idx.inputs;
  for (const auto& g : groups) {
    for (auto i : g) {
      idx.perm.push_back(i);
      idx.pad_mask.push_back(false);
    }
    for (std::size_t p = g.size(); p < idx.group_size; ++p) {
      idx.perm.push_back(next_pad++);
      idx.pad_mask.push_back(true);
    }
  }
  return idx;
}

RebatchResult rebatch_tokens(std::span<const std::uint32_t> batch, std::span<const std::uint32_t> history,
                             const LookupBundle& bundle, std::uint32_t layer, std::uint32_t devices) {
  if (batch.empty()) throw ValidationError("cannot rebatch an empty batch");
  auto device_ids = lookup_device(batch, history, bundle, layer);
  for (auto& d : device_ids) d %= devices;
  RebatchResult r;
  r.indices = make_shuffle_indices(device_ids, devices);
  r.tokens = apply_shuffle<std::uint32_t>(batch, r.indices, kPadToken);
  return r;
}

std::vector<std::uint32_t> resume_tokens(std::span<const std::uint32_t> shuffled, const ShuffleIndices& indices) {
  return resume<std::uint32_t>(shuffled, indices);
}

RequestScheduler::RequestScheduler(std::uint32_t devices)
    : devices_(devices), open_(devices, 1), score_(devices, 0.0) {
  if (devices == 0) throw ValidationError("request scheduler needs at least one device");
}

std::uint32_t RequestScheduler::schedule(std::span<const std::uint32_t> request, const TokenDeviceTable& table) {
  std::fill(score_.begin(), score_.end(), 0.0);
  for (auto tok : request) {
    const std::uint32_t dev = tok < table.vocab() ? table.labels[tok] : tok % devices_;
    if (dev < devices_) score_[dev] += 1.0;
  }
  std::uint32_t best = devices_;
  for (std::uint32_t d = 0; d < devices_; ++d) {
    if (!open_[d]) continue;
    if (best == devices_ || score_[d] > score_[best]) best = d;
  }
  open_[best] = 0;
  if (std::none_of(open_.begin(), open_.end(), [](char b) { return b != 0; })) open_.assign(devices_, 1);
  return best;
}

GatePermutation make_gate_permutation(std::span<const std::uint32_t> expert_cluster, std::uint32_t clusters) {
  if (clusters == 0 || expert_cluster.size() % clusters != 0) {
    throw ValidationError("expert count is not a multiple of the cluster count");
  }
  const std::size_t per = expert_cluster.size() / clusters;
  std::vector<std::vector<std::uint32_t>> members(clusters);
  for (std::uint32_t e = 0; e < expert_cluster.size(); ++e) {
    if (expert_cluster[e] >= clusters) throw ValidationError("expert label out of range");
    members[expert_cluster[e]].push_back(e);
  }
  GatePermutation g;
  for (const auto& m : members) {
    if (m.size() != per) throw ValidationError("expert table is not balanced across clusters");
    g.expert_perm.insert(g.expert_perm.end(), m.begin(), m.end());
  }
  g.inverse.resize(g.expert_perm.size());
  for (std::uint32_t s = 0; s < g.expert_perm.size(); ++s) g.inverse[g.expert_perm[s]] = s;
  return g;
}

std::vector<std::uint32_t> top_k_experts(std::span<const float> logits, std::uint32_t k) {
  std::vector<std::uint32_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0u);
  const auto keep = std::min<std::size_t>(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  idx.resize(keep);
  return idx;
}

BundleMemory bundle_memory_bytes(std::uint64_t vocab, std::uint64_t layers, std::uint64_t clusters,
                                 std::uint64_t ngram_depth, std::uint64_t num_experts) {
  BundleMemory m;
  m.token_labels = vocab * layers * 2;
  m.token_confidences = vocab * layers * 4;
  m.ngram = ipow(clusters, ngram_depth) * (clusters * 4 + 2);
  m.expert_labels = layers * num_experts * 2;
  return m;
}

BundleMemory bundle_memory_bytes(const LookupBundle& bundle) {
  return bundle_memory_bytes(bundle.vocab, bundle.layers, bundle.clusters, bundle.ngram.n, bundle.num_experts);
}

}  // namespace moesched
