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

#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moesched/random.hpp"
#include "moesched/trace.hpp"

namespace moesched::testing {

inline Topology make_topology(std::uint32_t G, std::uint32_t E, std::uint32_t N, std::uint32_t k,
                              std::uint32_t L = 1, std::uint32_t B = 4, std::uint32_t S = 16,
                              std::uint32_t vocab = 1000) {
  Topology t;
  t.G = G;
  t.E = E;
  t.N = N;
  t.k = k;
  t.L = L;
  t.B = B;
  t.S_seq = S;
  t.vocab = vocab;
  return t;
}

/// Matrix over tokens 0..t-1 with counts drawn uniformly from [0, max_count].
inline TokenExpertMatrix random_matrix(std::uint32_t t, std::uint32_t N, std::int64_t max_count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint32_t> ids(t);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(t) * N);
  for (std::uint32_t j = 0; j < t; ++j) ids[j] = j;
  for (auto& c : counts) c = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_count) + 1));
  return TokenExpertMatrix::from_counts(0, N, std::move(ids), std::move(counts));
}

/// Trace whose tokens and routing are uniform at random.
inline RequestTrace uniform_trace(const Topology& topo, std::uint32_t requests, std::uint64_t seed) {
  Rng rng(seed);
  RequestTrace trace{topo.L, topo.k, {}};
  for (std::uint32_t r = 0; r < requests; ++r) {
    Request req;
    req.id = r;
    for (std::uint32_t p = 0; p < topo.S_seq; ++p) {
      req.tokens.push_back(static_cast<std::uint32_t>(rng.below(topo.vocab)));
      for (std::uint32_t l = 0; l < topo.L; ++l) {
        std::vector<std::uint32_t> picked;
        while (picked.size() < topo.k) {
          const auto e = static_cast<std::uint32_t>(rng.below(topo.N));
          bool dup = false;
          for (auto x : picked) dup = dup || x == e;
          if (!dup) picked.push_back(e);
        }
        req.routed.insert(req.routed.end(), picked.begin(), picked.end());
      }
    }
    trace.requests.push_back(std::move(req));
  }
  return trace;
}

/// True when `labels` equals `truth` up to a bijective relabeling.
inline bool same_partition(const std::vector<std::uint32_t>& labels, const std::vector<std::uint32_t>& truth) {
  if (labels.size() != truth.size()) return false;
  std::vector<std::int64_t> fwd(1 << 16, -1), back(1 << 16, -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& f = fwd[labels[i]];
    auto& b = back[truth[i]];
    if (f == -1 && b == -1) {
      f = truth[i];
      b = labels[i];
    } else if (f != static_cast<std::int64_t>(truth[i]) || b != static_cast<std::int64_t>(labels[i])) {
      return false;
    }
  }
  return true;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("moesched-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(mix64(reinterpret_cast<std::uintptr_t>(this)) & 0xffffff));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace moesched::testing
