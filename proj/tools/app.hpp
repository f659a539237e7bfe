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
#include <string>
#include <vector>

#include "moesched/comm_model.hpp"
#include "moesched/scheduler.hpp"
#include "moesched/solver.hpp"
#include "moesched/trace.hpp"

namespace moesched::app {

enum class SolverKind { kCeo, kAlternating, kKmeans, kRoundRobin, kBruteforce };

SolverKind parse_solver(const std::string& name);
const char* to_string(SolverKind kind);

/// Per-layer solver output in the shape the lookup tables need.
struct LayerSolution {
  Assignment assignment;
  std::vector<double> token_confidence;  // aligned with assignment.token_ids
  ObjectiveValue objective;
  PlacementMetrics metrics;
  std::size_t violations = 0;
};

LayerSolution solve_layer(SolverKind kind, const TokenExpertMatrix& matrix, const RequestTrace& requests,
                          const Topology& topo, const SolverConfig& config);

struct Bundles {
  LookupBundle solved;      // solver layout and its token tables
  LookupBundle token_only;  // contiguous expert layout, tables fitted to it
  std::vector<LayerSolution> layers;
};

/// Solves every layer of `train` and assembles both lookup bundles.
/// Embeddings, when given, extrapolate token labels to the full vocabulary.
Bundles build_bundles(SolverKind kind, const Profile& train, const Topology& topo, const SolverConfig& config,
                      std::uint32_t ngram_depth, const EmbeddingTable* embeddings);

/// The three replay modes over `eval`, in order ds_moe, s_ts, s_ts_eg.
struct SimulationReport {
  std::vector<std::vector<LayerSimResult>> modes;
};

SimulationReport simulate_all(const Topology& topo, const LookupBundle& solved, const LookupBundle& token_only,
                              const RequestTrace& eval, HistorySource history);

/// Collects output files of one run and writes manifest.json with their
/// SHA-256 digests. Wall-clock data goes to timing.json, outside the manifest.
class RunDirectory {
 public:
  RunDirectory(std::filesystem::path dir, std::string command);

  void write(const std::string& name, const std::string& content);
  void finish(double wall_seconds);

  const std::filesystem::path& path() const { return dir_; }

 private:
  struct Artifact {
    std::string name;
    std::string sha256;
    std::uint64_t bytes = 0;
  };
  std::filesystem::path dir_;
  std::string command_;
  std::vector<Artifact> artifacts_;
};

std::string sha256_hex(const std::string& data);

/// Entry point shared by the executable and the tests. Returns the exit code:
/// 0 success, 1 validation failure, 2 I/O failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace moesched::app
