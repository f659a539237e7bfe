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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moesched/scheduler.hpp"
#include "moesched/solver.hpp"
#include "moesched/trace.hpp"

namespace moesched {

enum class Collective { kAllReduce, kAllGather, kReduceScatter, kAll2All };

const char* to_string(Collective c);

/// Per-device volume of one collective in token-slot units.
///   AllReduce      2 (G-1) B S / G
///   AllGather      (G-1) B S / G
///   ReduceScatter  (G-1) B S / G
///   All2All        (1 - alpha) k B S / G
/// alpha is the fraction of routed activations that stay on their device.
double volume_collective(Collective kind, double G, double B, double S, double k, double alpha);

struct PipelineStage {
  Collective kind = Collective::kAll2All;
  double alpha = 0.0;  // used by All2All stages only
};

struct PipelineSpec {
  std::vector<PipelineStage> stages;
  double G = 1;
  double B = 1;
  double S = 1;
  double k = 1;

  void validate() const;
};

/// AR -> A2A -> A2A -> AG with `alpha` for both A2A stages (1/G when unset).
PipelineSpec ds_moe_pipeline(double G, double B, double S, double k, std::optional<double> alpha = std::nullopt);
/// RS -> A2A -> A2A.
PipelineSpec s_moe_pipeline(double G, double B, double S, double k, double alpha);

struct VolumeReport {
  std::vector<double> stage_volume;
  std::vector<Collective> stage_kind;
  double total = 0.0;
  double G = 1, B = 1, S = 1, k = 1;
};

VolumeReport pipeline_volume(const PipelineSpec& spec);

/// (reference.total - candidate.total) / reference.total.
double saving_ratio(const VolumeReport& reference, const VolumeReport& candidate);

struct SweepPoint {
  double alpha = 0.0;
  double ds_volume = 0.0;
  double smoe_volume = 0.0;
  double saving = 0.0;  // saving ratio of s-MoE against DS-MoE
};

/// Both canonical pipelines (B = S = 1) on `steps` evenly spaced alphas in [0, 1].
std::vector<SweepPoint> sweep_alpha(double G, double k, std::uint32_t steps);
void write_sweep_csv(std::ostream& out, const std::vector<SweepPoint>& sweep);

enum class SimMode { kDsMoe, kSTs, kSTsEg };
const char* to_string(SimMode mode);

/// Where the n-gram history of previous layers comes from.
enum class HistorySource { kPredicted, kOracle };

/// Device layouts for the three replay modes.
struct SimulationPlan {
  Topology topology;
  Assignment baseline;    // ds_moe: token id mod E, contiguous experts
  LookupBundle token_only;  // s_ts: tables built against the contiguous expert layout
  LookupBundle solved;      // s_ts_eg: solved expert layout and its token tables
  HistorySource history = HistorySource::kPredicted;
};

struct LayerSimResult {
  std::uint32_t layer = 0;
  SimMode mode = SimMode::kDsMoe;
  std::int64_t tokens = 0;         // token occurrences (B*S in the analytic model)
  std::int64_t local_events = 0;
  std::int64_t remote_events = 0;  // one per routed expert hosted off the token's device
  double measured_alpha = 0.0;
  std::int64_t padded_slots = 0;   // total slots after rebatch padding
  std::vector<Collective> stage_kind;
  std::vector<double> stage_event_volume;  // per-device average, counted from token movements
  double max_device_a2a = 0.0;             // busiest device's dispatch volume
  double event_total = 0.0;
  VolumeReport analytic;                   // pipeline_volume at measured_alpha, B*S = tokens
};

/// Replays every routed token of one layer against the mode's layout.
/// Requests are processed in batches of `topology.B`; rebatching (s_ts,
/// s_ts_eg) decides each token's device, ds_moe keeps token id mod E.
LayerSimResult simulate_layer(const SimulationPlan& plan, const RequestTrace& trace, std::uint32_t layer,
                              SimMode mode);

/// All layers of one mode.
std::vector<LayerSimResult> simulate(const SimulationPlan& plan, const RequestTrace& trace, SimMode mode);

}  // namespace moesched
