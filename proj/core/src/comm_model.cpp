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

#include "moesched/comm_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "moesched/error.hpp"

namespace moesched {

const char* to_string(Collective c) {
  switch (c) {
    case Collective::kAllReduce: return "AllReduce";
    case Collective::kAllGather: return "AllGather";
    case Collective::kReduceScatter: return "ReduceScatter";
    case Collective::kAll2All: return "All2All";
  }
  return "?";
}

const char* to_string(SimMode mode) {
  switch (mode) {
    case SimMode::kDsMoe: return "ds_moe";
    case SimMode::kSTs: return "s_ts";
    case SimMode::kSTsEg: return "s_ts_eg";
  }
  return "?";
}

double volume_collective(Collective kind, double G, double B, double S, double k, double alpha) {
  if (!(G >= 1.0)) throw ValidationError("G must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
  switch (kind) {
    case Collective::kAllReduce: return 2.0 * (G - 1.0) * B * S / G;
    case Collective::kAllGather:
    case Collective::kReduceScatter: return (G - 1.0) * B * S / G;
    case Collective::kAll2All: return (1.0 - alpha) * k * B * S / G;
  }
  return 0.0;
}

void PipelineSpec::validate() const {
  if (stages.empty()) throw ValidationError("pipeline has no stages");
  if (!(G >= 1.0)) throw ValidationError("pipeline G must be >= 1");
  for (const auto& s : stages) {
    if (s.kind == Collective::kAll2All && !(s.alpha >= 0.0 && s.alpha <= 1.0)) {
      throw ValidationError("All2All stage alpha must lie in [0,1]");
    }
  }
}

PipelineSpec ds_moe_pipeline(double G, double B, double S, double k, std::optional<double> alpha) {
  const double a = alpha.value_or(1.0 / G);
  return PipelineSpec{{{Collective::kAllReduce, 0.0},
                       {Collective::kAll2All, a},
                       {Collective::kAll2All, a},
                       {Collective::kAllGather, 0.0}},
                      G, B, S, k};
}

PipelineSpec s_moe_pipeline(double G, double B, double S, double k, double alpha) {
  return PipelineSpec{{{Collective::kReduceScatter, 0.0}, {Collective::kAll2All, alpha}, {Collective::kAll2All, alpha}},
                      G, B, S, k};
}

VolumeReport pipeline_volume(const PipelineSpec& spec) {
  spec.validate();
  VolumeReport r;
  r.G = spec.G;
  r.B = spec.B;
  r.S = spec.S;
  r.k = spec.k;
  for (const auto& s : spec.stages) {
    const double v = volume_collective(s.kind, spec.G, spec.B, spec.S, spec.k, s.alpha);
    r.stage_kind.push_back(s.kind);
    r.stage_volume.push_back(v);
    r.total += v;
  }
  return r;
}

double saving_ratio(const VolumeReport& reference, const VolumeReport& candidate) {
  if (reference.B != candidate.B || reference.S != candidate.S) {
    throw ValidationError("saving ratio needs reports with the same B and S");
  }
  if (reference.total == 0.0) throw ValidationError("reference volume is zero");
  return (reference.total - candidate.total) / reference.total;
}

std::vector<SweepPoint> sweep_alpha(double G, double k, std::uint32_t steps) {
  if (steps < 2) throw ValidationError("sweep needs at least 2 steps");
  std::vector<SweepPoint> out;
  const auto ds = pipeline_volume(ds_moe_pipeline(G, 1, 1, k));
  for (std::uint32_t i = 0; i < steps; ++i) {
    SweepPoint p;
    p.alpha = static_cast<double>(i) / static_cast<double>(steps - 1);
    const auto sm = pipeline_volume(s_moe_pipeline(G, 1, 1, k, p.alpha));
    p.ds_volume = ds.total;
    p.smoe_volume = sm.total;
    p.saving = saving_ratio(ds, sm);
    if (!out.empty() && !(p.smoe_volume < out.back().smoe_volume)) {
      throw ValidationError("s-MoE volume is not strictly decreasing in alpha");
    }
    out.push_back(p);
  }
  return out;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepPoint>& sweep) {
  out << "alpha,ds_volume,smoe_volume,saving\n";
  char buf[160];
  for (const auto& p : sweep) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", p.alpha, p.ds_volume, p.smoe_volume, p.saving);
    out << buf;
  }
}

namespace {

const std::vector<std::uint32_t>& expert_layout(const SimulationPlan& plan, SimMode mode, std::uint32_t layer) {
  switch (mode) {
    case SimMode::kDsMoe: return plan.baseline.expert_labels;
    case SimMode::kSTs: return plan.token_only.expert_tables.at(layer);
    case SimMode::kSTsEg: return plan.solved.expert_tables.at(layer);
  }
  throw ValidationError("unknown simulation mode");
}

void check_plan(const SimulationPlan& plan, const RequestTrace& trace, SimMode mode) {
  const auto& topo = plan.topology;
  if (!trace.has_routing()) throw ValidationError("simulation needs routed trace data");
  if (topo.G != topo.E) throw ValidationError("simulation maps clusters to devices and needs G == E");
  if (trace.layers != topo.L || trace.top_k != topo.k) throw ValidationError("trace shape differs from topology");
  if (mode == SimMode::kDsMoe) {
    if (plan.baseline.clusters != topo.E || plan.baseline.expert_labels.size() != topo.N) {
      throw ValidationError("baseline layout does not match topology");
    }
    return;
  }
  const auto& b = mode == SimMode::kSTs ? plan.token_only : plan.solved;
  if (b.clusters != topo.E || b.layers != topo.L || b.num_experts != topo.N) {
    throw ValidationError("lookup bundle does not match topology");
  }
}

}  // namespace

std::vector<LayerSimResult> simulate(const SimulationPlan& plan, const RequestTrace& trace, SimMode mode) {
  check_plan(plan, trace, mode);
  const auto& topo = plan.topology;
  const std::uint32_t G = topo.G;
  const std::uint32_t L = topo.L;
  const LookupBundle* bundle = mode == SimMode::kSTs ? &plan.token_only : mode == SimMode::kSTsEg ? &plan.solved : nullptr;
  const std::uint32_t n = bundle ? bundle->ngram.n : 0;

  std::vector<LayerSimResult> results(L);
  for (std::uint32_t l = 0; l < L; ++l) {
    results[l].layer = l;
    results[l].mode = mode;
  }
  std::vector<double> reduce_volume(L, 0.0);

  std::vector<std::uint32_t> tokens;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (request, position)
  std::vector<std::uint32_t> devices;                       // [occurrence][layer]
  std::vector<std::uint32_t> history;
  std::vector<double> sends(G);
  for (std::size_t first = 0; first < trace.requests.size(); first += topo.B) {
    const std::size_t last = std::min(trace.requests.size(), first + topo.B);
    tokens.clear();
    where.clear();
    for (std::size_t r = first; r < last; ++r) {
      for (std::size_t p = 0; p < trace.requests[r].tokens.size(); ++p) {
        tokens.push_back(trace.requests[r].tokens[p]);
        where.emplace_back(r, p);
      }
    }
    if (tokens.empty()) continue;
    const std::size_t count = tokens.size();
    devices.assign(count * L, 0);

    for (std::uint32_t l = 0; l < L; ++l) {
      const auto& experts = expert_layout(plan, mode, l);
      auto& res = results[l];
      if (mode == SimMode::kDsMoe) {
        for (std::size_t i = 0; i < count; ++i) devices[i * L + l] = plan.baseline.label_of_token(tokens[i]);
        res.padded_slots += static_cast<std::int64_t>(count);
        reduce_volume[l] += 3.0 * (G - 1.0) * static_cast<double>(count) / G;
      } else {
        history.clear();
        if (n > 0 && l >= n) {
          for (std::size_t i = 0; i < count; ++i) {
            for (std::uint32_t back = l - n; back < l; ++back) {
              if (plan.history == HistorySource::kPredicted) {
                history.push_back(devices[i * L + back]);
              } else {
                const auto& [r, p] = where[i];
                const auto top1 = trace.experts(trace.requests[r], p, back)[0];
                history.push_back(bundle->expert_tables[back][top1]);
              }
            }
          }
        }
        const auto rb = rebatch_tokens(tokens, history, *bundle, l, G);
        const auto& idx = rb.indices;
        for (std::size_t s = 0; s < idx.perm.size(); ++s) {
          if (!idx.pad_mask[s]) devices[idx.perm[s] * L + l] = idx.device_of_slot(s);
        }
        res.padded_slots += static_cast<std::int64_t>(idx.perm.size());
        // Ring reduce-scatter: G-1 steps, one padded group per step.
        reduce_volume[l] += (G - 1.0) * static_cast<double>(idx.group_size);
      }

      std::fill(sends.begin(), sends.end(), 0.0);
      for (std::size_t i = 0; i < count; ++i) {
        const auto dev = devices[i * L + l];
        const auto& [r, p] = where[i];
        for (auto e : trace.experts(trace.requests[r], p, l)) {
          if (experts[e] == dev) {
            ++res.local_events;
          } else {
            ++res.remote_events;
            sends[dev] += 1.0;
          }
        }
      }
      res.tokens += static_cast<std::int64_t>(count);
      res.max_device_a2a += *std::max_element(sends.begin(), sends.end());
    }
  }

  for (auto& res : results) {
    const double events = static_cast<double>(res.local_events + res.remote_events);
    res.measured_alpha = events > 0.0 ? static_cast<double>(res.local_events) / events : 1.0;
    const double dispatch = static_cast<double>(res.remote_events) / G;
    const double reduce = reduce_volume[res.layer];
    if (mode == SimMode::kDsMoe) {
      // reduce_volume holds AR (2 parts) + AG (1 part).
      res.stage_kind = {Collective::kAllReduce, Collective::kAll2All, Collective::kAll2All, Collective::kAllGather};
      res.stage_event_volume = {reduce * 2.0 / 3.0, dispatch, dispatch, reduce / 3.0};
      res.analytic = pipeline_volume(ds_moe_pipeline(G, static_cast<double>(res.tokens), 1, topo.k, res.measured_alpha));
    } else {
      res.stage_kind = {Collective::kReduceScatter, Collective::kAll2All, Collective::kAll2All};
      res.stage_event_volume = {reduce, dispatch, dispatch};
      res.analytic = pipeline_volume(s_moe_pipeline(G, static_cast<double>(res.tokens), 1, topo.k, res.measured_alpha));
    }
    res.event_total = 0.0;
    for (double v : res.stage_event_volume) res.event_total += v;
  }
  return results;
}

LayerSimResult simulate_layer(const SimulationPlan& plan, const RequestTrace& trace, std::uint32_t layer,
                              SimMode mode) {
  if (layer >= plan.topology.L) throw ValidationError("layer outside topology");
  // Predicted histories depend on earlier layers, so the whole stack is replayed.
  return simulate(plan, trace, mode)[layer];
}

}  // namespace moesched
