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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "app.hpp"
#include "fixtures.hpp"
#include "moesched/comm_model.hpp"
#include "moesched/scheduler.hpp"
#include "moesched/solver.hpp"

namespace {

using namespace moesched;
using moesched::testing::make_topology;
using moesched::testing::random_matrix;
using moesched::testing::same_partition;

struct Outcome {
  bool ok = true;
  std::string detail;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// 1. Closed-form pipeline totals.
Outcome volume_formulas() {
  double worst = 0.0;
  int cases = 0;
  for (double G : {2.0, 4.0, 8.0, 16.0}) {
    for (double k : {1.0, 2.0, 6.0}) {
      const double ds = 3 * (G - 1) / G + 2 * k * (G - 1) / (G * G);
      worst = std::max(worst, std::abs(pipeline_volume(ds_moe_pipeline(G, 1, 1, k)).total - ds));
      for (int i = 0; i <= 10; ++i) {
        const double a = i / 10.0;
        const double sm = (G - 1) / G + 2 * k * (1 - a) / G;
        worst = std::max(worst, std::abs(pipeline_volume(s_moe_pipeline(G, 1, 1, k, a)).total - sm));
        ++cases;
      }
    }
  }
  return {worst <= 1e-12, format("%d s-MoE cases + 12 DS-MoE cases, max abs error %.3g", cases, worst)};
}

// 2. Saving sweep slope and range.
Outcome saving_sweep() {
  Outcome o;
  std::ostringstream d;
  double worst = 0.0;
  for (double G : {2.0, 4.0, 8.0, 16.0}) {
    for (double k : {1.0, 2.0, 6.0}) {
      const auto sw = sweep_alpha(G, k, 101);
      const double ds = sw.front().ds_volume;
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < sw.size(); ++i) {
        lo = std::min(lo, sw[i].saving);
        hi = std::max(hi, sw[i].saving);
        if (i == 0) continue;
        const double dv = (sw[i].smoe_volume - sw[i - 1].smoe_volume) / (sw[i].alpha - sw[i - 1].alpha);
        const double ds_dv = (sw[i].saving - sw[i - 1].saving) / (sw[i].smoe_volume - sw[i - 1].smoe_volume);
        worst = std::max({worst, std::abs(dv + 2 * k / G), std::abs(ds_dv + 1 / ds)});
      }
      if (G == 8) d << format(" (G=%g,k=%g: %.4f..%.4f)", G, k, lo, hi);
    }
  }
  o.ok = worst <= 1e-9;
  o.detail = format("max slope error %.3g;", worst) + d.str();
  return o;
}

SolverConfig ceo_config(std::uint64_t seed) {
  SolverConfig c;
  c.samples = 64;
  c.n_steps = 50;
  c.seed = seed;
  return c;
}

// 3. CEO against exhaustive search.
Outcome oracle_equivalence() {
  const int instances = 24;
  int equal = 0, within = 0;
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    Rng rng(stream_seed(2024, i));
    const auto t = static_cast<std::uint32_t>(3 + rng.below(4));
    const auto N = static_cast<std::uint32_t>(2 * (1 + rng.below(3)));
    const auto topo = make_topology(2, 2, N, 1);
    const auto m = random_matrix(t, N, 9, stream_seed(77, i));
    const double opt = solve_bruteforce(m, topo, 0.5).objective.combined;
    const double got = solve_ceo(m, topo, ceo_config(i)).objective.combined;
    const double gap = opt > 0 ? (got - opt) / opt : got;
    worst = std::max(worst, gap);
    within += gap <= 0.05 + 1e-12;
    equal += std::abs(got - opt) <= 1e-9;
  }
  return {within == instances && 2 * equal >= instances,
          format("%d/%d within 5%%, %d/%d optimal, worst gap %.4f", within, instances, equal, instances, worst)};
}

PlantedProfile planted(const Topology& topo, double noise, std::uint32_t m, std::uint64_t seed) {
  PlantedOptions o;
  o.tokens_per_cluster = m;
  o.noise = noise;
  o.seed = seed;
  o.occurrences_per_token = 8;
  return synthesize_planted_profile(topo, o);
}

// 4. Planted recovery by three solvers.
Outcome planted_recovery() {
  const auto topo = make_topology(4, 4, 16, 2, 1, 8, 16, 1000);
  int ok = 0, runs = 0;
  double worst_lar = 1.0, worst_imb = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = planted(topo, 0.0, 50, 100 + seed);
    const auto& m = p.profile.layers[0];
    SolverConfig alt;
    alt.n_steps = 10;
    alt.seed = seed;
    std::vector<Assignment> found{solve_ceo(m, topo, ceo_config(seed)).assignment,
                                  solve_alternating(m, p.profile.trace, topo, alt).assignment,
                                  baseline_two_stage_kmeans(m, topo, seed)};
    for (const auto& a : found) {
      ++runs;
      const auto met = metrics(a, m);
      worst_lar = std::min(worst_lar, met.lar);
      worst_imb = std::max(worst_imb, met.imbalance);
      const bool recovered = m.token_ids == p.token_ids && same_partition(a.token_labels, p.token_cluster) &&
                             same_partition(a.expert_labels, p.expert_block[0]);
      ok += met.lar == 1.0 && met.imbalance <= 1.05 && recovered && check_constraints(a, topo).empty();
    }
  }
  return {ok == runs, format("%d/%d solver runs recovered (ceo, alternating, kmeans x 5 seeds); min LAR %.4f, "
                             "max imbalance %.4f",
                             ok, runs, worst_lar, worst_imb)};
}

double aggregate_alpha(const std::vector<LayerSimResult>& layers) {
  std::int64_t local = 0, total = 0;
  for (const auto& r : layers) {
    local += r.local_events;
    total += r.local_events + r.remote_events;
  }
  return static_cast<double>(local) / static_cast<double>(total);
}

// 5. Grouped layout against the vanilla baseline.
Outcome baseline_gap() {
  const auto topo = make_topology(4, 4, 16, 2, 2, 8, 16, 1000);
  Outcome o;
  std::ostringstream d;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = planted(topo, 0.2, 50, 500 + seed);
    auto config = ceo_config(seed);
    const auto bundles = app::build_bundles(app::SolverKind::kCeo, p.profile, topo, config, 1, nullptr);
    const auto rep = app::simulate_all(topo, bundles.solved, bundles.token_only, p.profile.trace,
                                       HistorySource::kPredicted);
    const double ds = aggregate_alpha(rep.modes[0]);
    const double eg = aggregate_alpha(rep.modes[2]);
    o.ok = o.ok && eg - ds >= 0.30 && std::abs(ds - 0.25) <= 0.03;
    d << format("%sseed %d: ds_moe %.1f%%, s_ts %.1f%%, s_ts_eg %.1f%%", seed ? "; " : "", static_cast<int>(seed),
                100 * ds, 100 * aggregate_alpha(rep.modes[1]), 100 * eg);
  }
  o.detail = d.str();
  return o;
}

// 6. Hard constraints over many randomized runs.
Outcome hard_constraints() {
  const int runs = 10000;
  std::int64_t violations = 0;
  for (int i = 0; i < runs; ++i) {
    Rng rng(stream_seed(6, i));
    const auto E = static_cast<std::uint32_t>(1 + rng.below(4));
    const auto N = E * static_cast<std::uint32_t>(1 + rng.below(3));
    const auto t = static_cast<std::uint32_t>(2 + rng.below(6));
    const auto topo = make_topology(E, E, N, 1, 1, 2, 4, 64);
    const auto m = random_matrix(t, N, 4, stream_seed(66, i));
    Assignment a;
    switch (i % 4) {
      case 0: {
        SolverConfig c;
        c.samples = 8;
        c.n_steps = 3;
        c.seed = i;
        a = solve_ceo(m, topo, c).assignment;
        break;
      }
      case 1:
        a = m.total > 0 ? baseline_two_stage_kmeans(m, topo, i) : baseline_round_robin(topo, m.token_ids);
        break;
      case 2: {
        auto trace = moesched::testing::uniform_trace(topo, E + 2, i);
        SolverConfig c;
        c.n_steps = 2;
        a = solve_alternating(build_matrices(trace, N)[0], trace, topo, c).assignment;
        break;
      }
      default: {
        const auto small = make_topology(2, 2, 4, 1, 1, 2, 4, 64);
        a = solve_bruteforce(random_matrix(std::min(t, 5u), 4, 4, i), small, 0.5).assignment;
        violations += static_cast<std::int64_t>(check_constraints(a, small).size());
        continue;
      }
    }
    violations += static_cast<std::int64_t>(check_constraints(a, topo).size());
    if (a.token_labels.size() != a.token_ids.size()) ++violations;
  }
  return {violations == 0, format("%d runs (ceo, kmeans, alternating, bruteforce), %lld violations", runs,
                                  static_cast<long long>(violations))};
}

LookupBundle random_bundle(std::uint32_t vocab, std::uint32_t E, Rng& rng) {
  LookupBundle b;
  b.vocab = vocab;
  b.clusters = E;
  b.num_experts = E;
  std::vector<std::uint32_t> ids(vocab), labels(vocab);
  std::vector<double> conf(vocab, 0.5);
  for (std::uint32_t i = 0; i < vocab; ++i) {
    ids[i] = i;
    labels[i] = static_cast<std::uint32_t>(rng.below(E));
  }
  b.token_tables.push_back(make_token_table(vocab, E, ids, labels, conf));
  std::vector<std::uint32_t> experts(E);
  std::iota(experts.begin(), experts.end(), 0u);
  b.expert_tables.push_back(experts);
  b.ngram.n = 1;
  b.ngram.clusters = E;
  b.ngram.probs.assign(E * E, 0.0);
  b.ngram.best.assign(E, 0);
  b.ngram.observations.assign(E, 0);
  return b;
}

// 7. Rebatch / resume round trip.
Outcome shuffle_round_trip() {
  int ok = 0;
  std::size_t max_pad = 0;
  for (int i = 0; i < 1000; ++i) {
    Rng rng(stream_seed(7, i));
    const std::uint32_t G = 2u << rng.below(3);
    const auto bundle = random_bundle(5000, G, rng);
    std::vector<std::uint32_t> batch(1 + rng.below(4096));
    for (auto& t : batch) t = static_cast<std::uint32_t>(rng.below(6000));
    const auto rb = rebatch_tokens(batch, {}, bundle, 0, G);
    const auto& idx = rb.indices;
    bool equal_groups = idx.perm.size() == static_cast<std::size_t>(idx.group_size) * G;
    std::vector<std::size_t> per(G, 0);
    for (std::size_t s = 0; s < idx.perm.size(); ++s) ++per[idx.device_of_slot(s)];
    for (auto c : per) equal_groups = equal_groups && c == idx.group_size;
    max_pad = std::max(max_pad, idx.perm.size() - batch.size());
    ok += equal_groups && resume_tokens(rb.tokens, idx) == batch;
  }
  return {ok == 1000, format("%d/1000 batches restored with equal padded groups (max padding %zu)", ok, max_pad)};
}

// 8. Gate transparency.
Outcome gate_transparency() {
  int ok = 0, checks = 0;
  for (int i = 0; i < 1000; ++i) {
    Rng rng(stream_seed(8, i));
    std::vector<std::uint32_t> table(16);
    for (std::uint32_t e = 0; e < 16; ++e) table[e] = e % 4;
    rng.shuffle(std::span<std::uint32_t>(table));
    std::vector<float> logits(16);
    for (auto& x : logits) x = static_cast<float>(rng.normal());
    std::vector<std::uint32_t> experts(16);
    std::iota(experts.begin(), experts.end(), 0u);
    const auto sh = apply_expert_shuffle<std::uint32_t, float>(experts, logits, table, 4);
    for (std::uint32_t k : {1u, 2u, 6u}) {
      std::set<std::uint32_t> before, after;
      for (auto e : top_k_experts(logits, k)) before.insert(e);
      for (auto s : top_k_experts(sh.gate_columns, k)) after.insert(sh.payloads[s]);
      ++checks;
      ok += before == after;
    }
  }
  return {ok == checks, format("%d/%d top-k sets unchanged (N=16, E=4, k in {1,2,6})", ok, checks)};
}

// 9. Data-parallel request placement.
Outcome dp_fairness() {
  const std::uint32_t E = 4;
  Rng rng(9);
  auto bundle = random_bundle(4000, E, rng);
  // Token t belongs to cluster t mod E.
  auto& table = bundle.token_tables[0];
  for (std::uint32_t t = 0; t < table.vocab(); ++t) table.labels[t] = static_cast<std::uint16_t>(t % E);
  RequestScheduler sched(E);
  const int requests = 10000;
  int windows = 0, fair = 0, preferred_first = 0;
  std::set<std::uint32_t> used;
  for (int i = 0; i < requests; ++i) {
    const auto cluster = static_cast<std::uint32_t>(rng.below(E));
    std::vector<std::uint32_t> req(8 + rng.below(24));
    for (auto& t : req) t = static_cast<std::uint32_t>(rng.below(1000)) * E + cluster;
    const auto dev = sched.schedule(req, table);
    if (i % E == 0) {
      used.clear();
      preferred_first += dev == cluster;
    }
    used.insert(dev);
    if (i % E == E - 1) {
      ++windows;
      fair += used.size() == E;
    }
  }
  const double first = static_cast<double>(preferred_first) / windows;
  return {fair == windows && first >= (E - 1.0) / E,
          format("%d/%d windows used every device; preferred device first in %.3f of windows", fair, windows, first)};
}

// 10. Lookup table memory.
Outcome memory_estimate() {
  const auto m = bundle_memory_bytes(102400, 60, 8, 2, 256);
  const double mib = static_cast<double>(m.token_labels) / (1024.0 * 1024.0);
  return {m.token_labels == 12288000u,
          format("token table %llu bytes = %.2f MiB", static_cast<unsigned long long>(m.token_labels), mib)};
}

// 11. Event-counted against analytic all-to-all volume.
Outcome analytic_agreement() {
  double worst = 0.0;
  int rows = 0;
  const std::vector<Topology> topos{make_topology(4, 4, 16, 2, 2, 4, 16, 1000),
                                    make_topology(8, 8, 32, 2, 3, 5, 12, 1000),
                                    make_topology(2, 2, 8, 1, 2, 3, 20, 1000)};
  for (std::size_t f = 0; f < topos.size(); ++f) {
    for (double noise : {0.0, 0.2, 0.6}) {
      const auto& topo = topos[f];
      const auto p = planted(topo, noise, 20, 1100 + f);
      SolverConfig c;
      c.samples = 32;
      c.n_steps = 20;
      c.seed = f;
      const auto b = app::build_bundles(app::SolverKind::kCeo, p.profile, topo, c, 1, nullptr);
      const auto rep = app::simulate_all(topo, b.solved, b.token_only, p.profile.trace, HistorySource::kPredicted);
      for (const auto& mode : rep.modes) {
        for (const auto& r : mode) {
          for (std::size_t s = 0; s < r.stage_kind.size(); ++s) {
            if (r.stage_kind[s] != Collective::kAll2All) continue;
            worst = std::max(worst, std::abs(r.stage_event_volume[s] - r.analytic.stage_volume[s]));
          }
          ++rows;
        }
      }
    }
  }
  return {worst <= 1.0, format("%d layer/mode rows over 9 fixtures, max |event - analytic| = %.3g slots", rows, worst)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// 12. Byte-identical reruns of solve + simulate.
Outcome determinism() {
  moesched::testing::TempDir dir("acceptance");
  const std::vector<std::string> topo{"--devices", "4", "--clusters", "4", "--experts", "16", "--top-k", "2",
                                      "--layers",  "3", "--batch",    "8", "--seq-len", "16", "--vocab", "2000"};
  std::ostringstream out, err;
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), topo.begin(), topo.end());
    return a;
  };
  if (app::run(with({"synth", "--out", (dir.path() / "synth").string(), "--seed", "12", "--noise", "0.2",
                     "--tokens-per-cluster", "40"}),
               out, err) != 0) {
    return {false, "synth failed: " + err.str()};
  }
  const auto trace = (dir.path() / "synth" / "trace.jsonl").string();
  for (const char* run : {"a", "b"}) {
    const auto base = dir.path() / run;
    if (app::run(with({"solve", "--out", (base / "solve").string(), "--seed", "21", "--trace", trace, "--split", "0.5",
                       "--threads", "2"}),
                 out, err) != 0 ||
        app::run(with({"simulate", "--out", (base / "sim").string(), "--seed", "21", "--trace", trace, "--split",
                       "0.5", "--bundle-dir", (base / "solve").string()}),
                 out, err) != 0) {
      return {false, "run failed: " + err.str()};
    }
  }
  int files = 0, same = 0;
  for (const char* sub : {"solve", "sim"}) {
    for (const auto& entry : std::filesystem::directory_iterator(dir.path() / "a" / sub)) {
      const auto name = entry.path().filename();
      if (name == "timing.json") continue;
      ++files;
      same += slurp(entry.path()) == slurp(dir.path() / "b" / sub / name);
    }
  }
  return {files > 0 && same == files, format("%d/%d report files byte-identical", same, files)};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> check;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "volume formulas", 1, volume_formulas},
      {2, "saving sweep", 1, saving_sweep},
      {3, "oracle equivalence", 60, oracle_equivalence},
      {4, "planted recovery", 30, planted_recovery},
      {5, "baseline gap", 30, baseline_gap},
      {6, "hard constraints", 60, hard_constraints},
      {7, "shuffle round trip", 10, shuffle_round_trip},
      {8, "gate transparency", 5, gate_transparency},
      {9, "dp fairness", 10, dp_fairness},
      {10, "memory estimate", 1, memory_estimate},
      {11, "analytic/simulated agreement", 30, analytic_agreement},
      {12, "determinism", 60, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.limit_seconds;
    const bool pass = o.ok && in_time;
    failed += !pass;
    std::printf("%s %2d %s [%.2fs / %.0fs%s]: %s\n", pass ? "PASS" : "FAIL", c.id, c.name, secs, c.limit_seconds,
                in_time ? "" : " exceeded", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
