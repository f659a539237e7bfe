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

#include "app.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "moesched/error.hpp"
#include "moesched/predictor.hpp"
#include "moesched/random.hpp"

namespace moesched::app {

using nlohmann::ordered_json;

SolverKind parse_solver(const std::string& name) {
  if (name == "ceo") return SolverKind::kCeo;
  if (name == "alternating") return SolverKind::kAlternating;
  if (name == "kmeans") return SolverKind::kKmeans;
  if (name == "round_robin") return SolverKind::kRoundRobin;
  if (name == "bruteforce") return SolverKind::kBruteforce;
  throw ValidationError("unknown solver '" + name + "'");
}

const char* to_string(SolverKind kind) {
  switch (kind) {
    case SolverKind::kCeo: return "ceo";
    case SolverKind::kAlternating: return "alternating";
    case SolverKind::kKmeans: return "kmeans";
    case SolverKind::kRoundRobin: return "round_robin";
    case SolverKind::kBruteforce: return "bruteforce";
  }
  return "?";
}

namespace {

// Share of each token's activations that land on experts of its own cluster.
std::vector<double> mass_confidence(const TokenExpertMatrix& m, const Assignment& a) {
  std::vector<double> conf(m.num_tokens(), 1.0 / a.clusters);
  for (std::size_t j = 0; j < m.num_tokens(); ++j) {
    if (m.unseen(j)) continue;
    std::int64_t own = 0;
    for (std::uint32_t e = 0; e < m.num_experts; ++e) {
      if (a.expert_labels[e] == a.token_labels[j]) own += m.count(j, e);
    }
    conf[j] = static_cast<double>(own) / static_cast<double>(m.freq[j]);
  }
  return conf;
}

RequestTrace routed_only(const RequestTrace& trace) {
  RequestTrace out{trace.layers, trace.top_k, {}};
  for (const auto& r : trace.requests) {
    if (r.routed.size() == r.tokens.size() * trace.layers * trace.top_k) out.requests.push_back(r);
  }
  return out;
}

}  // namespace

LayerSolution solve_layer(SolverKind kind, const TokenExpertMatrix& matrix, const RequestTrace& requests,
                          const Topology& topo, const SolverConfig& config) {
  LayerSolution s;
  switch (kind) {
    case SolverKind::kCeo: {
      auto r = solve_ceo(matrix, topo, config);
      s.assignment = std::move(r.assignment);
      s.token_confidence = std::move(r.token_confidence);
      break;
    }
    case SolverKind::kAlternating: {
      auto r = solve_alternating(matrix, requests, topo, config);
      s.assignment = std::move(r.assignment);
      s.token_confidence = std::move(r.token_confidence);
      break;
    }
    case SolverKind::kKmeans:
      s.assignment = baseline_two_stage_kmeans(matrix, topo, config.seed, config.beta);
      break;
    case SolverKind::kRoundRobin:
      s.assignment = baseline_round_robin(topo, matrix.token_ids);
      break;
    case SolverKind::kBruteforce:
      s.assignment = solve_bruteforce(matrix, topo, config.theta).assignment;
      break;
  }
  if (s.token_confidence.empty()) s.token_confidence = mass_confidence(matrix, s.assignment);
  s.objective = objective(s.assignment, matrix, config.theta);
  if (matrix.total > 0) s.metrics = metrics(s.assignment, matrix);
  s.violations = check_constraints(s.assignment, topo).size();
  return s;
}

Bundles build_bundles(SolverKind kind, const Profile& train, const Topology& topo, const SolverConfig& config,
                      std::uint32_t ngram_depth, const EmbeddingTable* embeddings) {
  topo.validate();
  if (train.layers.size() != topo.L) throw ValidationError("profile layer count differs from topology");
  const auto contiguous = baseline_round_robin(topo, std::span<const std::uint32_t>{}).expert_labels;
  Bundles out;
  for (auto* b : {&out.solved, &out.token_only}) {
    b->vocab = topo.vocab;
    b->clusters = topo.E;
    b->layers = topo.L;
    b->num_experts = topo.N;
  }
  for (std::uint32_t l = 0; l < topo.L; ++l) {
    const auto& matrix = train.layers[l];
    auto layer_config = config;
    layer_config.seed = stream_seed(config.seed, 0x6c61796572ULL, l);
    auto sol = solve_layer(kind, matrix, train.trace, topo, layer_config);

    std::vector<std::uint32_t> profiled;
    for (std::size_t j = 0; j < matrix.num_tokens(); ++j) {
      if (!matrix.unseen(j)) profiled.push_back(matrix.token_ids[j]);
    }
    auto extend = [&](TokenDeviceTable t) {
      if (embeddings == nullptr || profiled.empty()) return t;
      return extrapolate_oov(t, *embeddings, profiled);
    };
    out.solved.token_tables.push_back(extend(make_token_table(
        topo.vocab, topo.E, sol.assignment.token_ids, sol.assignment.token_labels, sol.token_confidence)));
    out.solved.expert_tables.push_back(sol.assignment.expert_labels);
    out.token_only.token_tables.push_back(
        extend(token_table_for_layout(build_confidence_table(matrix), contiguous, topo.E, topo.vocab)));
    out.token_only.expert_tables.push_back(contiguous);
    out.layers.push_back(std::move(sol));
  }
  const auto routed = routed_only(train.trace);
  out.solved.ngram = build_ngram_table(routed, out.solved.expert_tables, topo.E, ngram_depth);
  out.token_only.ngram = build_ngram_table(routed, out.token_only.expert_tables, topo.E, ngram_depth);
  out.solved.validate();
  out.token_only.validate();
  return out;
}

SimulationReport simulate_all(const Topology& topo, const LookupBundle& solved, const LookupBundle& token_only,
                              const RequestTrace& eval, HistorySource history) {
  SimulationPlan plan{topo, baseline_round_robin(topo, std::span<const std::uint32_t>{}), token_only, solved, history};
  SimulationReport report;
  for (auto mode : {SimMode::kDsMoe, SimMode::kSTs, SimMode::kSTsEg}) report.modes.push_back(simulate(plan, eval, mode));
  return report;
}

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

RunDirectory::RunDirectory(std::filesystem::path dir, std::string command)
    : dir_(std::move(dir)), command_(std::move(command)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec || !std::filesystem::is_directory(dir_)) throw IoError("cannot create output directory " + dir_.string());
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.close();
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace

void RunDirectory::write(const std::string& name, const std::string& content) {
  write_file(dir_ / name, content);
  artifacts_.push_back({name, sha256_hex(content), content.size()});
}

void RunDirectory::finish(double wall_seconds) {
  auto sorted = artifacts_;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  ordered_json manifest;
  manifest["command"] = command_;
  manifest["artifacts"] = ordered_json::array();
  for (const auto& a : sorted) {
    manifest["artifacts"].push_back({{"path", a.name}, {"sha256", a.sha256}, {"bytes", a.bytes}});
  }
  write_file(dir_ / "manifest.json", manifest.dump(2) + "\n");
  ordered_json timing{{"command", command_}, {"wall_seconds", wall_seconds}};
  write_file(dir_ / "timing.json", timing.dump(2) + "\n");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Finite values as a JSON number; infinities and NaN as strings.
ordered_json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double quantile(std::vector<double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

template <typename Fn>
std::string to_text(Fn&& fn) {
  std::ostringstream out;
  fn(out);
  return out.str();
}

struct TopologyArgs {
  std::string path;
  std::optional<std::uint32_t> G, E, N, k, L, B, S_seq, vocab;

  void add(CLI::App* cmd) {
    cmd->add_option("--topology", path, "Topology file (key=value lines)");
    cmd->add_option("--devices", G, "G, device count");
    cmd->add_option("--clusters", E, "E, expert-parallel degree");
    cmd->add_option("--experts", N, "N, experts per layer");
    cmd->add_option("--top-k", k, "k, experts routed per token");
    cmd->add_option("--layers", L, "L, MoE layers");
    cmd->add_option("--batch", B, "B, requests per batch");
    cmd->add_option("--seq-len", S_seq, "S, sequence length");
    cmd->add_option("--vocab", vocab, "vocabulary size");
  }

  Topology resolve() const {
    Topology t;
    if (!path.empty()) t = load_topology(path);
    auto set = [](std::uint32_t& field, const std::optional<std::uint32_t>& v) {
      if (v) field = *v;
    };
    set(t.G, G);
    set(t.E, E);
    set(t.N, N);
    set(t.k, k);
    set(t.L, L);
    set(t.B, B);
    set(t.S_seq, S_seq);
    set(t.vocab, vocab);
    t.validate();
    return t;
  }
};

struct SolverArgs {
  SolverConfig config;
  std::string solver = "ceo";
  bool relaxed_requests = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--solver", solver, "ceo | alternating | kmeans | round_robin | bruteforce");
    cmd->add_option("--theta", config.theta, "objective mix between L1 and L2");
    cmd->add_option("--steps", config.n_steps, "solver iterations");
    cmd->add_option("--samples", config.samples, "CEO samples per iteration");
    cmd->add_option("--rho", config.rho, "CEO elite fraction");
    cmd->add_option("--beta", config.beta, "token load relaxation");
    cmd->add_option("--eta", config.eta, "CEO smoothing rate");
    cmd->add_option("--ft-steps", config.ft_steps, "swap proposals per expert placement");
    cmd->add_option("--alpha-e", config.alpha_e);
    cmd->add_option("--beta-e", config.beta_e);
    cmd->add_option("--gamma-e", config.gamma_e);
    cmd->add_option("--alpha-r", config.alpha_r);
    cmd->add_option("--beta-r", config.beta_r);
    cmd->add_option("--threads", config.threads, "CEO sampling threads");
    cmd->add_flag("--relaxed-requests", relaxed_requests, "allow fewer requests than clusters");
  }

  ordered_json echo() const {
    return {{"solver", solver},         {"theta", config.theta},     {"steps", config.n_steps},
            {"samples", config.samples}, {"rho", config.rho},         {"beta", config.beta},
            {"eta", config.eta},         {"ft_steps", config.ft_steps}, {"alpha_e", config.alpha_e},
            {"beta_e", config.beta_e},   {"gamma_e", config.gamma_e}, {"alpha_r", config.alpha_r},
            {"beta_r", config.beta_r},   {"strict_request_balance", !relaxed_requests},
            {"seed", config.seed}};
  }
};

ordered_json topology_json(const Topology& t) {
  return {{"G", t.G}, {"E", t.E}, {"N", t.N}, {"k", t.k}, {"L", t.L}, {"B", t.B}, {"S_seq", t.S_seq}, {"vocab", t.vocab}};
}

void require_fraction(double f, bool allow_one) {
  if (!(f > 0.0 && (f < 1.0 || (allow_one && f == 1.0)))) {
    throw ValidationError("split fraction must lie in (0, 1" + std::string(allow_one ? "]" : ")"));
  }
}

// Training and evaluation parts of a trace. A fraction of 1 uses the whole
// trace for both.
std::pair<RequestTrace, RequestTrace> split_trace(const RequestTrace& trace, double fraction, std::uint64_t seed) {
  if (fraction == 1.0) return {trace, trace};
  return split_by_request(trace, fraction, stream_seed(seed, 0x73706c6974ULL));
}

Profile profile_of(RequestTrace trace, const Topology& topo) {
  Profile p;
  p.layers = build_matrices(trace, topo.N);
  p.trace = std::move(trace);
  return p;
}

// ---- commands -------------------------------------------------------------

struct SynthArgs {
  PlantedOptions planted;
  bool mixed = false;
  std::string embeddings_format = "csv";
};

void cmd_synth(const Topology& topo, SynthArgs args, std::uint64_t seed, RunDirectory& run) {
  args.planted.seed = seed;
  args.planted.pure_requests = !args.mixed;
  const auto planted = synthesize_planted_profile(topo, args.planted);
  run.write("topology.cfg", to_text([&](std::ostream& o) { write_topology(o, topo); }));
  run.write("trace.jsonl", to_text([&](std::ostream& o) { write_trace_jsonl(o, planted.profile.trace); }));
  run.write("token_labels.csv", to_text([&](std::ostream& o) {
              o << "token,cluster\n";
              for (std::size_t j = 0; j < planted.token_ids.size(); ++j) {
                o << planted.token_ids[j] << ',' << planted.token_cluster[j] << '\n';
              }
            }));
  run.write("expert_blocks.csv", to_text([&](std::ostream& o) {
              o << "layer,expert,block\n";
              for (std::size_t l = 0; l < planted.expert_block.size(); ++l) {
                for (std::size_t e = 0; e < planted.expert_block[l].size(); ++e) {
                  o << l << ',' << e << ',' << planted.expert_block[l][e] << '\n';
                }
              }
            }));
  if (args.planted.pure_requests) {
    run.write("request_clusters.csv", to_text([&](std::ostream& o) {
                o << "request,cluster\n";
                for (std::size_t r = 0; r < planted.request_cluster.size(); ++r) {
                  o << planted.profile.trace.requests[r].id << ',' << planted.request_cluster[r] << '\n';
                }
              }));
  }
  if (planted.embeddings) {
    if (args.embeddings_format == "binary") {
      run.write("embeddings.bin", to_text([&](std::ostream& o) { write_embeddings_binary(o, *planted.embeddings); }));
    } else if (args.embeddings_format == "csv") {
      run.write("embeddings.csv", to_text([&](std::ostream& o) { write_embeddings_csv(o, *planted.embeddings); }));
    } else {
      throw ValidationError("embedding format must be csv or binary");
    }
  }
}

void cmd_ingest(const Topology& topo, const std::string& trace_path, RunDirectory& run) {
  const auto profile = ingest_profile(std::filesystem::path(trace_path), topo);
  ordered_json summary{{"topology", topology_json(topo)},
                       {"requests", profile.trace.requests.size()},
                       {"routed_requests", routed_only(profile.trace).requests.size()},
                       {"layers", ordered_json::array()}};
  std::size_t issues = 0;
  for (const auto& m : profile.layers) {
    const auto report = validate(m);
    issues += report.size();
    ordered_json layer{{"layer", m.layer}, {"tokens", m.num_tokens()}, {"total", m.total}, {"issues", ordered_json::array()}};
    for (const auto& v : report) layer["issues"].push_back({{"what", v.what}, {"row", v.row}, {"col", v.col}});
    summary["layers"].push_back(std::move(layer));
  }
  run.write("summary.json", summary.dump(2) + "\n");
  run.write("matrices.csv", to_text([&](std::ostream& o) {
              o << "layer,token,expert,count\n";
              for (const auto& m : profile.layers) {
                for (std::size_t j = 0; j < m.num_tokens(); ++j) {
                  for (std::uint32_t e = 0; e < m.num_experts; ++e) {
                    if (m.count(j, e) != 0) o << m.layer << ',' << m.token_ids[j] << ',' << e << ',' << m.count(j, e) << '\n';
                  }
                }
              }
            }));
  if (issues != 0) throw ValidationError(std::to_string(issues) + " invariant violations in the ingested profile");
}

struct SolveArgs {
  std::string trace;
  std::string embeddings;
  double split = 1.0;
  std::uint32_t ngram = 2;
};

void cmd_solve(const Topology& topo, const SolveArgs& args, SolverArgs solver, std::uint64_t seed, RunDirectory& run) {
  require_fraction(args.split, true);
  solver.config.seed = seed;
  solver.config.strict_request_balance = !solver.relaxed_requests;
  solver.config.validate();
  const auto kind = parse_solver(solver.solver);
  const auto profile = ingest_profile(std::filesystem::path(args.trace), topo);
  auto [train_trace, eval_trace] = split_trace(profile.trace, args.split, seed);
  if (train_trace.requests.empty()) throw ValidationError("training split is empty");
  const auto train = profile_of(std::move(train_trace), topo);

  std::optional<EmbeddingTable> emb;
  if (!args.embeddings.empty()) {
    emb = load_embeddings(args.embeddings);
    if (emb->vocab() < topo.vocab) throw ValidationError("embeddings do not cover the vocabulary");
  }
  const auto bundles = build_bundles(kind, train, topo, solver.config, args.ngram, emb ? &*emb : nullptr);

  run.write("bundle.mslb", to_text([&](std::ostream& o) { write_bundle(o, bundles.solved); }));
  run.write("token_only.mslb", to_text([&](std::ostream& o) { write_bundle(o, bundles.token_only); }));
  run.write("assignments.csv", to_text([&](std::ostream& o) {
              o << "layer,kind,id,cluster,confidence\n";
              for (std::size_t l = 0; l < bundles.layers.size(); ++l) {
                const auto& s = bundles.layers[l];
                for (std::size_t e = 0; e < s.assignment.expert_labels.size(); ++e) {
                  o << l << ",expert," << e << ',' << s.assignment.expert_labels[e] << ",1\n";
                }
                for (std::size_t j = 0; j < s.assignment.token_ids.size(); ++j) {
                  o << l << ",token," << s.assignment.token_ids[j] << ',' << s.assignment.token_labels[j] << ','
                    << fmt(s.token_confidence[j]) << '\n';
                }
              }
            }));

  ordered_json summary{{"topology", topology_json(topo)},
                       {"config", solver.echo()},
                       {"split", args.split},
                       {"ngram", args.ngram},
                       {"train_requests", train.trace.requests.size()},
                       {"layers", ordered_json::array()}};
  double lar_sum = 0.0;
  for (std::size_t l = 0; l < bundles.layers.size(); ++l) {
    const auto& s = bundles.layers[l];
    lar_sum += s.metrics.lar;
    summary["layers"].push_back({{"layer", l},
                                 {"tokens", train.layers[l].num_tokens()},
                                 {"total", train.layers[l].total},
                                 {"l1", s.objective.l1},
                                 {"l2", s.objective.l2},
                                 {"objective", s.objective.combined},
                                 {"lar", s.metrics.lar},
                                 {"imbalance", num(s.metrics.imbalance)},
                                 {"constraint_violations", s.violations}});
  }
  summary["mean_lar"] = bundles.layers.empty() ? 0.0 : lar_sum / static_cast<double>(bundles.layers.size());
  const auto mem = bundle_memory_bytes(bundles.solved);
  summary["bundle_bytes"] = {{"token_labels", mem.token_labels},
                             {"token_confidences", mem.token_confidences},
                             {"ngram", mem.ngram},
                             {"expert_labels", mem.expert_labels},
                             {"total", mem.total()}};
  run.write("summary.json", summary.dump(2) + "\n");
}

struct SimulateArgs {
  std::string trace;
  std::string bundle_dir;
  double split = 1.0;
  std::string history = "predicted";
};

void cmd_simulate(const Topology& topo, const SimulateArgs& args, std::uint64_t seed, RunDirectory& run) {
  require_fraction(args.split, true);
  HistorySource history;
  if (args.history == "predicted") {
    history = HistorySource::kPredicted;
  } else if (args.history == "oracle") {
    history = HistorySource::kOracle;
  } else {
    throw ValidationError("history must be predicted or oracle");
  }
  const std::filesystem::path dir(args.bundle_dir);
  const auto solved = load_bundle(dir / "bundle.mslb");
  const auto token_only = load_bundle(dir / "token_only.mslb");
  const auto profile = ingest_profile(std::filesystem::path(args.trace), topo);
  auto eval = routed_only(split_trace(profile.trace, args.split, seed).second);
  if (eval.requests.empty()) throw ValidationError("evaluation split has no routed requests");
  const auto report = simulate_all(topo, solved, token_only, eval, history);

  const auto& ds = report.modes[0];
  ordered_json rows = ordered_json::array();
  ordered_json aggregate = ordered_json::array();
  std::ostringstream csv;
  csv << "mode,layer,alpha,remote_tokens,volume_total,saving\n";
  double ds_total = 0.0;
  for (const auto& r : ds) ds_total += r.analytic.total;
  for (const auto& mode : report.modes) {
    std::int64_t local = 0, remote = 0;
    double analytic = 0.0, events = 0.0, max_a2a = 0.0;
    for (const auto& r : mode) {
      const double saving = saving_ratio(ds[r.layer].analytic, r.analytic);
      csv << to_string(r.mode) << ',' << r.layer << ',' << fmt(r.measured_alpha) << ',' << r.remote_events << ','
          << fmt(r.analytic.total) << ',' << fmt(saving) << '\n';
      ordered_json stages = ordered_json::array();
      for (std::size_t s = 0; s < r.stage_kind.size(); ++s) {
        stages.push_back({{"kind", to_string(r.stage_kind[s])},
                          {"event_volume", r.stage_event_volume[s]},
                          {"analytic_volume", r.analytic.stage_volume[s]}});
      }
      rows.push_back({{"mode", to_string(r.mode)},
                      {"layer", r.layer},
                      {"alpha", r.measured_alpha},
                      {"tokens", r.tokens},
                      {"local_tokens", r.local_events},
                      {"remote_tokens", r.remote_events},
                      {"padded_slots", r.padded_slots},
                      {"volume_total", r.analytic.total},
                      {"event_volume_total", r.event_total},
                      {"max_device_a2a", r.max_device_a2a},
                      {"saving", saving},
                      {"stages", std::move(stages)}});
      local += r.local_events;
      remote += r.remote_events;
      analytic += r.analytic.total;
      events += r.event_total;
      max_a2a += r.max_device_a2a;
    }
    const double all = static_cast<double>(local + remote);
    aggregate.push_back({{"mode", to_string(mode.front().mode)},
                         {"alpha", all > 0 ? static_cast<double>(local) / all : 1.0},
                         {"local_tokens", local},
                         {"remote_tokens", remote},
                         {"volume_total", analytic},
                         {"event_volume_total", events},
                         {"max_device_a2a", max_a2a},
                         {"saving", ds_total > 0 ? (ds_total - analytic) / ds_total : 0.0}});
  }
  ordered_json out{{"topology", topology_json(topo)},
                   {"split", args.split},
                   {"history", args.history},
                   {"eval_requests", eval.requests.size()},
                   {"rows", std::move(rows)},
                   {"aggregate", std::move(aggregate)}};
  run.write("simulation.csv", csv.str());
  run.write("simulation.json", out.dump(2) + "\n");
}

void cmd_evaluate(const Topology& topo, const std::string& trace_path, double split, std::uint64_t seed,
                  RunDirectory& run) {
  require_fraction(split, false);
  const auto profile = ingest_profile(std::filesystem::path(trace_path), topo);
  auto [train_trace, hold_trace] = split_by_request(profile.trace, split, stream_seed(seed, 0x73706c6974ULL));
  if (train_trace.requests.empty() || hold_trace.requests.empty()) throw ValidationError("split leaves an empty side");
  const auto train = build_matrices(train_trace, topo.N);
  const auto hold = build_matrices(hold_trace, topo.N);

  ordered_json layers = ordered_json::array();
  std::int64_t predicted = 0, correct = 0, actual = 0;
  std::vector<double> all_kurt;
  std::size_t infinite = 0;
  for (std::uint32_t l = 0; l < topo.L; ++l) {
    const auto conf = build_confidence_table(train[l]);
    const auto score = evaluate_predictor(conf, hold[l], topo.k);
    predicted += score.predicted;
    correct += score.correct;
    actual += score.actual;
    std::vector<double> kurt;
    const auto values = activation_kurtosis(train[l]);
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (train[l].unseen(j)) continue;
      if (std::isfinite(values[j])) {
        kurt.push_back(values[j]);
      } else {
        ++infinite;
      }
    }
    all_kurt.insert(all_kurt.end(), kurt.begin(), kurt.end());
    std::sort(kurt.begin(), kurt.end());
    layers.push_back({{"layer", l},
                      {"precision", score.precision},
                      {"recall", score.recall},
                      {"f1", score.f1},
                      {"predicted", score.predicted},
                      {"correct", score.correct},
                      {"actual", score.actual},
                      {"kurtosis_median", quantile(kurt, 0.5)}});
  }
  std::sort(all_kurt.begin(), all_kurt.end());
  const double precision = predicted > 0 ? static_cast<double>(correct) / static_cast<double>(predicted) : 0.0;
  const double recall = actual > 0 ? static_cast<double>(correct) / static_cast<double>(actual) : 0.0;
  const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  ordered_json kurt{{"count", all_kurt.size()}, {"zero_variance", infinite}};
  for (auto [name, q] : {std::pair{"min", 0.0}, {"p25", 0.25}, {"median", 0.5}, {"p75", 0.75}, {"p90", 0.9}, {"max", 1.0}}) {
    kurt[name] = quantile(all_kurt, q);
  }
  std::size_t above8 = 0;
  for (double v : all_kurt) above8 += v > 8.0;
  kurt["fraction_above_8"] = all_kurt.empty() ? 0.0 : static_cast<double>(above8) / static_cast<double>(all_kurt.size());
  ordered_json report{
      {"topology", topology_json(topo)},
      {"split", split},
      {"train_requests", train_trace.requests.size()},
      {"holdout_requests", hold_trace.requests.size()},
      {"definition",
       "static top-k per token; micro-averaged over (token, expert) activation events; "
       "precision = correct/predicted, recall = correct/actual"},
      {"precision", precision},
      {"recall", recall},
      {"f1", f1},
      {"kurtosis", std::move(kurt)},
      {"layers", std::move(layers)}};
  run.write("report.json", report.dump(2) + "\n");
}

struct SweepArgs {
  std::string G = "8";
  std::string k = "2,6";
  std::uint32_t steps = 101;
};

std::vector<std::uint32_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::uint32_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(item, &used);
      if (used != item.size() || v == 0 || v > 1u << 20) throw std::invalid_argument(item);
      out.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::logic_error&) {
      throw ValidationError(std::string("bad ") + what + " list '" + text + "'");
    }
  }
  if (out.empty()) throw ValidationError(std::string("empty ") + what + " list");
  return out;
}

void cmd_sweep(const SweepArgs& args, RunDirectory& run) {
  std::ostringstream csv;
  csv << "G,k,alpha,ds_volume,smoe_volume,saving,saving_vs_k1_reference\n";
  ordered_json pairs = ordered_json::array();
  for (auto G : parse_list(args.G, "G")) {
    for (auto k : parse_list(args.k, "k")) {
      const auto curve = sweep_alpha(G, k, args.steps);
      // Reference with the DS-MoE dispatch term evaluated at k = 1.
      const double ref = pipeline_volume(ds_moe_pipeline(G, 1, 1, 1)).total;
      double lo = 1e300, hi = -1e300, lo_ref = 1e300, hi_ref = -1e300;
      for (const auto& p : curve) {
        const double s_ref = (ref - p.smoe_volume) / ref;
        csv << G << ',' << k << ',' << fmt(p.alpha) << ',' << fmt(p.ds_volume) << ',' << fmt(p.smoe_volume) << ','
            << fmt(p.saving) << ',' << fmt(s_ref) << '\n';
        lo = std::min(lo, p.saving);
        hi = std::max(hi, p.saving);
        lo_ref = std::min(lo_ref, s_ref);
        hi_ref = std::max(hi_ref, s_ref);
      }
      pairs.push_back({{"G", G},
                       {"k", k},
                       {"ds_volume", curve.front().ds_volume},
                       {"min_saving", lo},
                       {"max_saving", hi},
                       {"min_saving_vs_k1_reference", lo_ref},
                       {"max_saving_vs_k1_reference", hi_ref},
                       {"slope", -2.0 * k / G}});
    }
  }
  run.write("sweep.csv", csv.str());
  run.write("summary.json", ordered_json{{"steps", args.steps}, {"pairs", std::move(pairs)}}.dump(2) + "\n");
}

// ---- argument handling ----------------------------------------------------

std::map<std::string, std::string> read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Token-expert co-scheduling toolkit for expert-parallel MoE inference", "moesched"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  std::string out_dir;
  std::string config_path;
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* cmd, bool needs_seed) {
    cmd->add_option("--out", out_dir, "output directory")->required();
    cmd->add_option("--config", config_path, "key=value file; its values override flags");
    auto* s = cmd->add_option("--seed", seed, "random seed");
    if (needs_seed) s->required();
  };

  TopologyArgs topo_args;
  auto* synth = app.add_subcommand("synth", "write a planted synthetic profile");
  SynthArgs synth_args;
  common(synth, true);
  topo_args.add(synth);
  synth->add_option("--noise", synth_args.planted.noise, "probability of routing outside the own block");
  synth->add_option("--tokens-per-cluster", synth_args.planted.tokens_per_cluster);
  synth->add_option("--occurrences", synth_args.planted.occurrences_per_token, "occurrences per token");
  synth->add_option("--skew", synth_args.planted.skew, "within-block Zipf exponent");
  synth->add_option("--embedding-dim", synth_args.planted.embedding_dim, "0 disables embeddings");
  synth->add_option("--embedding-format", synth_args.embeddings_format, "csv | binary");
  synth->add_flag("--mixed-requests", synth_args.mixed, "requests mix tokens of all clusters");

  auto* ingest = app.add_subcommand("ingest", "validate a JSONL trace and dump its matrices");
  std::string trace_path;
  common(ingest, false);
  topo_args.add(ingest);
  ingest->add_option("--trace", trace_path)->required();

  auto* solve = app.add_subcommand("solve", "co-cluster tokens and experts and write lookup bundles");
  SolveArgs solve_args;
  SolverArgs solver_args;
  common(solve, true);
  topo_args.add(solve);
  solver_args.add(solve);
  solve->add_option("--trace", solve_args.trace)->required();
  solve->add_option("--embeddings", solve_args.embeddings, "embeddings for out-of-profile tokens");
  solve->add_option("--split", solve_args.split, "fraction of requests used for training");
  solve->add_option("--ngram", solve_args.ngram, "look-back layers of the device n-gram table");

  auto* evaluate = app.add_subcommand("evaluate", "score the static routing predictor on a holdout split");
  double eval_split = 0.25;
  common(evaluate, true);
  topo_args.add(evaluate);
  evaluate->add_option("--trace", trace_path)->required();
  evaluate->add_option("--split", eval_split, "fraction of requests used for training");

  auto* simulate_cmd = app.add_subcommand("simulate", "replay a trace in the ds_moe, s_ts and s_ts_eg modes");
  SimulateArgs sim_args;
  common(simulate_cmd, true);
  topo_args.add(simulate_cmd);
  simulate_cmd->add_option("--trace", sim_args.trace)->required();
  simulate_cmd->add_option("--bundle-dir", sim_args.bundle_dir, "output directory of solve")->required();
  simulate_cmd->add_option("--split", sim_args.split, "training fraction used by solve");
  simulate_cmd->add_option("--history", sim_args.history, "predicted | oracle");

  auto* sweep = app.add_subcommand("sweep", "communication volume over the local activation rate");
  SweepArgs sweep_args;
  common(sweep, false);
  sweep->add_option("--G", sweep_args.G, "comma-separated device counts");
  sweep->add_option("--k", sweep_args.k, "comma-separated experts per token");
  sweep->add_option("--steps", sweep_args.steps, "grid points in [0, 1]");

  try {
    std::vector<std::string> argv(args.begin(), args.end());
    // A --config file is applied by appending its entries after the flags.
    for (std::size_t i = 0; i < args.size(); ++i) {
      std::string path;
      if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
      if (path.empty()) continue;
      CLI::App* sub = nullptr;
      for (const auto& a : args) {
        if (auto* s = app.get_subcommand_no_throw(a)) {
          sub = s;
          break;
        }
      }
      if (sub == nullptr) throw ValidationError("--config needs a subcommand");
      static const std::map<std::string, std::string> aliases{
          {"G", "devices"}, {"E", "clusters"}, {"N", "experts"}, {"k", "top-k"},
          {"L", "layers"},  {"B", "batch"},    {"S_seq", "seq-len"}};
      for (const auto& [key, value] : read_config(path)) {
        // A literal option name wins over the topology symbol of the same name.
        std::string name = key;
        std::replace(name.begin(), name.end(), '_', '-');
        if (sub->get_option_no_throw("--" + name) == nullptr) {
          if (auto it = aliases.find(key); it != aliases.end()) name = it->second;
        }
        if (sub->get_option_no_throw("--" + name) == nullptr) {
          throw ValidationError("config key '" + key + "' is not an option of " + sub->get_name());
        }
        argv.push_back("--" + name + "=" + value);
      }
    }
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "moesched: " << e.what() << '\n';
    return 1;
  } catch (const ValidationError& e) {
    err << "moesched: " << e.what() << '\n';
    return 1;
  } catch (const IoError& e) {
    err << "moesched: " << e.what() << '\n';
    return 2;
  }

  const auto start = std::chrono::steady_clock::now();
  try {
    auto* cmd = app.get_subcommands().front();
    RunDirectory dir(out_dir, cmd->get_name());
    if (cmd == synth) {
      cmd_synth(topo_args.resolve(), synth_args, seed, dir);
    } else if (cmd == ingest) {
      cmd_ingest(topo_args.resolve(), trace_path, dir);
    } else if (cmd == solve) {
      cmd_solve(topo_args.resolve(), solve_args, solver_args, seed, dir);
    } else if (cmd == evaluate) {
      cmd_evaluate(topo_args.resolve(), trace_path, eval_split, seed, dir);
    } else if (cmd == simulate_cmd) {
      cmd_simulate(topo_args.resolve(), sim_args, seed, dir);
    } else {
      cmd_sweep(sweep_args, dir);
    }
    dir.finish(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    out << "wrote " << dir.path().string() << '\n';
  } catch (const IoError& e) {
    err << "moesched: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    err << "moesched: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "moesched: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace moesched::app
