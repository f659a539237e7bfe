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

#include "moesched/solver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "moesched/error.hpp"

namespace moesched {

std::uint32_t Assignment::label_of_token(std::uint32_t token) const {
  const auto it = std::lower_bound(token_ids.begin(), token_ids.end(), token);
  if (it != token_ids.end() && *it == token) return token_labels[static_cast<std::size_t>(it - token_ids.begin())];
  return token % clusters;
}

void SolverConfig::validate() const {
  if (!(theta > 0.0 && theta < 1.0)) throw ValidationError("theta must lie in (0,1)");
  if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("rho must lie in (0,1]");
  if (!(beta >= 1.0)) throw ValidationError("beta must be >= 1");
  if (!(eta > 0.0 && eta <= 1.0)) throw ValidationError("eta must lie in (0,1]");
  if (threads == 0) throw ValidationError("threads must be >= 1");
}

namespace {

void check_dims(const Assignment& assign, const TokenExpertMatrix& matrix) {
  if (assign.token_labels.size() != matrix.num_tokens() || assign.expert_labels.size() != matrix.num_experts) {
    throw ValidationError("assignment dimensions do not match the activation matrix");
  }
  if (!assign.token_ids.empty() && assign.token_ids != matrix.token_ids) {
    throw ValidationError("assignment token ids differ from the activation matrix");
  }
  if (assign.clusters == 0) throw ValidationError("assignment has zero clusters");
}

// Activation mass of token rows that lands on experts of the same cluster.
std::int64_t local_mass(const TokenExpertMatrix& m, std::span<const std::uint32_t> token_labels,
                        std::span<const std::uint32_t> expert_labels) {
  std::int64_t within = 0;
  for (std::size_t j = 0; j < m.num_tokens(); ++j) {
    const auto row = m.row(j);
    const auto c = token_labels[j];
    for (std::size_t e = 0; e < row.size(); ++e) {
      if (expert_labels[e] == c) within += row[e];
    }
  }
  return within;
}

ObjectiveValue evaluate(const TokenExpertMatrix& m, std::uint32_t clusters, std::span<const std::uint32_t> token_labels,
                        std::span<const std::uint32_t> expert_labels, double theta) {
  std::vector<double> loads(clusters, 0.0);
  for (std::size_t j = 0; j < m.num_tokens(); ++j) loads[token_labels[j]] += static_cast<double>(m.freq[j]);
  const double target = static_cast<double>(m.total) / clusters;
  ObjectiveValue v;
  for (double load : loads) v.l1 += std::abs(load - target);
  v.l2 = static_cast<double>(m.total - local_mass(m, token_labels, expert_labels));
  v.combined = theta * v.l1 + (1.0 - theta) * v.l2;
  return v;
}

std::uint32_t argmax_row(const double* p, std::uint32_t clusters) {
  return static_cast<std::uint32_t>(std::max_element(p, p + clusters) - p);
}

// Local search on the combined objective: single-token moves, token swaps
// between clusters and expert swaps, repeated until none improves.
void local_search(const TokenExpertMatrix& m, std::uint32_t E, double theta, std::vector<std::uint32_t>& tokens,
            std::vector<std::uint32_t>& experts) {
  const std::size_t t = m.num_tokens();
  const std::size_t N = m.num_experts;
  const double target = static_cast<double>(m.total) / E;
  constexpr double kEps = 1e-9;

  std::vector<double> loads(E, 0.0);
  std::vector<double> mass(t * E, 0.0);            // token row -> cluster
  std::vector<double> col(static_cast<std::size_t>(E) * N, 0.0);  // cluster -> expert
  for (std::size_t j = 0; j < t; ++j) {
    loads[tokens[j]] += static_cast<double>(m.freq[j]);
    for (std::size_t e = 0; e < N; ++e) {
      const auto n = static_cast<double>(m.count(j, e));
      mass[j * E + experts[e]] += n;
      col[tokens[j] * N + e] += n;
    }
  }
  auto dev = [&](double load) { return std::abs(load - target); };
  auto move_token = [&](std::size_t j, std::uint32_t to) {
    const auto from = tokens[j];
    const double f = static_cast<double>(m.freq[j]);
    loads[from] -= f;
    loads[to] += f;
    for (std::size_t e = 0; e < N; ++e) {
      const auto n = static_cast<double>(m.count(j, e));
      col[from * N + e] -= n;
      col[to * N + e] += n;
    }
    tokens[j] = to;
  };

  for (int round = 0; round < 200; ++round) {
    bool changed = false;
    for (std::size_t j = 0; j < t; ++j) {
      const auto a = tokens[j];
      const double f = static_cast<double>(m.freq[j]);
      std::uint32_t best = a;
      double best_delta = -kEps;
      for (std::uint32_t b = 0; b < E; ++b) {
        if (b == a) continue;
        const double d1 = dev(loads[a] - f) + dev(loads[b] + f) - dev(loads[a]) - dev(loads[b]);
        const double delta = theta * d1 + (1.0 - theta) * (mass[j * E + a] - mass[j * E + b]);
        if (delta < best_delta) {
          best_delta = delta;
          best = b;
        }
      }
      if (best != a) {
        move_token(j, best);
        changed = true;
      }
    }
    for (std::size_t j = 0; j < t; ++j) {
      for (std::size_t i = j + 1; i < t; ++i) {
        const auto a = tokens[j], b = tokens[i];
        if (a == b) continue;
        const double fj = static_cast<double>(m.freq[j]), fi = static_cast<double>(m.freq[i]);
        const double d1 = dev(loads[a] - fj + fi) + dev(loads[b] - fi + fj) - dev(loads[a]) - dev(loads[b]);
        const double d2 = mass[j * E + a] - mass[j * E + b] + mass[i * E + b] - mass[i * E + a];
        if (theta * d1 + (1.0 - theta) * d2 < -kEps) {
          move_token(j, b);
          move_token(i, a);
          changed = true;
        }
      }
    }
    for (std::size_t e1 = 0; e1 < N; ++e1) {
      for (std::size_t e2 = e1 + 1; e2 < N; ++e2) {
        const auto a = experts[e1], b = experts[e2];
        if (a == b) continue;
        const double gain = col[a * N + e2] - col[a * N + e1] + col[b * N + e1] - col[b * N + e2];
        if (gain > kEps) {
          for (std::size_t j = 0; j < t; ++j) {
            const auto d = static_cast<double>(m.count(j, e2) - m.count(j, e1));
            mass[j * E + a] += d;
            mass[j * E + b] -= d;
          }
          std::swap(experts[e1], experts[e2]);
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
}

// Re-splits the union of two clusters around one seed expert and its most
// co-activated peers. Accepts the first split that lowers the objective after
// local search.
bool resplit_pairs(const TokenExpertMatrix& m, std::uint32_t E, double theta, std::vector<std::uint32_t>& tokens,
                   std::vector<std::uint32_t>& experts) {
  const std::size_t t = m.num_tokens();
  const std::size_t N = m.num_experts;
  const std::size_t per = N / E;
  const double current = evaluate(m, E, tokens, experts, theta).combined;
  for (std::uint32_t a = 0; a < E; ++a) {
    for (std::uint32_t b = a + 1; b < E; ++b) {
      std::vector<std::size_t> xs, ts;
      for (std::size_t e = 0; e < N; ++e) {
        if (experts[e] == a || experts[e] == b) xs.push_back(e);
      }
      for (std::size_t j = 0; j < t; ++j) {
        if (tokens[j] == a || tokens[j] == b) ts.push_back(j);
      }
      if (ts.empty()) continue;
      const std::size_t nx = xs.size();
      std::vector<double> sim(nx * nx, 0.0), norm(nx, 0.0);
      for (auto j : ts) {
        for (std::size_t u = 0; u < nx; ++u) {
          const auto cu = static_cast<double>(m.count(j, xs[u]));
          if (cu == 0.0) continue;
          norm[u] += cu * cu;
          for (std::size_t v = 0; v < nx; ++v) sim[u * nx + v] += cu * static_cast<double>(m.count(j, xs[v]));
        }
      }
      for (std::size_t seed = 0; seed < nx; ++seed) {
        if (norm[seed] == 0.0) continue;
        std::vector<std::size_t> rank;
        for (std::size_t v = 0; v < nx; ++v) {
          if (v != seed) rank.push_back(v);
        }
        std::stable_sort(rank.begin(), rank.end(), [&](std::size_t x, std::size_t y) {
          const double sx = norm[x] > 0 ? sim[seed * nx + x] / std::sqrt(norm[x]) : 0.0;
          const double sy = norm[y] > 0 ? sim[seed * nx + y] / std::sqrt(norm[y]) : 0.0;
          return sx > sy;
        });
        auto trial_experts = experts;
        for (auto x : xs) trial_experts[x] = b;
        trial_experts[xs[seed]] = a;
        for (std::size_t r = 0; r + 1 < per; ++r) trial_experts[xs[rank[r]]] = a;
        auto trial_tokens = tokens;
        for (auto j : ts) {
          double ma = 0.0, mb = 0.0;
          for (auto x : xs) (trial_experts[x] == a ? ma : mb) += static_cast<double>(m.count(j, x));
          if (ma > mb) trial_tokens[j] = a;
          if (mb > ma) trial_tokens[j] = b;
        }
        local_search(m, E, theta, trial_tokens, trial_experts);
        if (evaluate(m, E, trial_tokens, trial_experts, theta).combined < current - 1e-9) {
          tokens = std::move(trial_tokens);
          experts = std::move(trial_experts);
          return true;
        }
      }
    }
  }
  return false;
}

void refine(const TokenExpertMatrix& m, std::uint32_t E, double theta, std::vector<std::uint32_t>& tokens,
            std::vector<std::uint32_t>& experts) {
  local_search(m, E, theta, tokens, experts);
  for (int round = 0; round < 32 && resplit_pairs(m, E, theta, tokens, experts); ++round) {
  }
}

}  // namespace

ObjectiveValue objective(const Assignment& assign, const TokenExpertMatrix& matrix, double theta) {
  check_dims(assign, matrix);
  for (auto c : assign.token_labels) {
    if (c >= assign.clusters) throw ValidationError("token label out of range");
  }
  for (auto c : assign.expert_labels) {
    if (c >= assign.clusters) throw ValidationError("expert label out of range");
  }
  return evaluate(matrix, assign.clusters, assign.token_labels, assign.expert_labels, theta);
}

std::vector<std::string> check_constraints(const Assignment& assign, const Topology& topo) {
  std::vector<std::string> issues;
  if (topo.E == 0 || topo.N % topo.E != 0) {
    issues.push_back("configuration: E=" + std::to_string(topo.E) + " does not divide N=" + std::to_string(topo.N));
    return issues;
  }
  if (assign.clusters != topo.E) {
    issues.push_back("assignment has " + std::to_string(assign.clusters) + " clusters, topology has E=" +
                     std::to_string(topo.E));
  }
  if (assign.expert_labels.size() != topo.N) {
    issues.push_back("assignment labels " + std::to_string(assign.expert_labels.size()) + " experts, N=" +
                     std::to_string(topo.N));
  }
  if (!assign.token_ids.empty() && assign.token_ids.size() != assign.token_labels.size()) {
    issues.push_back("token ids and token labels differ in length");
  }
  for (std::size_t j = 0; j < assign.token_labels.size(); ++j) {
    if (assign.token_labels[j] >= topo.E) issues.push_back("token row " + std::to_string(j) + " label out of range");
  }
  std::vector<std::uint32_t> per_cluster(topo.E, 0);
  for (std::size_t e = 0; e < assign.expert_labels.size(); ++e) {
    if (assign.expert_labels[e] >= topo.E) {
      issues.push_back("expert " + std::to_string(e) + " label out of range");
    } else {
      ++per_cluster[assign.expert_labels[e]];
    }
  }
  for (std::uint32_t c = 0; c < topo.E; ++c) {
    if (per_cluster[c] != topo.experts_per_cluster()) {
      issues.push_back("cluster " + std::to_string(c) + " holds " + std::to_string(per_cluster[c]) +
                       " experts, expected " + std::to_string(topo.experts_per_cluster()));
    }
  }
  return issues;
}

std::vector<std::uint32_t> sample_labels(std::span<const double> p_matrix, std::uint32_t clusters, SampleKind kind,
                                         std::span<const std::int64_t> freq, double beta, Rng& rng) {
  const std::size_t rows = p_matrix.size() / clusters;
  std::vector<std::uint32_t> labels(rows);
  std::vector<double> mask(clusters, 1.0);
  std::vector<double> counter(clusters, 0.0);
  std::vector<double> p(clusters);

  double capacity = 0.0;
  if (kind == SampleKind::kExpert) {
    capacity = static_cast<double>(rows / clusters);
  } else {
    if (freq.size() != rows) throw ValidationError("token sampling needs one frequency per row");
    const double total = static_cast<double>(std::accumulate(freq.begin(), freq.end(), std::int64_t{0}));
    capacity = total / clusters * beta;
  }

  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = p_matrix.data() + i * clusters;
    double sum = 0.0;
    bool any_open = false;
    for (std::uint32_t c = 0; c < clusters; ++c) {
      p[c] = row[c] * mask[c];
      sum += p[c];
      any_open = any_open || mask[c] > 0.0;
    }
    std::uint32_t cls = 0;
    if (!any_open) {
      cls = static_cast<std::uint32_t>(std::min_element(counter.begin(), counter.end()) - counter.begin());
    } else if (sum <= 0.0) {
      cls = static_cast<std::uint32_t>(rng.categorical(mask));
    } else {
      cls = static_cast<std::uint32_t>(rng.categorical(p));
    }
    labels[i] = cls;
    if (kind == SampleKind::kExpert) {
      counter[cls] += 1.0;
    } else {
      counter[cls] += static_cast<double>(freq[i]);
    }
    if (counter[cls] >= capacity) mask[cls] = 0.0;
  }
  return labels;
}

CeoResult solve_ceo(const TokenExpertMatrix& matrix, const Topology& topo, const SolverConfig& config) {
  config.validate();
  const std::uint32_t E = topo.E;
  const std::uint32_t N = matrix.num_experts;
  if (E == 0 || N % E != 0) throw ValidationError("infeasible capacity: E does not divide N");
  if (N != topo.N) throw ValidationError("matrix expert count differs from topology N");
  if (config.samples < 2) throw ValidationError("CEO needs at least 2 samples per iteration");
  const std::size_t t = matrix.num_tokens();

  CeoResult result;
  result.assignment.clusters = E;
  result.assignment.token_ids = matrix.token_ids;

  std::vector<double> p_ep(static_cast<std::size_t>(N) * E, 1.0 / E);
  std::vector<double> p_tk(t * E, 1.0 / E);

  const std::uint32_t K = config.samples;
  const auto n_elite =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(config.rho * static_cast<double>(K))));
  std::vector<std::vector<std::uint32_t>> ep_samples(K), tk_samples(K);
  std::vector<double> scores(K);

  std::vector<std::uint32_t> best_ep, best_tk;
  double best_objective = std::numeric_limits<double>::infinity();
  double best_score = -std::numeric_limits<double>::infinity();

  auto draw = [&](std::uint32_t it, std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      Rng rng(stream_seed(config.seed, it, s));
      ep_samples[s] = sample_labels(p_ep, E, SampleKind::kExpert, {}, 1.0, rng);
      tk_samples[s] = sample_labels(p_tk, E, SampleKind::kToken, matrix.freq, config.beta, rng);
      scores[s] = static_cast<double>(local_mass(matrix, tk_samples[s], ep_samples[s]));
    }
  };

  std::vector<std::size_t> order(K);
  std::vector<double> freq_ep(p_ep.size()), freq_tk(p_tk.size());
  for (std::uint32_t it = 0; it < config.n_steps && E > 1; ++it) {
    const std::uint32_t workers = std::min<std::uint32_t>(config.threads, K);
    if (workers <= 1) {
      draw(it, 0, K);
    } else {
      std::vector<std::jthread> pool;
      const std::size_t chunk = (K + workers - 1) / workers;
      for (std::uint32_t w = 0; w < workers; ++w) {
        const std::size_t b = w * chunk;
        const std::size_t e = std::min<std::size_t>(K, b + chunk);
        if (b < e) pool.emplace_back([&, b, e] { draw(it, b, e); });
      }
    }

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    result.iteration_best_score.push_back(scores[order[0]]);
    best_score = std::max(best_score, scores[order[0]]);
    result.best_so_far_score.push_back(best_score);

    for (std::size_t s = 0; s < K; ++s) {
      const auto v = evaluate(matrix, E, tk_samples[s], ep_samples[s], config.theta);
      if (v.combined < best_objective) {
        best_objective = v.combined;
        best_ep = ep_samples[s];
        best_tk = tk_samples[s];
      }
    }

    std::fill(freq_ep.begin(), freq_ep.end(), 0.0);
    std::fill(freq_tk.begin(), freq_tk.end(), 0.0);
    for (std::size_t r = 0; r < n_elite; ++r) {
      const auto s = order[r];
      for (std::size_t e = 0; e < N; ++e) freq_ep[e * E + ep_samples[s][e]] += 1.0;
      for (std::size_t j = 0; j < t; ++j) freq_tk[j * E + tk_samples[s][j]] += 1.0;
    }
    auto update = [&](std::vector<double>& p, const std::vector<double>& freq) {
      const std::size_t rows = p.size() / E;
      for (std::size_t i = 0; i < rows; ++i) {
        double sum = 0.0;
        for (std::uint32_t c = 0; c < E; ++c) {
          auto& v = p[i * E + c];
          v = (1.0 - config.eta) * v + config.eta * freq[i * E + c] / static_cast<double>(n_elite);
          sum += v;
        }
        for (std::uint32_t c = 0; c < E; ++c) p[i * E + c] /= sum;
      }
    };
    update(p_ep, freq_ep);
    update(p_tk, freq_tk);
  }

  // Expert decode: argmax per row, visiting (expert, cluster) pairs by
  // decreasing probability so a full cluster passes the expert to its next
  // best choice. Identical to the plain argmax whenever that is balanced.
  Assignment& a = result.assignment;
  a.expert_labels.assign(N, 0);
  result.expert_confidence.assign(N, 1.0);
  if (E > 1) {
    std::vector<std::pair<std::size_t, std::uint32_t>> pairs;
    for (std::size_t e = 0; e < N; ++e) {
      for (std::uint32_t c = 0; c < E; ++c) pairs.emplace_back(e, c);
    }
    std::stable_sort(pairs.begin(), pairs.end(), [&](const auto& x, const auto& y) {
      return p_ep[x.first * E + x.second] > p_ep[y.first * E + y.second];
    });
    std::vector<bool> placed(N, false);
    std::vector<std::uint32_t> fill(E, 0);
    for (auto [e, c] : pairs) {
      if (placed[e] || fill[c] == N / E) continue;
      placed[e] = true;
      ++fill[c];
      a.expert_labels[e] = c;
      result.expert_confidence[e] = p_ep[e * E + c];
    }
  }
  a.token_labels.assign(t, 0);
  result.token_confidence.assign(t, 1.0);
  for (std::size_t j = 0; j < t && E > 1; ++j) {
    const auto c = argmax_row(p_tk.data() + j * E, E);
    a.token_labels[j] = c;
    result.token_confidence[j] = p_tk[j * E + c];
  }

  result.objective = evaluate(matrix, E, a.token_labels, a.expert_labels, config.theta);
  if (E > 1) {
    // Each start is refined by local search; the decoded argmax goes first so
    // it wins ties. Later starts are the best sample seen and the final elite.
    refine(matrix, E, config.theta, a.token_labels, a.expert_labels);
    result.objective = evaluate(matrix, E, a.token_labels, a.expert_labels, config.theta);
    std::vector<std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>>> starts;
    if (!best_ep.empty()) starts.emplace_back(best_tk, best_ep);
    if (config.n_steps > 0) {
      for (std::size_t r = 0; r < n_elite; ++r) starts.emplace_back(tk_samples[order[r]], ep_samples[order[r]]);
    }
    for (auto& [tk, ep] : starts) {
      refine(matrix, E, config.theta, tk, ep);
      const auto v = evaluate(matrix, E, tk, ep, config.theta);
      if (v.combined < result.objective.combined) {
        a.token_labels = tk;
        a.expert_labels = ep;
        result.objective = v;
        result.from_best_sample = true;
      }
    }
    for (std::size_t e = 0; e < N; ++e) result.expert_confidence[e] = p_ep[e * E + a.expert_labels[e]];
    for (std::size_t j = 0; j < t; ++j) result.token_confidence[j] = p_tk[j * E + a.token_labels[j]];
  }
  return result;
}

}  // namespace moesched
