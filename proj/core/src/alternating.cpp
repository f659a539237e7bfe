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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "moesched/error.hpp"
#include "moesched/predictor.hpp"
#include "moesched/solver.hpp"

namespace moesched {

namespace {

void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename Score>
std::uint32_t best_open(std::uint32_t clusters, const std::vector<bool>& open, Score&& score) {
  std::uint32_t best = clusters;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::uint32_t c = 0; c < clusters; ++c) {
    if (!open[c]) continue;
    const double s = score(c);
    if (best == clusters || s > best_score) {
      best = c;
      best_score = s;
    }
  }
  return best;
}

// Precomputed affinities shared by both half-steps.
class CoScheduler {
 public:
  CoScheduler(const TokenExpertMatrix& matrix, const RequestTrace& trace, std::uint32_t clusters,
              const SolverConfig& config)
      : m_(matrix), E_(clusters), N_(matrix.num_experts), cfg_(config), conf_(build_confidence_table(matrix)) {
    loads_ = matrix.expert_loads();
    total_load_ = static_cast<double>(std::accumulate(loads_.begin(), loads_.end(), std::int64_t{0}));

    // Expert columns, unit-normalized, for cosine affinity.
    columns_.assign(N_, std::vector<double>(m_.num_tokens(), 0.0));
    for (std::size_t j = 0; j < m_.num_tokens(); ++j) {
      for (std::size_t e = 0; e < N_; ++e) columns_[e][j] = static_cast<double>(m_.count(j, e));
    }
    for (auto& c : columns_) normalize(c);
    expert_cos_.assign(static_cast<std::size_t>(N_) * N_, 0.0);
    for (std::size_t a = 0; a < N_; ++a) {
      for (std::size_t b = 0; b < N_; ++b) expert_cos_[a * N_ + b] = dot(columns_[a], columns_[b]);
    }

    // Request -> expert affinity: predicted activation mass per token.
    for (const auto& req : trace.requests) {
      std::vector<double> aff(N_, 0.0);
      std::vector<std::size_t> rows;
      for (auto tok : req.tokens) {
        const auto row = conf_.row_of(tok);
        if (!row || conf_.unseen[*row]) continue;
        rows.push_back(*row);
        const auto p = conf_.row(*row);
        for (std::size_t e = 0; e < N_; ++e) aff[e] += p[e];
      }
      if (!rows.empty()) {
        for (double& x : aff) x /= static_cast<double>(rows.size());
      }
      std::vector<double> unit = aff;
      normalize(unit);
      req_expert_.push_back(std::move(aff));
      req_unit_.push_back(std::move(unit));
      req_rows_.push_back(std::move(rows));
      req_len_.push_back(req.tokens.size());
    }
  }

  std::size_t num_requests() const { return req_expert_.size(); }

  std::vector<std::uint32_t> place_experts(const std::vector<std::uint32_t>& req_labels, std::uint64_t stream) const {
    // Mean request affinity of each cluster's requests to each expert.
    std::vector<double> rc(static_cast<std::size_t>(E_) * N_, 0.0);
    std::vector<double> members(E_, 0.0);
    for (std::size_t r = 0; r < num_requests(); ++r) {
      members[req_labels[r]] += 1.0;
      for (std::size_t e = 0; e < N_; ++e) rc[req_labels[r] * N_ + e] += req_expert_[r][e];
    }
    for (std::uint32_t c = 0; c < E_; ++c) {
      if (members[c] == 0.0) continue;
      for (std::size_t e = 0; e < N_; ++e) rc[c * N_ + e] /= members[c];
    }

    std::vector<std::uint32_t> order(N_);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return loads_[a] > loads_[b]; });

    const std::uint32_t cap = N_ / E_;
    std::vector<std::uint32_t> labels(N_, 0);
    std::vector<std::vector<std::uint32_t>> cluster(E_);
    std::vector<bool> open(E_, true);
    std::vector<double> load(E_, 0.0);
    for (auto e : order) {
      const auto c = best_open(E_, open, [&](std::uint32_t c) {
        return cfg_.alpha_e * expert_affinity(e, cluster[c]) + cfg_.beta_e * rc[c * N_ + e] -
               cfg_.gamma_e * load_fraction(load[c]);
      });
      labels[e] = c;
      cluster[c].push_back(e);
      load[c] += static_cast<double>(loads_[e]);
      if (cluster[c].size() >= cap) open[c] = false;
    }

    if (E_ > 1) {
      Rng rng(stream);
      double current = placement_potential(labels, rc);
      for (std::uint32_t step = 0; step < cfg_.ft_steps; ++step) {
        const auto c1 = static_cast<std::uint32_t>(rng.below(E_));
        auto c2 = static_cast<std::uint32_t>(rng.below(E_ - 1));
        if (c2 >= c1) ++c2;
        const auto i1 = rng.below(cluster[c1].size());
        const auto i2 = rng.below(cluster[c2].size());
        const auto e1 = cluster[c1][i1];
        const auto e2 = cluster[c2][i2];
        labels[e1] = c2;
        labels[e2] = c1;
        const double swapped = placement_potential(labels, rc);
        if (swapped - current > 1e-12) {
          current = swapped;
          cluster[c1][i1] = e2;
          cluster[c2][i2] = e1;
        } else {
          labels[e1] = c1;
          labels[e2] = c2;
        }
      }
    }
    return labels;
  }

  std::vector<std::uint32_t> schedule_requests(const std::vector<std::uint32_t>& expert_labels) const {
    const std::size_t K = num_requests();
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return req_len_[a] > req_len_[b]; });

    std::vector<std::uint32_t> labels(K, 0);
    std::vector<std::vector<double>> unit_sum(E_, std::vector<double>(N_, 0.0));
    std::vector<double> count(E_, 0.0);
    std::vector<bool> open(E_, true);
    for (auto r : order) {
      const auto c = best_open(E_, open, [&](std::uint32_t c) {
        const double rr = count[c] > 0.0 ? dot(req_unit_[r], unit_sum[c]) / count[c] : 0.0;
        double re = 0.0;
        for (std::size_t e = 0; e < N_; ++e) {
          if (expert_labels[e] == c) re += req_expert_[r][e];
        }
        return cfg_.alpha_r * rr + cfg_.beta_r * re;
      });
      labels[r] = c;
      count[c] += 1.0;
      for (std::size_t e = 0; e < N_; ++e) unit_sum[c][e] += req_unit_[r][e];
      if (count[c] * E_ >= static_cast<double>(K)) open[c] = false;
    }
    return labels;
  }

  // Max cluster load over the mean, minus one, plus the predicted fraction
  // of request-token activations that leave their request's cluster.
  double score(const std::vector<std::uint32_t>& expert_labels, const std::vector<std::uint32_t>& req_labels) const {
    std::vector<double> load(E_, 0.0);
    for (std::size_t e = 0; e < N_; ++e) load[expert_labels[e]] += static_cast<double>(loads_[e]);
    const double mean = total_load_ / E_;
    const double excess = mean > 0.0 ? *std::max_element(load.begin(), load.end()) / mean - 1.0 : 0.0;
    double local = 0.0;
    double events = 0.0;
    for (std::size_t r = 0; r < num_requests(); ++r) {
      for (auto row : req_rows_[r]) {
        const auto p = conf_.row(row);
        for (std::size_t e = 0; e < N_; ++e) {
          if (expert_labels[e] == req_labels[r]) local += p[e];
        }
        events += 1.0;
      }
    }
    const double remote = events > 0.0 ? 1.0 - local / events : 0.0;
    return excess + remote;
  }

  const TokenExpertConfidence& confidence() const { return conf_; }
  const std::vector<std::size_t>& request_rows(std::size_t r) const { return req_rows_[r]; }

 private:
  double expert_affinity(std::uint32_t e, const std::vector<std::uint32_t>& members) const {
    if (members.empty()) return 0.0;
    double s = 0.0;
    for (auto f : members) s += expert_cos_[e * N_ + f];
    return s / static_cast<double>(members.size());
  }

  double load_fraction(double load) const { return total_load_ > 0.0 ? load / total_load_ : 0.0; }

  // Objective the fine-tuning swaps climb: affinity of every expert to its
  // cluster minus the weighted deviation of cluster loads from the mean.
  double placement_potential(const std::vector<std::uint32_t>& labels, const std::vector<double>& rc) const {
    std::vector<double> load(E_, 0.0);
    double aff = 0.0;
    for (std::size_t e = 0; e < N_; ++e) {
      double s = 0.0;
      double n = 0.0;
      for (std::size_t f = 0; f < N_; ++f) {
        if (f == e || labels[f] != labels[e]) continue;
        s += expert_cos_[e * N_ + f];
        n += 1.0;
      }
      aff += cfg_.alpha_e * (n > 0.0 ? s / n : 0.0) + cfg_.beta_e * rc[labels[e] * N_ + e];
      load[labels[e]] += static_cast<double>(loads_[e]);
    }
    double deviation = 0.0;
    for (double l : load) deviation += std::abs(load_fraction(l) - 1.0 / E_);
    return aff - cfg_.gamma_e * deviation;
  }

  const TokenExpertMatrix& m_;
  std::uint32_t E_;
  std::uint32_t N_;
  const SolverConfig& cfg_;
  TokenExpertConfidence conf_;
  std::vector<std::int64_t> loads_;
  double total_load_ = 0.0;
  std::vector<std::vector<double>> columns_;
  std::vector<double> expert_cos_;
  std::vector<std::vector<double>> req_expert_;
  std::vector<std::vector<double>> req_unit_;
  std::vector<std::vector<std::size_t>> req_rows_;
  std::vector<std::size_t> req_len_;
};

}  // namespace

AlternatingResult solve_alternating(const TokenExpertMatrix& matrix, const RequestTrace& requests,
                                    const Topology& topo, const SolverConfig& config) {
  config.validate();
  const std::uint32_t E = topo.E;
  const std::uint32_t N = matrix.num_experts;
  if (E == 0 || N % E != 0) throw ValidationError("infeasible capacity: E does not divide N");
  if (requests.requests.empty()) throw ValidationError("alternating solver needs at least one request");
  if (config.strict_request_balance && requests.requests.size() < E) {
    throw ValidationError("fewer requests than clusters under strict request balancing");
  }
  const std::size_t t = matrix.num_tokens();

  AlternatingResult result;
  result.assignment.clusters = E;
  result.assignment.token_ids = matrix.token_ids;
  CoScheduler sched(matrix, requests, E, config);

  if (E == 1) {
    result.assignment.expert_labels.assign(N, 0);
    result.assignment.token_labels.assign(t, 0);
    result.token_confidence.assign(t, 1.0);
    result.request_labels.assign(requests.requests.size(), 0);
    result.score = sched.score(result.assignment.expert_labels, result.request_labels);
    return result;
  }

  // Seed the request clustering against the contiguous expert layout.
  std::vector<std::uint32_t> vanilla(N);
  for (std::uint32_t e = 0; e < N; ++e) vanilla[e] = e / (N / E);
  auto req_labels = sched.schedule_requests(vanilla);

  std::vector<std::uint32_t> best_experts;
  std::vector<std::uint32_t> best_requests;
  double best = std::numeric_limits<double>::infinity();
  const std::uint32_t rounds = std::max<std::uint32_t>(1, config.n_steps);
  for (std::uint32_t it = 0; it < rounds; ++it) {
    auto experts = sched.place_experts(req_labels, stream_seed(config.seed, it, 0xf7));
    req_labels = sched.schedule_requests(experts);
    const double s = sched.score(experts, req_labels);
    if (s < best) {
      best = s;
      best_experts = experts;
      best_requests = req_labels;
    }
  }
  result.score = best;
  result.assignment.expert_labels = best_experts;
  result.request_labels = best_requests;

  // Token labels from where their occurrences were scheduled.
  std::vector<double> votes(t * E, 0.0);
  for (std::size_t r = 0; r < sched.num_requests(); ++r) {
    for (auto row : sched.request_rows(r)) votes[row * E + best_requests[r]] += 1.0;
  }
  result.assignment.token_labels.assign(t, 0);
  result.token_confidence.assign(t, 0.0);
  std::vector<double> mass(E);
  for (std::size_t j = 0; j < t; ++j) {
    const double* v = votes.data() + j * E;
    const double total = std::accumulate(v, v + E, 0.0);
    if (total > 0.0) {
      const auto c = static_cast<std::uint32_t>(std::max_element(v, v + E) - v);
      result.assignment.token_labels[j] = c;
      result.token_confidence[j] = v[c] / total;
      continue;
    }
    // Token never appears in a request: follow its predicted expert mass.
    std::fill(mass.begin(), mass.end(), 0.0);
    const auto p = sched.confidence().row(j);
    for (std::size_t e = 0; e < N; ++e) mass[best_experts[e]] += p[e];
    const auto c = static_cast<std::uint32_t>(std::max_element(mass.begin(), mass.end()) - mass.begin());
    result.assignment.token_labels[j] = c;
    result.token_confidence[j] = mass[c];
  }
  return result;
}

}  // namespace moesched
