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

#include "moesched/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moesched/error.hpp"
#include "moesched/random.hpp"

namespace moesched {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::uint32_t parse_u32(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size() || v < 0 || v > std::numeric_limits<std::uint32_t>::max()) throw 0;
    return static_cast<std::uint32_t>(v);
  } catch (...) {
    throw ValidationError("topology key '" + key + "' has invalid value '" + value + "'");
  }
}

constexpr std::uint32_t kNoExpert = std::numeric_limits<std::uint32_t>::max();

}  // namespace

void Topology::validate() const {
  if (G == 0 || E == 0 || N == 0 || k == 0 || L == 0 || B == 0 || S_seq == 0 || vocab == 0) {
    throw ValidationError("topology fields must all be >= 1");
  }
  if (k > N) throw ValidationError("topology: k exceeds N");
  if (N % E != 0) {
    throw ValidationError("topology: E=" + std::to_string(E) + " does not divide N=" + std::to_string(N));
  }
}

Topology parse_topology(std::istream& in) {
  Topology topo;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key == "G") topo.G = parse_u32(key, value);
    else if (key == "E") topo.E = parse_u32(key, value);
    else if (key == "N") topo.N = parse_u32(key, value);
    else if (key == "k") topo.k = parse_u32(key, value);
    else if (key == "L") topo.L = parse_u32(key, value);
    else if (key == "B") topo.B = parse_u32(key, value);
    else if (key == "S_seq") topo.S_seq = parse_u32(key, value);
    else if (key == "vocab") topo.vocab = parse_u32(key, value);
  }
  return topo;
}

Topology load_topology(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open topology file " + path.string());
  return parse_topology(in);
}

void write_topology(std::ostream& out, const Topology& topo) {
  out << "G=" << topo.G << "\nE=" << topo.E << "\nN=" << topo.N << "\nk=" << topo.k << "\nL=" << topo.L
      << "\nB=" << topo.B << "\nS_seq=" << topo.S_seq << "\nvocab=" << topo.vocab << "\n";
}

TokenExpertMatrix TokenExpertMatrix::from_counts(std::uint32_t layer, std::uint32_t num_experts,
                                                 std::vector<std::uint32_t> token_ids,
                                                 std::vector<std::int64_t> counts) {
  if (counts.size() != token_ids.size() * num_experts) {
    throw ValidationError("count buffer does not match token_ids x num_experts");
  }
  TokenExpertMatrix m;
  m.layer = layer;
  m.num_experts = num_experts;
  m.token_ids = std::move(token_ids);
  m.counts = std::move(counts);
  m.freq.assign(m.token_ids.size(), 0);
  for (std::size_t j = 0; j < m.token_ids.size(); ++j) {
    const auto r = m.row(j);
    m.freq[j] = std::accumulate(r.begin(), r.end(), std::int64_t{0});
    m.total += m.freq[j];
  }
  return m;
}

std::optional<std::size_t> TokenExpertMatrix::row_of(std::uint32_t token) const {
  const auto it = std::lower_bound(token_ids.begin(), token_ids.end(), token);
  if (it == token_ids.end() || *it != token) return std::nullopt;
  return static_cast<std::size_t>(it - token_ids.begin());
}

std::vector<std::int64_t> TokenExpertMatrix::expert_loads() const {
  std::vector<std::int64_t> loads(num_experts, 0);
  for (std::size_t j = 0; j < num_tokens(); ++j) {
    for (std::size_t e = 0; e < num_experts; ++e) loads[e] += count(j, e);
  }
  return loads;
}

std::vector<ValidationIssue> validate(const TokenExpertMatrix& m) {
  std::vector<ValidationIssue> issues;
  const auto t = static_cast<std::int64_t>(m.token_ids.size());
  if (m.counts.size() != m.token_ids.size() * m.num_experts) {
    issues.push_back({"counts size does not equal t x N"});
    return issues;
  }
  if (m.freq.size() != m.token_ids.size()) {
    issues.push_back({"freq length does not equal t"});
    return issues;
  }
  for (std::int64_t j = 1; j < t; ++j) {
    if (m.token_ids[j] <= m.token_ids[j - 1]) issues.push_back({"token ids not strictly ascending", j});
  }
  std::int64_t total = 0;
  for (std::int64_t j = 0; j < t; ++j) {
    std::int64_t sum = 0;
    for (std::int64_t e = 0; e < m.num_experts; ++e) {
      const std::int64_t c = m.count(j, e);
      if (c < 0) issues.push_back({"negative count", j, e});
      if (c > std::numeric_limits<std::uint32_t>::max()) issues.push_back({"count exceeds 32-bit range", j, e});
      sum += c;
    }
    if (sum != m.freq[j]) issues.push_back({"token frequency differs from row sum", j});
    total += m.freq[j];
  }
  if (total != m.total) issues.push_back({"total differs from sum of token frequencies"});
  return issues;
}

bool RequestTrace::has_routing() const {
  if (requests.empty()) return false;
  return std::all_of(requests.begin(), requests.end(), [&](const Request& r) {
    return r.routed.size() == r.tokens.size() * layers * top_k;
  });
}

std::size_t RequestTrace::num_occurrences() const {
  std::size_t n = 0;
  for (const auto& r : requests) n += r.tokens.size();
  return n;
}

void validate_trace(const RequestTrace& trace, const Topology& topo) {
  for (const auto& r : trace.requests) {
    const std::string where = "request " + std::to_string(r.id) + ": ";
    for (auto tok : r.tokens) {
      if (tok >= topo.vocab) throw ValidationError(where + "token id " + std::to_string(tok) + " >= vocab");
    }
    if (r.routed.empty()) continue;
    if (r.routed.size() != r.tokens.size() * trace.layers * trace.top_k) {
      throw ValidationError(where + "routing record has wrong length");
    }
    for (std::size_t pos = 0; pos < r.tokens.size(); ++pos) {
      for (std::size_t l = 0; l < trace.layers; ++l) {
        auto ex = trace.experts(r, pos, l);
        for (std::size_t a = 0; a < ex.size(); ++a) {
          if (ex[a] >= topo.N) throw ValidationError(where + "expert index out of range");
          for (std::size_t b = a + 1; b < ex.size(); ++b) {
            if (ex[a] == ex[b]) throw ValidationError(where + "routed experts are not distinct");
          }
        }
      }
    }
  }
}

namespace {

// Sparse per-layer accumulator: token id -> expert counts.
class CountAccumulator {
 public:
  CountAccumulator(std::uint32_t layers, std::uint32_t num_experts) : num_experts_(num_experts), rows_(layers) {}

  void add(std::uint32_t layer, std::uint32_t token, std::uint32_t expert) {
    auto& row = rows_[layer][token];
    if (row.empty()) row.assign(num_experts_, 0);
    row[expert] += 1;
  }

  std::vector<TokenExpertMatrix> finish() const {
    std::vector<TokenExpertMatrix> out;
    for (std::uint32_t l = 0; l < rows_.size(); ++l) {
      std::vector<std::uint32_t> ids;
      std::vector<std::int64_t> counts;
      for (const auto& [tok, row] : rows_[l]) {
        ids.push_back(tok);
        for (auto c : row) {
          if (c > std::numeric_limits<std::uint32_t>::max()) {
            throw ValidationError("activation count overflows 32 bits for token " + std::to_string(tok));
          }
          counts.push_back(c);
        }
      }
      out.push_back(TokenExpertMatrix::from_counts(l, num_experts_, std::move(ids), std::move(counts)));
    }
    return out;
  }

 private:
  std::uint32_t num_experts_;
  std::vector<std::map<std::uint32_t, std::vector<std::int64_t>>> rows_;
};

}  // namespace

std::vector<TokenExpertMatrix> build_matrices(const RequestTrace& trace, std::uint32_t num_experts) {
  CountAccumulator acc(trace.layers, num_experts);
  for (const auto& r : trace.requests) {
    if (r.routed.empty()) continue;
    for (std::size_t pos = 0; pos < r.tokens.size(); ++pos) {
      for (std::uint32_t l = 0; l < trace.layers; ++l) {
        for (auto e : trace.experts(r, pos, l)) acc.add(l, r.tokens[pos], e);
      }
    }
  }
  return acc.finish();
}

Profile ingest_profile(std::istream& in, const Topology& topo) {
  topo.validate();
  struct Slot {
    std::uint32_t token = 0;
    std::vector<std::uint32_t> experts;  // layers * k, kNoExpert when missing
  };
  std::map<std::uint32_t, std::map<std::uint32_t, Slot>> requests;
  CountAccumulator acc(topo.L, topo.N);

  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw ValidationError("trace line " + std::to_string(line_no) + ": " + why);
  };
  auto as_u32 = [&](const nlohmann::json& rec, const char* key) -> std::uint32_t {
    const auto it = rec.find(key);
    if (it == rec.end()) fail(std::string("missing field '") + key + "'");
    if (!it->is_number_integer()) fail(std::string("field '") + key + "' is not an integer");
    const auto v = it->get<std::int64_t>();
    if (v < 0 || v > std::numeric_limits<std::uint32_t>::max()) fail(std::string("field '") + key + "' out of range");
    return static_cast<std::uint32_t>(v);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!rec.is_object()) fail("record is not an object");
    const auto req = as_u32(rec, "req");
    const auto pos = as_u32(rec, "pos");
    const auto token = as_u32(rec, "token");
    const auto layer = as_u32(rec, "layer");
    if (token >= topo.vocab) fail("token id " + std::to_string(token) + " >= vocab " + std::to_string(topo.vocab));
    if (layer >= topo.L) fail("layer index " + std::to_string(layer) + " >= L " + std::to_string(topo.L));
    const auto ex_it = rec.find("experts");
    if (ex_it == rec.end() || !ex_it->is_array()) fail("missing expert list");
    if (ex_it->size() != topo.k) fail("expected " + std::to_string(topo.k) + " experts");
    std::vector<std::uint32_t> experts;
    for (const auto& v : *ex_it) {
      if (!v.is_number_integer()) fail("expert index is not an integer");
      const auto e = v.get<std::int64_t>();
      if (e < 0 || e >= topo.N) fail("expert index " + std::to_string(e) + " >= N " + std::to_string(topo.N));
      if (std::find(experts.begin(), experts.end(), e) != experts.end()) fail("duplicate expert in record");
      experts.push_back(static_cast<std::uint32_t>(e));
    }

    auto [it, fresh] = requests[req].try_emplace(pos);
    Slot& slot = it->second;
    if (fresh) {
      slot.token = token;
      slot.experts.assign(static_cast<std::size_t>(topo.L) * topo.k, kNoExpert);
    } else if (slot.token != token) {
      fail("position " + std::to_string(pos) + " of request " + std::to_string(req) + " already holds another token");
    }
    auto dst = slot.experts.begin() + static_cast<std::ptrdiff_t>(layer) * topo.k;
    if (*dst != kNoExpert) fail("duplicate record for request/position/layer");
    std::copy(experts.begin(), experts.end(), dst);
    for (auto e : experts) acc.add(layer, token, e);
  }

  Profile profile;
  profile.layers = acc.finish();
  profile.trace.layers = topo.L;
  profile.trace.top_k = topo.k;
  for (auto& [id, slots] : requests) {
    Request r;
    r.id = id;
    bool complete = true;
    for (auto& [pos, slot] : slots) {
      r.tokens.push_back(slot.token);
      complete = complete && std::find(slot.experts.begin(), slot.experts.end(), kNoExpert) == slot.experts.end();
      r.routed.insert(r.routed.end(), slot.experts.begin(), slot.experts.end());
    }
    if (!complete) r.routed.clear();
    profile.trace.requests.push_back(std::move(r));
  }
  return profile;
}

Profile ingest_profile(const std::filesystem::path& path, const Topology& topo) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace " + path.string());
  return ingest_profile(in, topo);
}

void write_trace_jsonl(std::ostream& out, const RequestTrace& trace) {
  for (const auto& r : trace.requests) {
    if (r.routed.empty()) continue;
    for (std::size_t pos = 0; pos < r.tokens.size(); ++pos) {
      for (std::size_t l = 0; l < trace.layers; ++l) {
        out << "{\"req\":" << r.id << ",\"pos\":" << pos << ",\"token\":" << r.tokens[pos] << ",\"layer\":" << l
            << ",\"experts\":[";
        const auto ex = trace.experts(r, pos, l);
        for (std::size_t i = 0; i < ex.size(); ++i) out << (i ? "," : "") << ex[i];
        out << "]}\n";
      }
    }
  }
}

std::pair<RequestTrace, RequestTrace> split_by_request(const RequestTrace& trace, double fraction,
                                                       std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("split fraction must lie in [0,1]");
  std::vector<std::size_t> order(trace.requests.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(stream_seed(seed, 0x5117));
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_first = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  std::vector<bool> first(order.size(), false);
  for (std::size_t i = 0; i < n_first; ++i) first[order[i]] = true;

  std::pair<RequestTrace, RequestTrace> out;
  out.first.layers = out.second.layers = trace.layers;
  out.first.top_k = out.second.top_k = trace.top_k;
  for (std::size_t i = 0; i < trace.requests.size(); ++i) {
    (first[i] ? out.first : out.second).requests.push_back(trace.requests[i]);
  }
  return out;
}

double EmbeddingTable::norm(std::size_t token) const {
  double s = 0.0;
  for (float v : row(token)) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

std::vector<std::uint32_t> validate_embeddings(const EmbeddingTable& table) {
  if (table.dim == 0) throw ValidationError("embedding dimension is zero");
  if (table.vectors.size() % table.dim != 0) throw ValidationError("embedding payload is not vocab x dim");
  std::vector<std::uint32_t> zero_rows;
  for (std::size_t t = 0; t < table.vocab(); ++t) {
    bool zero = true;
    for (float v : table.row(t)) {
      if (std::isnan(v)) throw ValidationError("embedding row " + std::to_string(t) + " contains NaN");
      zero = zero && v == 0.0f;
    }
    if (zero) zero_rows.push_back(static_cast<std::uint32_t>(t));
  }
  return zero_rows;
}

namespace {

constexpr char kEmbeddingMagic[4] = {'M', 'S', 'E', 'M'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ValidationError("truncated embedding file");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embeddings " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  EmbeddingTable table;
  if (in && std::memcmp(magic, kEmbeddingMagic, 4) == 0) {
    const auto vocab = get_u32(in);
    table.dim = get_u32(in);
    table.vectors.resize(static_cast<std::size_t>(vocab) * table.dim);
    for (auto& v : table.vectors) {
      const std::uint32_t bits = get_u32(in);
      std::memcpy(&v, &bits, sizeof v);
    }
  } else {
    in.clear();
    in.seekg(0);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty embedding file");
    std::uint32_t vocab = 0;
    char comma = 0;
    std::istringstream header(line);
    if (!(header >> vocab >> comma >> table.dim) || comma != ',') {
      throw ValidationError("embedding CSV header must be 'vocab,dim'");
    }
    table.vectors.reserve(static_cast<std::size_t>(vocab) * table.dim);
    for (std::uint32_t t = 0; t < vocab; ++t) {
      if (!std::getline(in, line)) throw ValidationError("embedding CSV has fewer rows than vocab");
      std::istringstream row(line);
      std::string cell;
      std::uint32_t cols = 0;
      while (std::getline(row, cell, ',')) {
        try {
          table.vectors.push_back(std::stof(cell));
        } catch (...) {
          throw ValidationError("embedding CSV row " + std::to_string(t) + " has a non-numeric cell");
        }
        ++cols;
      }
      if (cols != table.dim) throw ValidationError("embedding CSV row " + std::to_string(t) + " has wrong width");
    }
  }
  validate_embeddings(table);
  return table;
}

void write_embeddings_csv(std::ostream& out, const EmbeddingTable& table) {
  out << table.vocab() << "," << table.dim << "\n";
  char buf[32];
  for (std::size_t t = 0; t < table.vocab(); ++t) {
    const auto r = table.row(t);
    for (std::size_t d = 0; d < r.size(); ++d) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r[d]));
      out << (d ? "," : "") << buf;
    }
    out << "\n";
  }
}

void write_embeddings_binary(std::ostream& out, const EmbeddingTable& table) {
  out.write(kEmbeddingMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(table.vocab()));
  put_u32(out, table.dim);
  for (float v : table.vectors) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof v);
    put_u32(out, bits);
  }
}

PlantedProfile synthesize_planted_profile(const Topology& topo, const PlantedOptions& opts) {
  topo.validate();
  const std::uint32_t E = topo.E;
  const std::uint32_t block = topo.experts_per_cluster();
  const std::uint32_t m = opts.tokens_per_cluster;
  if (topo.k > block) throw ValidationError("planted profile requires k <= N/E");
  if (m == 0 || static_cast<std::uint64_t>(m) * E > topo.vocab) {
    throw ValidationError("planted profile requires 1 <= m and m*E <= vocab");
  }
  if (!(opts.noise >= 0.0 && opts.noise < 1.0)) throw ValidationError("noise must lie in [0,1)");
  if (opts.occurrences_per_token == 0) throw ValidationError("occurrences_per_token must be >= 1");

  PlantedProfile out;
  const std::uint32_t t = m * E;

  // Token ids: a random subset of the vocabulary so ids carry no cluster information.
  {
    Rng rng(stream_seed(opts.seed, 1));
    std::vector<std::uint32_t> vocab_ids(topo.vocab);
    std::iota(vocab_ids.begin(), vocab_ids.end(), 0u);
    for (std::uint32_t i = 0; i < t; ++i) {
      std::swap(vocab_ids[i], vocab_ids[i + rng.below(topo.vocab - i)]);
    }
    std::vector<std::pair<std::uint32_t, std::uint32_t>> chosen;
    for (std::uint32_t i = 0; i < t; ++i) chosen.emplace_back(vocab_ids[i], i / m);
    std::sort(chosen.begin(), chosen.end());
    for (auto [id, c] : chosen) {
      out.token_ids.push_back(id);
      out.token_cluster.push_back(c);
    }
  }

  // Expert blocks and each token's within-block preference order, per layer.
  std::vector<std::vector<std::vector<std::uint32_t>>> members(topo.L, std::vector<std::vector<std::uint32_t>>(E));
  std::vector<std::vector<std::vector<std::uint32_t>>> preferred(topo.L, std::vector<std::vector<std::uint32_t>>(t));
  {
    Rng rng(stream_seed(opts.seed, 2));
    out.expert_block.assign(topo.L, std::vector<std::uint32_t>(topo.N));
    for (std::uint32_t l = 0; l < topo.L; ++l) {
      std::vector<std::uint32_t> perm(topo.N);
      std::iota(perm.begin(), perm.end(), 0u);
      rng.shuffle(std::span<std::uint32_t>(perm));
      for (std::uint32_t i = 0; i < topo.N; ++i) {
        out.expert_block[l][perm[i]] = i / block;
        members[l][i / block].push_back(perm[i]);
      }
      for (auto& blk : members[l]) std::sort(blk.begin(), blk.end());
      for (std::uint32_t j = 0; j < t; ++j) {
        preferred[l][j] = members[l][out.token_cluster[j]];
        rng.shuffle(std::span<std::uint32_t>(preferred[l][j]));
      }
    }
  }
  std::vector<double> rank_weight(block);
  for (std::uint32_t r = 0; r < block; ++r) rank_weight[r] = std::pow(static_cast<double>(r + 1), -opts.skew);

  // Occurrence stream chunked into requests of S_seq tokens.
  std::vector<std::vector<std::uint32_t>> request_rows;  // token rows per request
  {
    Rng rng(stream_seed(opts.seed, 3));
    auto chunk = [&](std::vector<std::uint32_t>& rows, std::uint32_t cluster) {
      rng.shuffle(std::span<std::uint32_t>(rows));
      for (std::size_t b = 0; b < rows.size(); b += topo.S_seq) {
        const auto e = std::min(rows.size(), b + topo.S_seq);
        request_rows.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(b),
                                  rows.begin() + static_cast<std::ptrdiff_t>(e));
        out.request_cluster.push_back(cluster);
      }
    };
    if (opts.pure_requests) {
      for (std::uint32_t c = 0; c < E; ++c) {
        std::vector<std::uint32_t> rows;
        for (std::uint32_t j = 0; j < t; ++j) {
          if (out.token_cluster[j] == c) rows.insert(rows.end(), opts.occurrences_per_token, j);
        }
        chunk(rows, c);
      }
      std::vector<std::size_t> order(request_rows.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(std::span<std::size_t>(order));
      std::vector<std::vector<std::uint32_t>> shuffled;
      std::vector<std::uint32_t> clusters;
      for (auto i : order) {
        shuffled.push_back(std::move(request_rows[i]));
        clusters.push_back(out.request_cluster[i]);
      }
      request_rows = std::move(shuffled);
      out.request_cluster = std::move(clusters);
    } else {
      std::vector<std::uint32_t> rows;
      for (std::uint32_t j = 0; j < t; ++j) rows.insert(rows.end(), opts.occurrences_per_token, j);
      chunk(rows, 0);
      std::fill(out.request_cluster.begin(), out.request_cluster.end(), 0u);
    }
  }

  // Routing.
  RequestTrace& trace = out.profile.trace;
  trace.layers = topo.L;
  trace.top_k = topo.k;
  Rng rng(stream_seed(opts.seed, 4));
  std::vector<double> weights;
  std::vector<std::uint32_t> candidates;
  for (std::size_t r = 0; r < request_rows.size(); ++r) {
    Request req;
    req.id = static_cast<std::uint32_t>(r);
    for (auto j : request_rows[r]) {
      req.tokens.push_back(out.token_ids[j]);
      const std::uint32_t own = out.token_cluster[j];
      for (std::uint32_t l = 0; l < topo.L; ++l) {
        std::vector<std::uint32_t> picked;
        for (std::uint32_t slot = 0; slot < topo.k; ++slot) {
          std::uint32_t blk = own;
          if (E > 1 && rng.bernoulli(opts.noise)) {
            blk = static_cast<std::uint32_t>(rng.below(E - 1));
            if (blk >= own) ++blk;
          }
          candidates.clear();
          weights.clear();
          if (blk == own) {
            for (std::uint32_t rank = 0; rank < block; ++rank) {
              const auto e = preferred[l][j][rank];
              if (std::find(picked.begin(), picked.end(), e) != picked.end()) continue;
              candidates.push_back(e);
              weights.push_back(rank_weight[rank]);
            }
          } else {
            for (auto e : members[l][blk]) {
              if (std::find(picked.begin(), picked.end(), e) != picked.end()) continue;
              candidates.push_back(e);
              weights.push_back(1.0);
            }
          }
          picked.push_back(candidates[rng.categorical(weights)]);
        }
        req.routed.insert(req.routed.end(), picked.begin(), picked.end());
      }
    }
    trace.requests.push_back(std::move(req));
  }

  // The routed buffer above is laid out [pos][layer][k] because layers are
  // generated inside the position loop, matching RequestTrace::experts.
  out.profile.layers = build_matrices(trace, topo.N);

  if (opts.embedding_dim > 0) {
    Rng erng(stream_seed(opts.seed, 5));
    EmbeddingTable emb;
    emb.dim = opts.embedding_dim;
    emb.vectors.assign(static_cast<std::size_t>(topo.vocab) * emb.dim, 0.0f);
    std::vector<std::int64_t> cluster_of(topo.vocab, -1);
    for (std::uint32_t j = 0; j < t; ++j) cluster_of[out.token_ids[j]] = out.token_cluster[j];
    for (std::uint32_t tok = 0; tok < topo.vocab; ++tok) {
      const auto c = cluster_of[tok] >= 0 ? static_cast<std::uint32_t>(cluster_of[tok])
                                          : static_cast<std::uint32_t>(erng.below(E));
      auto* row = emb.vectors.data() + static_cast<std::size_t>(tok) * emb.dim;
      for (std::uint32_t d = 0; d < emb.dim; ++d) row[d] = static_cast<float>(0.1 * erng.normal());
      row[c % emb.dim] += 1.0f;
    }
    out.embeddings = std::move(emb);
  }
  return out;
}

}  // namespace moesched
