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

#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "moesched/error.hpp"
#include "moesched/scheduler.hpp"

namespace moesched {
namespace {

using testing::TempDir;

DeviceNGramTable empty_ngram(std::uint32_t E, std::uint32_t n) {
  DeviceNGramTable t;
  t.n = n;
  t.clusters = E;
  std::size_t rows = 1;
  for (std::uint32_t i = 0; i < n; ++i) rows *= E;
  t.probs.assign(rows * E, 0.0);
  t.best.assign(rows, 0);
  t.observations.assign(rows, 0);
  return t;
}

// vocab 8, E 2, one layer: token i -> cluster i % 2 with confidence 0.6.
LookupBundle small_bundle(std::uint32_t n = 1) {
  LookupBundle b;
  b.vocab = 8;
  b.clusters = 2;
  b.layers = 1;
  b.num_experts = 4;
  TokenDeviceTable t;
  t.clusters = 2;
  for (std::uint32_t i = 0; i < 8; ++i) {
    t.labels.push_back(static_cast<std::uint16_t>(i % 2));
    t.confidence.push_back(0.6f);
    t.provenance.push_back(Provenance::kProfiled);
  }
  b.token_tables = {t};
  b.expert_tables = {{0, 1, 0, 1}};
  b.ngram = empty_ngram(2, n);
  return b;
}

TEST(Lookup, TokenTableWithoutHistory) {
  const auto b = small_bundle();
  const std::vector<std::uint32_t> batch{0, 1, 2, 7};
  EXPECT_EQ(lookup_device(batch, {}, b, 0), (std::vector<std::uint32_t>{0, 1, 0, 1}));
}

TEST(Lookup, OutOfVocabularyUsesModulo) {
  const auto b = small_bundle();
  const std::vector<std::uint32_t> batch{9, 100};
  EXPECT_EQ(lookup_device(batch, {}, b, 0), (std::vector<std::uint32_t>{1, 0}));
}

TEST(Lookup, NGramWinsOnlyWhenStrictlyMoreConfident) {
  auto b = small_bundle();
  // History device 1 predicts device 0.
  b.ngram.probs = {0.5, 0.5, 0.7, 0.3};
  b.ngram.observations = {1, 1};
  b.ngram.refresh_best();
  const std::vector<std::uint32_t> batch{1, 1};
  const std::vector<std::uint32_t> history{0, 1};
  // Row 0 confidence 0.5 < 0.6 keeps the token label; row 1 has 0.7 > 0.6.
  EXPECT_EQ(lookup_device(batch, history, b, 0), (std::vector<std::uint32_t>{1, 0}));
  b.ngram.probs = {0.4, 0.6, 0.6, 0.4};
  b.ngram.refresh_best();
  EXPECT_EQ(lookup_device(batch, history, b, 0), (std::vector<std::uint32_t>{1, 1}));
}

TEST(Lookup, UnobservedRowsNeverWin) {
  auto b = small_bundle();
  b.ngram.probs = {0.0, 0.0, 0.0, 0.0};
  const std::vector<std::uint32_t> batch{3};
  const std::vector<std::uint32_t> history{0};
  EXPECT_EQ(lookup_device(batch, history, b, 0), (std::vector<std::uint32_t>{1}));
}

TEST(Lookup, Errors) {
  const auto b = small_bundle(2);
  const std::vector<std::uint32_t> batch{1, 2};
  const std::vector<std::uint32_t> history{0, 1, 1};
  EXPECT_THROW(lookup_device(batch, history, b, 0), ValidationError);
  EXPECT_THROW(lookup_device(batch, {}, b, 1), ValidationError);
}

TEST(Shuffle, GroupsArePaddedToLargest) {
  const std::vector<std::uint32_t> dev{1, 0, 1, 1};
  const auto idx = make_shuffle_indices(dev, 2);
  EXPECT_EQ(idx.group_size, 3u);
  EXPECT_EQ(idx.perm, (std::vector<std::uint32_t>{1, 4, 5, 0, 2, 3}));
  EXPECT_EQ(idx.pad_mask, (std::vector<bool>{false, true, true, false, false, false}));
  EXPECT_EQ(idx.device_of_slot(3), 1u);
}

TEST(Shuffle, AllToOneDevice) {
  const std::vector<std::uint32_t> dev(5, 0);
  const auto idx = make_shuffle_indices(dev, 4);
  EXPECT_EQ(idx.group_size, 5u);
  EXPECT_EQ(idx.perm.size(), 20u);
  EXPECT_EQ(std::count(idx.pad_mask.begin(), idx.pad_mask.end(), true), 15);
}

TEST(Shuffle, EvenSplitNeedsNoPadding) {
  const std::vector<std::uint32_t> dev{0, 1, 2, 3, 3, 2, 1, 0};
  const auto idx = make_shuffle_indices(dev, 4);
  EXPECT_EQ(idx.group_size, 2u);
  EXPECT_EQ(std::count(idx.pad_mask.begin(), idx.pad_mask.end(), true), 0);
}

TEST(Shuffle, Errors) {
  const std::vector<std::uint32_t> dev{0, 2};
  EXPECT_THROW(make_shuffle_indices(dev, 2), ValidationError);
  EXPECT_THROW(make_shuffle_indices(dev, 0), ValidationError);
  const auto idx = make_shuffle_indices(std::vector<std::uint32_t>{0, 1}, 2);
  EXPECT_THROW(apply_shuffle<int>(std::vector<int>{1}, idx, 0), ValidationError);
  EXPECT_THROW(resume<int>(std::vector<int>{1}, idx), ValidationError);
}

TEST(Rebatch, RoundTripRestoresOrder) {
  const auto b = small_bundle();
  const std::vector<std::uint32_t> batch{5, 2, 7, 7, 0, 3, 1};
  const auto rb = rebatch_tokens(batch, {}, b, 0, 2);
  EXPECT_EQ(rb.tokens, (std::vector<std::uint32_t>{2, 0, kPadToken, kPadToken, kPadToken, 5, 7, 7, 3, 1}));
  EXPECT_EQ(resume_tokens(rb.tokens, rb.indices), batch);
  EXPECT_THROW(rebatch_tokens(std::vector<std::uint32_t>{}, {}, b, 0, 2), ValidationError);
}

TEST(Rebatch, LabelsFoldOntoFewerDevices) {
  auto b = small_bundle();
  const std::vector<std::uint32_t> batch{0, 1, 2, 3};
  const auto rb = rebatch_tokens(batch, {}, b, 0, 1);
  EXPECT_EQ(rb.tokens, batch);
}

TEST(RequestScheduler, PrefersAffinityThenRotates) {
  auto t = small_bundle().token_tables[0];
  RequestScheduler s(2);
  const std::vector<std::uint32_t> odd{1, 3, 5};
  EXPECT_EQ(s.schedule(odd, t), 1u);
  EXPECT_EQ(s.open_devices(), (std::vector<char>{1, 0}));
  EXPECT_EQ(s.schedule(odd, t), 0u);
  EXPECT_EQ(s.open_devices(), (std::vector<char>{1, 1}));
  const std::vector<std::uint32_t> tie{0, 1};
  EXPECT_EQ(s.schedule(tie, t), 0u);
  EXPECT_THROW(RequestScheduler(0), ValidationError);
}

TEST(RequestScheduler, UnknownTokensUseModulo) {
  const auto t = small_bundle().token_tables[0];
  RequestScheduler s(2);
  const std::vector<std::uint32_t> req{101, 103, 4};
  EXPECT_EQ(s.schedule(req, t), 1u);
}

TEST(GatePermutation, ContiguousClusters) {
  const std::vector<std::uint32_t> cl{1, 0, 1, 0};
  const auto g = make_gate_permutation(cl, 2);
  EXPECT_EQ(g.expert_perm, (std::vector<std::uint32_t>{1, 3, 0, 2}));
  EXPECT_EQ(g.inverse, (std::vector<std::uint32_t>{2, 0, 3, 1}));
  EXPECT_THROW(make_gate_permutation(std::vector<std::uint32_t>{0, 0, 0, 1}, 2), ValidationError);
  EXPECT_THROW(make_gate_permutation(std::vector<std::uint32_t>{0, 2}, 2), ValidationError);
  EXPECT_THROW(make_gate_permutation(std::vector<std::uint32_t>{0, 1, 0}, 2), ValidationError);
}

TEST(GatePermutation, ShuffledGateSelectsSameExperts) {
  const std::vector<std::uint32_t> cl{1, 0, 1, 0};
  const std::vector<std::string> payload{"e0", "e1", "e2", "e3"};
  const std::vector<float> column{0.1f, 0.9f, 0.5f, 0.3f};
  const auto sh = apply_expert_shuffle<std::string, float>(payload, column, cl, 2);
  EXPECT_EQ(sh.payloads, (std::vector<std::string>{"e1", "e3", "e0", "e2"}));
  std::set<std::string> before, after;
  for (auto e : top_k_experts(column, 2)) before.insert(payload[e]);
  for (auto s : top_k_experts(sh.gate_columns, 2)) after.insert(sh.payloads[s]);
  EXPECT_EQ(before, after);
}

TEST(TopK, DescendingWithLowIndexTies) {
  const std::vector<float> logits{1.0f, 3.0f, 3.0f, 2.0f};
  EXPECT_EQ(top_k_experts(logits, 3), (std::vector<std::uint32_t>{1, 2, 3}));
  EXPECT_EQ(top_k_experts(logits, 9).size(), 4u);
}

TEST(Bundle, RoundTripThroughFile) {
  auto b = small_bundle(2);
  b.ngram.probs = {0.25, 0.75, 1, 0, 0, 0, 0.5, 0.5};
  b.ngram.observations = {3, 1, 0, 2};
  b.ngram.refresh_best();
  b.token_tables[0].confidence[3] = 0.125f;
  TempDir dir("bundle");
  save_bundle(dir.path() / "b.mslb", b);
  const auto r = load_bundle(dir.path() / "b.mslb");
  EXPECT_EQ(r.vocab, 8u);
  EXPECT_EQ(r.num_experts, 4u);
  EXPECT_EQ(r.token_tables[0].labels, b.token_tables[0].labels);
  EXPECT_EQ(r.token_tables[0].confidence, b.token_tables[0].confidence);
  EXPECT_EQ(r.expert_tables, b.expert_tables);
  EXPECT_EQ(r.ngram.probs, b.ngram.probs);
  EXPECT_EQ(r.ngram.best, b.ngram.best);
  EXPECT_FALSE(r.ngram.observed(2));
  EXPECT_TRUE(r.ngram.observed(3));
  const std::uint64_t expected = 4 + 6 * 4 + 8 * 2 + 8 * 4 + 8 * 4 + 4 * 2;
  EXPECT_EQ(std::filesystem::file_size(dir.path() / "b.mslb"), expected);
}

TEST(Bundle, ReadErrors) {
  std::stringstream bad("NOPE");
  EXPECT_THROW(read_bundle(bad), ValidationError);
  std::stringstream full;
  write_bundle(full, small_bundle());
  const std::string bytes = full.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_bundle(truncated), ValidationError);
  std::string version = bytes;
  version[4] = 9;
  std::stringstream vs(version);
  EXPECT_THROW(read_bundle(vs), ValidationError);
  EXPECT_THROW(load_bundle("/nonexistent/dir/x.mslb"), IoError);
}

TEST(Bundle, ValidateRejectsBadTables) {
  auto b = small_bundle();
  b.token_tables[0].labels[2] = 5;
  EXPECT_THROW(b.validate(), ValidationError);
  b = small_bundle();
  b.token_tables[0].confidence[0] = 1.5f;
  EXPECT_THROW(b.validate(), ValidationError);
  b = small_bundle();
  b.expert_tables[0].pop_back();
  EXPECT_THROW(b.validate(), ValidationError);
  b = small_bundle();
  b.ngram.probs.pop_back();
  EXPECT_THROW(b.validate(), ValidationError);
}

TEST(Memory, TokenTableEstimate) {
  const auto m = bundle_memory_bytes(102400, 60, 8, 2, 256);
  EXPECT_EQ(m.token_labels, 12'288'000u);
  EXPECT_NEAR(static_cast<double>(m.token_labels) / (1024.0 * 1024.0), 11.72, 0.005);
  EXPECT_EQ(bundle_memory_bytes(0, 60, 8, 2, 256).token_labels, 0u);
}

TEST(Memory, NGramAndExpertComponents) {
  const auto m = bundle_memory_bytes(10, 2, 4, 2, 16);
  EXPECT_EQ(m.ngram, 16u * (4 * 4 + 2));
  EXPECT_EQ(m.expert_labels, 2u * 16 * 2);
  EXPECT_EQ(m.token_confidences, 80u);
  EXPECT_EQ(m.total(), 40u + 80 + 288 + 64);
  EXPECT_EQ(bundle_memory_bytes(small_bundle(2)).ngram, 4u * 10);
}

}  // namespace
}  // namespace moesched
