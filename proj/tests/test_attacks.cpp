// Copyright 2026 The PrivateXR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "privatexr/attacks.hpp"
#include "privatexr/privatizer.hpp"

namespace privatexr {
namespace {

Dataset synth(double gamma, std::uint64_t seed, int users = 20) {
  SynthConfig cfg;
  cfg.users = users;
  cfg.user_signature_strength = gamma;
  cfg.seed = seed;
  return normalize(synth_generate(cfg));
}

MiaConfig small_mia(int shadows, int size) {
  MiaConfig c;
  c.shadow_count = shadows;
  c.shadow_train_size = size;
  c.shadow_spec = ModelSpec::mlp(12, 4, {32, 32});
  c.shadow_train.epochs = 60;
  c.shadow_train.batch_size = 32;
  c.shadow_train.patience = 0;
  c.attack_train.epochs = 20;
  c.seed = 3;
  return c;
}

TEST(ShadowEnsemble, DisjointHalvesOfRequestedSize) {
  auto ds = synth(1.5, 1);
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(5);
  detail::seeded_shuffle(idx, rng);
  auto pool = ds.subset({idx.begin(), idx.begin() + 400});
  auto heldout = ds.subset({idx.begin() + 400, idx.end()});
  auto cfg = small_mia(2, 150);
  auto shadows = train_shadow_ensemble(pool, cfg);
  ASSERT_EQ(shadows.size(), 2u);
  for (const auto& s : shadows) {
    EXPECT_EQ(s.members.size(), 150u);
    EXPECT_EQ(s.nonmembers.size(), 150u);
    std::set<std::size_t> m(s.members.begin(), s.members.end());
    for (auto i : s.nonmembers) EXPECT_EQ(m.count(i), 0u);
  }
  EXPECT_NE(shadows[0].members, shadows[1].members);

  // Overfitting gap: each shadow does better on its members than on held-out frames.
  for (const auto& s : shadows) {
    auto mem = pool.subset(s.members);
    const double in = mean_accuracy(predict_classes(s.model, features_tensor(mem)), mem.labels());
    const double out =
        mean_accuracy(predict_classes(s.model, features_tensor(heldout)), heldout.labels());
    EXPECT_GT(in, out);
  }

  cfg.shadow_train_size = 201;
  EXPECT_THROW(train_shadow_ensemble(pool, cfg), Error);
  cfg.shadow_train_size = 10;
  cfg.shadow_count = 1;
  EXPECT_THROW(train_shadow_ensemble(pool, cfg), Error);
}

TEST(AttackDataset, LayoutAndBalance) {
  auto ds = synth(1.5, 2);
  auto pool = ds.subset([] {
    std::vector<std::size_t> idx(120);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }());
  auto shadows = train_shadow_ensemble(pool, small_mia(3, 40));
  auto data = build_attack_dataset(shadows, pool);
  ASSERT_EQ(data.features.size(), 3u * 80);
  for (std::size_t s = 0; s < 3; ++s) {
    int members = 0;
    for (std::size_t i = 0; i < 80; ++i) members += data.member[s * 80 + i];
    EXPECT_EQ(members, 40);
  }
  for (const auto& row : data.features) {
    ASSERT_EQ(row.size(), 4u + 1 + 4);
    for (std::size_t k = 1; k < 4; ++k) EXPECT_GE(row[k - 1], row[k]);
    EXPECT_NEAR(row[0] + row[1] + row[2] + row[3], 1.0, 1e-9);
    EXPECT_GE(row[4], 0.0);
    EXPECT_EQ(row[5] + row[6] + row[7] + row[8], 1.0);
  }
}

TEST(Mia, OverfitTargetIsDetectable) {
  auto ds = synth(1.5, 4);
  auto [train_split, test_split] = split(ds, {0.7, 1, SplitGranularity::kFrame});
  std::vector<std::size_t> first(100), second(100), rest;
  std::iota(first.begin(), first.end(), 0);
  std::iota(second.begin(), second.end(), 0);
  for (std::size_t i = 100; i < test_split.size(); ++i) rest.push_back(i);
  auto members = train_split.subset(first);
  auto cfg = small_mia(4, 100);
  cfg.shadow_spec = ModelSpec::mlp(12, 4, {64, 64});
  cfg.shadow_train.epochs = 300;
  cfg.attack_train.epochs = 150;
  auto target = train(members, {}, cfg.shadow_spec, cfg.shadow_train);
  auto r = run_mia(target, members, test_split.subset(second), test_split.subset(rest), cfg);
  EXPECT_GT(r.auc, 0.55);
  EXPECT_NEAR(r.auc, r.auc_sweep, 1e-10);
  EXPECT_EQ(r.member_scores.size(), 100u);
}

TEST(Rbfn, ProbabilitiesSumToOneAndSingleUser) {
  auto ds = synth(2.0, 5, 5);
  auto model = train_rbfn(ds, {});
  EXPECT_GE(model.centers.size(), model.user_ids.size());
  for (std::size_t i = 0; i < 50; ++i) {
    auto p = model.predict_proba(ds.frames[i].features);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
  }
  Dataset one = empty_like(ds);
  for (const auto& f : ds.frames)
    if (f.user_id == ds.frames.front().user_id) one.frames.push_back(f);
  EXPECT_EQ(identification_rate(train_rbfn(one, {}), one), 1.0);

  Dataset tiny = empty_like(ds);
  tiny.frames.assign(ds.frames.begin(), ds.frames.begin() + 2);
  EXPECT_THROW(train_rbfn(tiny, {}), Error);
}

TEST(Rda, DuplicatingFramesKeepsRateAndRunsAreDeterministic) {
  auto ds = synth(2.0, 7, 8);
  auto [train_ds, test_ds] = split(ds, {0.7, 2, SplitGranularity::kFrame});
  auto model = train_rbfn(train_ds, {});
  Dataset doubled = test_ds;
  doubled.frames.insert(doubled.frames.end(), test_ds.frames.begin(), test_ds.frames.end());
  EXPECT_EQ(identification_rate(model, doubled), identification_rate(model, test_ds));

  RdaConfig cfg;
  cfg.runs = 4;
  cfg.seed = 9;
  auto a = run_rda(ds, cfg), b = run_rda(ds, cfg);
  EXPECT_EQ(a.per_run, b.per_run);
  for (double r : a.per_run) {
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
}

TEST(Rda, IdentitySignalAndSelectivePrivatization) {
  auto ds = synth(2.0, 11);
  RdaConfig cfg;
  cfg.runs = 30;
  cfg.seed = 1;
  const auto clean = run_rda(ds, cfg);
  EXPECT_GE(clean.rate, 0.25);

  FeatureDpSpec spec;
  spec.mode = DpMode::kSelective;
  spec.selected = {0, 1, 2};
  spec.level = "high";
  const FeaturePrivatizer p(spec, ds.feature_count());
  const auto noisy = run_rda(ds, cfg, [&](const Dataset& test, int run) {
    Dataset out = test;
    Rng rng = make_rng(derive_seed(77, static_cast<std::uint64_t>(run)));
    for (auto& f : out.frames) p.apply(f.features, rng);
    return out;
  });
  EXPECT_LE(noisy.rate, 0.75 * clean.rate);
}

TEST(Rda, NoIdentitySignalIsChance) {
  auto ds = synth(0.0, 12);
  RdaConfig cfg;
  cfg.runs = 30;
  cfg.seed = 2;
  const auto r = run_rda(ds, cfg);
  double var = 0.0;
  for (double v : r.per_run) var += (v - r.rate) * (v - r.rate);
  const double se = std::sqrt(var / (r.per_run.size() - 1) / r.per_run.size());
  EXPECT_LE(std::abs(r.rate - 1.0 / 20), 3 * std::max(se, 1.0 / 20 / std::sqrt(30.0 * 20)));
}

}  // namespace
}  // namespace privatexr
