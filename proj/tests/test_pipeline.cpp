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
#include <filesystem>

#include "json_schema.hpp"
#include "privatexr/pipeline.hpp"

namespace privatexr {
namespace {

using testing::load_json;
using testing::schema_errors;
using testing::source_dir;

// Small, fast configuration: 8 users, short training, few RDA runs.
ExperimentConfig quick_config(Condition c) {
  ExperimentConfig cfg;
  SynthConfig sc;
  sc.users = 8;
  sc.frames_per_user_stimulus = 60;
  sc.seed = 3;
  cfg.data.synth = sc;
  cfg.condition = c;
  cfg.target_train_size = 100;
  cfg.model = {{"arch", "mlp"}, {"hidden", {32, 32}}};
  cfg.train.epochs = 60;
  cfg.train.batch_size = 32;
  cfg.train.patience = 0;
  cfg.private_train.epochs = 10;
  cfg.mia.shadow_count = 2;
  cfg.mia.attack_epochs = 20;
  cfg.rda.runs = 3;
  cfg.attribution.samples = 32;
  cfg.bench.samples = 200;
  cfg.bench.repetitions = 3;
  cfg.seed = 11;
  return cfg;
}

TEST(Pipeline, ReportsAreSchemaValidForEveryCondition) {
  const auto schema = load_json(source_dir() / "schemas" / "report.schema.json");
  for (Condition c : {Condition::kNoPrivacy, Condition::kPdNpm, Condition::kNpdPm, Condition::kPdPm}) {
    auto cfg = quick_config(c);
    cfg.xai_selective = has_private_data(c);
    const auto j = run_pipeline(cfg).to_json();
    const auto errors = schema_errors(j, schema);
    EXPECT_TRUE(errors.empty()) << condition_name(c) << ": " << nlohmann::json(errors).dump();
    EXPECT_EQ(j["condition"], condition_name(c));
    EXPECT_EQ(j.contains("epsilon_spent"), has_private_model(c));
    EXPECT_EQ(j["feature_dp"].is_null(), !has_private_data(c));
  }
}

TEST(Pipeline, SchemaRejectsBrokenReports) {
  const auto schema = load_json(source_dir() / "schemas" / "report.schema.json");
  auto j = run_pipeline(quick_config(Condition::kNoPrivacy)).to_json();
  j["balanced_accuracy"] = 1.5;
  j.erase("rda_rate");
  j["condition"] = "maybe";
  EXPECT_EQ(schema_errors(j, schema).size(), 3u);
}

TEST(Pipeline, RepeatedRunsMatchExceptWallClock) {
  auto cfg = quick_config(Condition::kPdPm);
  cfg.xai_selective = true;
  const auto a = run_pipeline(cfg).to_json();
  const auto b = run_pipeline(cfg).to_json();
  EXPECT_EQ(without_wall_clock(a), without_wall_clock(b));
  EXPECT_TRUE(a.contains("inference_ms_per_sample"));
  EXPECT_FALSE(without_wall_clock(a).contains("inference_ms_per_sample"));

  cfg.seed = 12;
  EXPECT_NE(without_wall_clock(run_pipeline(cfg).to_json()), without_wall_clock(a));
}

TEST(Pipeline, NoPrivacyOverfitRecipeLeaksMembership) {
  auto cfg = quick_config(Condition::kNoPrivacy);
  cfg.model = {{"arch", "mlp"}, {"hidden", {64, 64}}};
  cfg.train.epochs = 300;
  cfg.mia.shadow_count = 4;
  cfg.mia.attack_epochs = 150;
  cfg.rda.enabled = false;
  cfg.bench.enabled = false;
  const auto r = run_pipeline(cfg);
  EXPECT_FALSE(r.epsilon_spent.has_value());
  ASSERT_TRUE(r.mia_auc.has_value());
  EXPECT_GT(*r.mia_auc, 0.5);
  EXPECT_NEAR(*r.mia_auc, *r.mia_auc_sweep, 1e-10);
}

TEST(Pipeline, HighPrivacyLevelBoundsEpsilon) {
  auto cfg = quick_config(Condition::kPdPm);
  cfg.level = "high";
  cfg.mia.enabled = false;
  const auto r = run_pipeline(cfg);
  ASSERT_TRUE(r.epsilon_spent.has_value());
  EXPECT_LE(r.epsilon_spent->epsilon, 1.0);
  EXPECT_EQ(r.feature_dp["epsilon_total"].get<double>(), 1.0);
  EXPECT_EQ(r.feature_dp["mode"], "full");
}

TEST(Pipeline, SelectiveModeUsesTopQuarter) {
  auto cfg = quick_config(Condition::kPdNpm);
  cfg.xai_selective = true;
  cfg.mia.enabled = false;
  cfg.rda.enabled = false;
  const auto r = run_pipeline(cfg);
  EXPECT_EQ(r.selected_features.size(), 3u);
  EXPECT_EQ(r.feature_dp["mode"], "selective");
  EXPECT_EQ(r.feature_dp["selected"].size(), 3u);
  EXPECT_FALSE(r.importance.is_null());
}

TEST(Pipeline, ConfigErrorsAndStageLabels) {
  auto cfg = quick_config(Condition::kNpdPm);
  cfg.xai_selective = true;
  try {
    run_pipeline(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
  cfg = quick_config(Condition::kNoPrivacy);
  cfg.data.synth.reset();
  cfg.data.csv = "/nonexistent/frames.csv";
  try {
    run_pipeline(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.message().rfind("data: ", 0), 0u) << e.what();
  }
  EXPECT_THROW(ExperimentConfig::from_json({{"condition", "PD"}}), Error);
}

TEST(ExperimentConfigJson, EchoRoundTrips) {
  auto cfg = quick_config(Condition::kPdPm);
  cfg.xai_selective = true;
  const auto back = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
}

TEST(BenchInference, PositiveFiniteAndStable) {
  SynthConfig sc;
  sc.seed = 1;
  const auto ds = normalize(synth_generate(sc));
  TrainedModel m;
  m.spec = ModelSpec::mlp(12, 4, {64, 64});
  m.params = init_params(m.spec, 1);
  FeatureDpSpec off, full, sel;
  full.mode = DpMode::kFull;
  sel.mode = DpMode::kSelective;
  sel.selected = {0, 1, 2};
  const auto a = bench_inference(m, ds, {off, full, sel}, 5, 4000, 1);
  const auto b = bench_inference(m, ds, {off, full, sel}, 5, 4000, 2);
  ASSERT_EQ(a.ms_per_sample.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GT(a.ms_per_sample[i], 0.0);
    EXPECT_TRUE(std::isfinite(a.ms_per_sample[i]));
    EXPECT_EQ(a.repetitions_ms[i].size(), 5u);
    EXPECT_LT(std::abs(a.ms_per_sample[i] - b.ms_per_sample[i]),
              0.2 * std::max(a.ms_per_sample[i], b.ms_per_sample[i]));
  }
}

}  // namespace
}  // namespace privatexr
