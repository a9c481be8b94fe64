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

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "privatexr/attacks.hpp"
#include "privatexr/attribution.hpp"
#include "privatexr/common.hpp"
#include "privatexr/data.hpp"
#include "privatexr/metrics.hpp"
#include "privatexr/nn.hpp"
#include "privatexr/privatizer.hpp"
#include "privatexr/trainer.hpp"

#ifndef PRIVATEXR_GIT_REV
#define PRIVATEXR_GIT_REV "unknown"
#endif

namespace privatexr {

// PD: privatized data (input noise). PM: private model (DPSGD).
enum class Condition { kNoPrivacy, kPdNpm, kNpdPm, kPdPm };

inline std::string condition_name(Condition c) {
  switch (c) {
    case Condition::kNoPrivacy: return "no-privacy";
    case Condition::kPdNpm: return "PD+NPM";
    case Condition::kNpdPm: return "NPD+PM";
    case Condition::kPdPm: return "PD+PM";
  }
  return "?";
}

inline Condition parse_condition(const std::string& s) {
  if (s == "no-privacy") return Condition::kNoPrivacy;
  if (s == "PD+NPM") return Condition::kPdNpm;
  if (s == "NPD+PM") return Condition::kNpdPm;
  if (s == "PD+PM") return Condition::kPdPm;
  fail(ErrorKind::kConfig, "unknown condition \"" + s +
                               "\" (expected no-privacy, PD+NPM, NPD+PM or PD+PM)");
}

inline bool has_private_data(Condition c) { return c == Condition::kPdNpm || c == Condition::kPdPm; }
inline bool has_private_model(Condition c) { return c == Condition::kNpdPm || c == Condition::kPdPm; }

enum class NormalizeMode { kNone, kFull, kTrain };

inline NormalizeMode parse_normalize_mode(const std::string& s) {
  if (s == "none") return NormalizeMode::kNone;
  if (s == "full") return NormalizeMode::kFull;
  if (s == "train") return NormalizeMode::kTrain;
  fail(ErrorKind::kConfig, "unknown normalize mode \"" + s + "\"");
}

inline std::string normalize_mode_name(NormalizeMode m) {
  switch (m) {
    case NormalizeMode::kNone: return "none";
    case NormalizeMode::kFull: return "full";
    case NormalizeMode::kTrain: return "train";
  }
  return "?";
}

struct DataSource {
  std::optional<std::filesystem::path> csv;
  std::optional<SynthConfig> synth;
  // kFull: statistics from the whole dataset; kTrain: from the train split only.
  NormalizeMode normalize = NormalizeMode::kFull;

  Dataset load() const {
    require(csv.has_value() != synth.has_value(), ErrorKind::kConfig,
            "data needs exactly one of \"csv\" or \"synth\"");
    return csv ? load_csv(*csv) : synth_generate(*synth);
  }

  static DataSource from_json(const nlohmann::json& j) {
    DataSource d;
    if (j.contains("csv")) d.csv = j.at("csv").get<std::string>();
    if (j.contains("synth")) d.synth = SynthConfig::from_json(j.at("synth"));
    d.normalize = parse_normalize_mode(j.value("normalize", std::string("full")));
    return d;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"normalize", normalize_mode_name(normalize)}};
    if (csv) j["csv"] = csv->string();
    if (synth) j["synth"] = synth->to_json();
    return j;
  }
};

struct MiaSettings {
  bool enabled = true;
  int shadow_count = 4;
  int shadow_train_size = 0;  // 0: the target's training-set size
  int eval_size = 0;          // members and non-members scored; 0: target training-set size
  int attack_epochs = 60;
  std::vector<int> attack_hidden = {32};

  static MiaSettings from_json(const nlohmann::json& j) {
    MiaSettings m;
    m.enabled = j.value("enabled", m.enabled);
    m.shadow_count = j.value("shadow_count", m.shadow_count);
    m.shadow_train_size = j.value("shadow_train_size", m.shadow_train_size);
    m.eval_size = j.value("eval_size", m.eval_size);
    m.attack_epochs = j.value("attack_epochs", m.attack_epochs);
    m.attack_hidden = j.value("attack_hidden", m.attack_hidden);
    return m;
  }

  nlohmann::json to_json() const {
    return {{"enabled", enabled},           {"shadow_count", shadow_count},
            {"shadow_train_size", shadow_train_size}, {"eval_size", eval_size},
            {"attack_epochs", attack_epochs}, {"attack_hidden", attack_hidden}};
  }
};

struct RdaSettings {
  bool enabled = true;
  int runs = 30;
  RbfnConfig rbfn;

  static RdaSettings from_json(const nlohmann::json& j) {
    RdaSettings r;
    r.enabled = j.value("enabled", r.enabled);
    r.runs = j.value("runs", r.runs);
    r.rbfn.centers_per_user = j.value("centers_per_user", r.rbfn.centers_per_user);
    r.rbfn.ridge = j.value("ridge", r.rbfn.ridge);
    r.rbfn.kmeans_iterations = j.value("kmeans_iterations", r.rbfn.kmeans_iterations);
    return r;
  }

  nlohmann::json to_json() const {
    return {{"enabled", enabled},
            {"runs", runs},
            {"centers_per_user", rbfn.centers_per_user},
            {"ridge", rbfn.ridge},
            {"kmeans_iterations", rbfn.kmeans_iterations}};
  }
};

struct AttributionSettings {
  int samples = 512;  // capped at the training-set size
  bool sampled = false;
  int permutations = 200;

  static AttributionSettings from_json(const nlohmann::json& j) {
    AttributionSettings a;
    a.samples = j.value("samples", a.samples);
    a.sampled = j.value("sampled", a.sampled);
    a.permutations = j.value("permutations", a.permutations);
    return a;
  }

  nlohmann::json to_json() const {
    return {{"samples", samples}, {"sampled", sampled}, {"permutations", permutations}};
  }
};

struct BenchSettings {
  bool enabled = true;
  int samples = 1000;
  int repetitions = 5;

  static BenchSettings from_json(const nlohmann::json& j) {
    BenchSettings b;
    b.enabled = j.value("enabled", b.enabled);
    b.samples = j.value("samples", b.samples);
    b.repetitions = j.value("repetitions", b.repetitions);
    return b;
  }

  nlohmann::json to_json() const {
    return {{"enabled", enabled}, {"samples", samples}, {"repetitions", repetitions}};
  }
};

inline TrainConfig default_private_train() {
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 32;
  c.patience = 0;
  c.dp = DpTrainConfig{};
  return c;
}

struct ExperimentConfig {
  DataSource data;
  double train_fraction = 0.7;
  SplitGranularity granularity = SplitGranularity::kFrame;
  // Subsample of the train split the target actually sees; unset uses all of it.
  std::optional<int> target_train_size;
  // ModelSpec fields other than input_dim and class_count, which come from the data.
  nlohmann::json model = {{"arch", "mlp"}, {"hidden", {64, 64}}};
  TrainConfig train;                              // non-private recipe
  TrainConfig private_train = default_private_train();  // DPSGD recipe; target epsilon = level
  Condition condition = Condition::kNoPrivacy;
  bool xai_selective = false;
  std::string level = "high";
  std::map<std::string, double> levels = default_privacy_levels();
  double feature_delta = 1e-5;
  double clamp = 3.0;
  AttributionSettings attribution;
  MiaSettings mia;
  RdaSettings rda;
  BenchSettings bench;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> output_dir;

  void validate() const {
    require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::kConfig,
            "train_fraction must lie in (0, 1)");
    require(!xai_selective || has_private_data(condition), ErrorKind::kConfig,
            "xai_selective requires a condition with private data (PD+NPM or PD+PM)");
    require(levels.count(level) == 1, ErrorKind::kConfig, "unknown privacy level \"" + level + "\"");
    require(!target_train_size || *target_train_size >= 2, ErrorKind::kConfig,
            "target_train_size must be at least 2");
  }

  double level_epsilon() const { return levels.at(level); }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
      if (j.contains("data")) c.data = DataSource::from_json(j.at("data"));
      c.train_fraction = j.value("train_fraction", c.train_fraction);
      const auto gran = j.value("split", std::string("frame"));
      require(gran == "frame" || gran == "user", ErrorKind::kConfig,
              "split must be \"frame\" or \"user\"");
      c.granularity = gran == "user" ? SplitGranularity::kUser : SplitGranularity::kFrame;
      if (j.contains("target_train_size") && !j["target_train_size"].is_null())
        c.target_train_size = j["target_train_size"].get<int>();
      if (j.contains("model")) c.model = j.at("model");
      if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
      if (j.contains("private_train")) {
        c.private_train = TrainConfig::from_json(j.at("private_train"));
        if (!c.private_train.dp) c.private_train.dp = DpTrainConfig{};
      }
      c.condition = parse_condition(j.value("condition", std::string("no-privacy")));
      c.xai_selective = j.value("xai_selective", c.xai_selective);
      c.level = j.value("level", c.level);
      if (j.contains("levels")) c.levels = j.at("levels").get<std::map<std::string, double>>();
      c.feature_delta = j.value("feature_delta", c.feature_delta);
      c.clamp = j.value("clamp", c.clamp);
      if (j.contains("attribution")) c.attribution = AttributionSettings::from_json(j.at("attribution"));
      if (j.contains("mia")) c.mia = MiaSettings::from_json(j.at("mia"));
      if (j.contains("rda")) c.rda = RdaSettings::from_json(j.at("rda"));
      if (j.contains("bench")) c.bench = BenchSettings::from_json(j.at("bench"));
      c.seed = j.value("seed", c.seed);
      if (j.contains("output_dir") && !j["output_dir"].is_null())
        c.output_dir = j.at("output_dir").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kConfig, std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    return {{"data", data.to_json()},
            {"train_fraction", train_fraction},
            {"split", granularity == SplitGranularity::kUser ? "user" : "frame"},
            {"target_train_size",
             target_train_size ? nlohmann::json(*target_train_size) : nlohmann::json(nullptr)},
            {"model", model},
            {"train", train.to_json()},
            {"private_train", private_train.to_json()},
            {"condition", condition_name(condition)},
            {"xai_selective", xai_selective},
            {"level", level},
            {"levels", levels},
            {"feature_delta", feature_delta},
            {"clamp", clamp},
            {"attribution", attribution.to_json()},
            {"mia", mia.to_json()},
            {"rda", rda.to_json()},
            {"bench", bench.to_json()},
            {"seed", seed},
            {"output_dir", output_dir ? nlohmann::json(output_dir->string()) : nlohmann::json(nullptr)}};
  }
};

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Inference benchmark

struct BenchResult {
  std::vector<double> ms_per_sample;                // median per spec
  std::vector<std::vector<double>> repetitions_ms;  // per spec, per repetition
};

// Per-sample privatize + forward, one sample at a time. Samples cycle through
// the dataset until `min_samples` are reached. Specs are interleaved within
// each repetition (rotating start) after one warm-up pass.
inline BenchResult bench_inference(const TrainedModel& model, const Dataset& ds,
                                   const std::vector<FeatureDpSpec>& specs, int repetitions = 5,
                                   int min_samples = 1000, std::uint64_t seed = 0) {
  require(!ds.empty(), ErrorKind::kInvalidArgument, "benchmark dataset is empty");
  require(repetitions >= 1 && min_samples >= 1, ErrorKind::kConfig,
          "benchmark repetitions and samples must be positive");
  const Network net(model.spec);
  const std::size_t d = ds.feature_count();
  std::vector<FeaturePrivatizer> privatizers;
  for (const auto& s : specs) privatizers.emplace_back(s, d);
  const auto n = static_cast<std::size_t>(std::max<int>(min_samples, static_cast<int>(ds.size())));
  std::vector<double> x(d), logits(net.class_count());
  double sink = 0.0;
  auto pass = [&](std::size_t which, Rng& rng) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = ds.frames[i % ds.size()].features;
      std::copy(f.begin(), f.end(), x.begin());
      privatizers[which].apply(x, rng);
      net.logits_one(model.params, x, 1, logits);
      sink += logits[0];
    }
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
               .count() /
           static_cast<double>(n);
  };
  Rng rng = make_rng(seed);
  for (std::size_t s = 0; s < specs.size(); ++s) pass(s, rng);
  BenchResult out;
  out.repetitions_ms.assign(specs.size(), {});
  for (int r = 0; r < repetitions; ++r)
    for (std::size_t k = 0; k < specs.size(); ++k) {
      const std::size_t s = (k + static_cast<std::size_t>(r)) % specs.size();
      out.repetitions_ms[s].push_back(pass(s, rng));
    }
  for (auto reps : out.repetitions_ms) {
    std::sort(reps.begin(), reps.end());
    const std::size_t m = reps.size() / 2;
    out.ms_per_sample.push_back(reps.size() % 2 ? reps[m] : 0.5 * (reps[m - 1] + reps[m]));
  }
  if (!std::isfinite(sink)) out.ms_per_sample.push_back(0.0);  // keeps the loop observable
  if (out.ms_per_sample.size() > specs.size()) out.ms_per_sample.pop_back();
  return out;
}

// ---------------------------------------------------------------------------
// Report

inline constexpr int kReportVersion = 1;

// Top-level report keys that hold timings and are ignored when comparing runs.
inline const std::vector<std::string>& wall_clock_fields() {
  static const std::vector<std::string> fields{"inference_ms_per_sample", "wall_clock"};
  return fields;
}

inline nlohmann::json without_wall_clock(nlohmann::json report) {
  for (const auto& k : wall_clock_fields()) report.erase(k);
  return report;
}

struct InferenceTiming {
  double no_dp = 0.0;
  double full_dp = 0.0;
  double selective_dp = 0.0;
};

struct Report {
  std::string condition;
  bool xai_selective = false;
  std::string level;
  double balanced_accuracy = 0.0;
  double mean_accuracy = 0.0;
  std::vector<int> excluded_classes;
  std::optional<double> mia_auc;
  std::optional<double> mia_auc_sweep;
  std::optional<double> rda_rate;
  std::vector<double> rda_per_run;
  std::optional<PrivacySpent> epsilon_spent;
  std::optional<double> sampling_rate;
  std::optional<double> noise_multiplier;
  std::int64_t steps = 0;
  int epochs_run = 0;
  bool budget_exhausted = false;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  nlohmann::json feature_dp;  // privatizer audit, null without PD
  std::vector<int> selected_features;
  nlohmann::json importance;  // null unless a ranking was computed
  std::optional<InferenceTiming> inference_ms_per_sample;
  nlohmann::json config;
  double wall_clock_seconds = 0.0;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    nlohmann::json j{
        {"report_version", kReportVersion},
        {"version", {{"privatexr", kVersion}, {"git", PRIVATEXR_GIT_REV}}},
        {"condition", condition},
        {"xai_selective", xai_selective},
        {"level", level},
        {"balanced_accuracy", balanced_accuracy},
        {"mean_accuracy", mean_accuracy},
        {"excluded_classes", excluded_classes},
        {"mia_auc", opt(mia_auc)},
        {"mia_auc_sweep", opt(mia_auc_sweep)},
        {"rda_rate", opt(rda_rate)},
        {"rda_per_run", rda_per_run},
        {"sampling_rate", opt(sampling_rate)},
        {"noise_multiplier", opt(noise_multiplier)},
        {"steps", steps},
        {"epochs_run", epochs_run},
        {"budget_exhausted", budget_exhausted},
        {"train_size", train_size},
        {"test_size", test_size},
        {"feature_dp", feature_dp},
        {"selected_features", selected_features},
        {"importance", importance},
        {"config", config},
        {"wall_clock", {{"total_seconds", wall_clock_seconds}}}};
    if (epsilon_spent) {
      j["epsilon_spent"] = {{"epsilon", epsilon_spent->epsilon},
                            {"delta", epsilon_spent->delta},
                            {"order", epsilon_spent->best_order}};
      j["delta"] = epsilon_spent->delta;
    }
    if (inference_ms_per_sample) {
      const auto& t = *inference_ms_per_sample;
      j["inference_ms_per_sample"] = {{"no_dp", t.no_dp},
                                      {"full_dp", t.full_dp},
                                      {"selective_dp", t.selective_dp},
                                      {"selective_over_full", t.selective_dp / t.full_dp}};
    }
    return j;
  }
};

// ---------------------------------------------------------------------------
// Pipeline

namespace detail {

// Runs f, prefixing any library error with the stage name.
template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(name) + ": " + e.message());
  }
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed);
  seeded_shuffle(idx, rng);
  return idx;
}

inline std::vector<std::size_t> head(const std::vector<std::size_t>& v, std::size_t n) {
  std::vector<std::size_t> out(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size())));
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::size_t> tail(const std::vector<std::size_t>& v, std::size_t from) {
  std::vector<std::size_t> out(v.begin() + static_cast<std::ptrdiff_t>(std::min(from, v.size())), v.end());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

// Everything a serving bundle or CLI needs besides the report.
struct PipelineArtifacts {
  TrainedModel model;
  FeatureDpSpec feature_dp;
  std::optional<GlobalImportance> importance;
};

struct PipelineResult {
  Report report;
  PipelineArtifacts artifacts;
};

inline ModelSpec resolve_model_spec(const nlohmann::json& model, const Dataset& ds) {
  nlohmann::json j = model;
  j["input_dim"] = static_cast<int>(ds.feature_count());
  j["class_count"] = static_cast<int>(ds.class_count());
  try {
    return ModelSpec::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("model spec: ") + e.what());
  }
}

// Global Shapley ranking of a non-private reference model trained on clean
// training frames.
inline GlobalImportance reference_importance(const Dataset& train_ds, const ModelSpec& spec,
                                             const TrainConfig& recipe,
                                             const AttributionSettings& settings,
                                             std::uint64_t seed) {
  TrainConfig tc = recipe;
  tc.dp.reset();
  tc.progress_log.reset();
  tc.seed = derive_seed(seed, "train");
  const TrainedModel ref = train(train_ds, empty_like(train_ds), spec, tc);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, settings.samples)),
                                              train_ds.size());
  Tensor samples = features_tensor(train_ds.subset(detail::head(
      detail::shuffled_indices(train_ds.size(), derive_seed(seed, "samples")), n)));
  AttributionMode mode = ExactMode{};
  if (settings.sampled)
    mode = SampledMode{static_cast<std::size_t>(settings.permutations), derive_seed(seed, "permutations")};
  return global_importance(ref, samples, zero_baseline(train_ds.feature_count()), mode);
}

// Loaded, normalized and split data shared by the pipeline and bundle builder.
struct PreparedData {
  Dataset all;
  Dataset train_split;
  Dataset test_split;
  Dataset target_train;  // train_split, or a seeded subsample of it
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  const std::uint64_t seed = cfg.seed;
  PreparedData p;
  p.all = detail::stage("data", [&] { return cfg.data.load(); });
  if (cfg.data.normalize == NormalizeMode::kFull)
    p.all = detail::stage("data", [&] { return normalize(p.all); });
  std::tie(p.train_split, p.test_split) = detail::stage("split", [&] {
    return split(p.all, SplitSpec{cfg.train_fraction, derive_seed(seed, "split"), cfg.granularity});
  });
  if (cfg.data.normalize == NormalizeMode::kTrain) {
    detail::stage("data", [&] {
      const auto stats = compute_norm_stats(p.train_split);
      p.train_split = apply_normalization(p.train_split, stats);
      p.test_split = apply_normalization(p.test_split, stats);
      p.all = apply_normalization(p.all, stats);
    });
  }
  p.target_train = p.train_split;
  if (cfg.target_train_size) {
    const auto want = static_cast<std::size_t>(*cfg.target_train_size);
    require(want <= p.train_split.size(), ErrorKind::kConfig,
            "target_train_size " + std::to_string(want) + " exceeds the train split (" +
                std::to_string(p.train_split.size()) + " frames)");
    p.target_train = p.train_split.subset(detail::head(
        detail::shuffled_indices(p.train_split.size(), derive_seed(seed, "subsample")), want));
  }
  return p;
}

inline PipelineResult run_pipeline_full(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const std::uint64_t seed = cfg.seed;
  PipelineResult result;
  Report& report = result.report;
  report.condition = condition_name(cfg.condition);
  report.xai_selective = cfg.xai_selective;
  report.level = cfg.level;
  report.config = cfg.to_json();

  auto [all, train_split, test_split, target_train] = prepare_data(cfg);
  report.train_size = target_train.size();
  report.test_size = test_split.size();
  const ModelSpec spec = detail::stage("model", [&] { return resolve_model_spec(cfg.model, all); });
  const std::size_t d = all.feature_count();
  const bool pd = has_private_data(cfg.condition);
  const bool pm = has_private_model(cfg.condition);

  // Feature ranking for selective privatization.
  std::optional<GlobalImportance> importance;
  if (cfg.xai_selective) {
    importance = detail::stage("explain", [&] {
      return reference_importance(target_train, spec, cfg.train, cfg.attribution,
                                  derive_seed(seed, "xai"));
    });
    report.importance = importance_to_json(*importance, all.feature_names);
    report.selected_features = select_top_quarter(*importance, d);
  }

  FeatureDpSpec fdp;
  fdp.mode = pd ? (cfg.xai_selective ? DpMode::kSelective : DpMode::kFull) : DpMode::kOff;
  fdp.selected = report.selected_features;
  fdp.levels = cfg.levels;
  fdp.level = cfg.level;
  fdp.delta = cfg.feature_delta;
  fdp.clamp = cfg.clamp;
  const FeaturePrivatizer privatizer =
      detail::stage("privatize", [&] { return FeaturePrivatizer(fdp, d); });
  if (pd) report.feature_dp = privatizer.audit();

  auto privatized = [&](const Dataset& ds, std::uint64_t stream) {
    Dataset out = ds;
    Rng rng = make_rng(stream);
    for (auto& f : out.frames) privatizer.apply(f.features, rng);
    return out;
  };
  const Dataset model_train = pd ? privatized(target_train, derive_seed(seed, "feature-noise")) : target_train;
  const Dataset model_test = pd ? privatized(test_split, derive_seed(seed, "feature-noise-test")) : test_split;

  // Target training.
  TrainConfig recipe = pm ? cfg.private_train : cfg.train;
  if (pm) {
    if (!recipe.dp) recipe.dp = DpTrainConfig{};
    recipe.dp->target_epsilon = cfg.level_epsilon();
  } else {
    recipe.dp.reset();
  }
  recipe.seed = derive_seed(seed, "train");
  TrainConfig target_recipe = recipe;
  if (cfg.output_dir) target_recipe.progress_log = *cfg.output_dir / "progress.jsonl";
  else target_recipe.progress_log.reset();
  if (cfg.output_dir) std::filesystem::create_directories(*cfg.output_dir);
  const TrainedModel model = detail::stage("train", [&] {
    return train(model_train, empty_like(model_train), spec, target_recipe);
  });
  report.epsilon_spent = model.meta.privacy_spent;
  report.sampling_rate = model.meta.sampling_rate;
  report.noise_multiplier = model.meta.noise_multiplier;
  report.steps = model.meta.steps;
  report.epochs_run = model.meta.epochs_run;
  report.budget_exhausted = model.meta.budget_exhausted;

  // Utility on the (possibly privatized) held-out split.
  {
    const auto pred = predict_classes(model, features_tensor(model_test));
    const auto labels = model_test.labels();
    const auto ba = balanced_accuracy(pred, labels, static_cast<int>(all.class_count()));
    report.balanced_accuracy = ba.value;
    report.excluded_classes = ba.excluded_classes;
    report.mean_accuracy = mean_accuracy(pred, labels);
  }

  // Membership inference: members are the clean records the target trained
  // on; non-members and the attacker's pool come from the held-out split.
  if (cfg.mia.enabled) {
    detail::stage("mia", [&] {
      const std::size_t eval = cfg.mia.eval_size > 0 ? static_cast<std::size_t>(cfg.mia.eval_size)
                                                     : target_train.size();
      const auto member_order = detail::shuffled_indices(target_train.size(), derive_seed(seed, "mia-members"));
      const auto holdout_order = detail::shuffled_indices(test_split.size(), derive_seed(seed, "mia-holdout"));
      const std::size_t n_eval = std::min({eval, target_train.size(), test_split.size() / 2});
      const Dataset members = target_train.subset(detail::head(member_order, n_eval));
      const Dataset nonmembers = test_split.subset(detail::head(holdout_order, n_eval));
      const Dataset pool = test_split.subset(detail::tail(holdout_order, n_eval));
      MiaConfig mc;
      mc.shadow_count = cfg.mia.shadow_count;
      mc.shadow_train_size = cfg.mia.shadow_train_size > 0 ? cfg.mia.shadow_train_size
                                                           : static_cast<int>(target_train.size());
      mc.shadow_spec = spec;
      mc.shadow_train = recipe;
      mc.attack_hidden = cfg.mia.attack_hidden;
      mc.attack_train.epochs = cfg.mia.attack_epochs;
      mc.seed = derive_seed(seed, "attacks");
      if (pd) {
        mc.shadow_transform = [&](const Dataset& ds, int s) {
          return privatized(ds, derive_seed(derive_seed(seed, "shadow-noise"), static_cast<std::uint64_t>(s)));
        };
      }
      const auto r = run_mia(model, members, nonmembers, pool, mc);
      report.mia_auc = r.auc;
      report.mia_auc_sweep = r.auc_sweep;
    });
  }

  // Re-identification: the attacker's identifier is fit on clean frames;
  // under PD the frames it must link are privatized.
  if (cfg.rda.enabled) {
    detail::stage("rda", [&] {
      RdaConfig rc;
      rc.runs = cfg.rda.runs;
      rc.train_fraction = cfg.train_fraction;
      rc.rbfn = cfg.rda.rbfn;
      rc.seed = derive_seed(seed, "rda");
      TestTransform transform;
      if (pd) {
        transform = [&](const Dataset& ds, int run) {
          return privatized(ds, derive_seed(derive_seed(seed, "rda-noise"), static_cast<std::uint64_t>(run)));
        };
      }
      const auto r = run_rda(all, rc, transform);
      report.rda_rate = r.rate;
      report.rda_per_run = r.per_run;
    });
  }

  // Latency of privatize + forward for off / full / selective at this level.
  if (cfg.bench.enabled) {
    detail::stage("bench", [&] {
      FeatureDpSpec off = fdp, full = fdp, sel = fdp;
      off.mode = DpMode::kOff;
      full.mode = DpMode::kFull;
      sel.mode = DpMode::kSelective;
      if (sel.selected.empty()) {
        // No ranking in this condition: any ceil(d/4) features cost the same.
        for (std::size_t j = 0; j < (d + 3) / 4; ++j) sel.selected.push_back(static_cast<int>(j));
      }
      const auto b = bench_inference(model, test_split, {off, full, sel}, cfg.bench.repetitions,
                                     cfg.bench.samples, derive_seed(seed, "bench"));
      report.inference_ms_per_sample = InferenceTiming{b.ms_per_sample[0], b.ms_per_sample[1],
                                                       b.ms_per_sample[2]};
    });
  }

  result.artifacts = {model, fdp, importance};
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (cfg.output_dir) {
    std::ofstream(*cfg.output_dir / "report.json") << report.to_json().dump(2) << '\n';
    save_model(model, *cfg.output_dir / "model.json");
  }
  return result;
}

inline Report run_pipeline(const ExperimentConfig& cfg) { return run_pipeline_full(cfg).report; }

}  // namespace privatexr
