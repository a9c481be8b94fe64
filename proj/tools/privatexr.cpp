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

// privatexr command-line tool. Every subcommand reads an optional JSON config
// (--config), lets flags override it, and prints one JSON line on success.
// Exit codes: 0 success, 2 configuration error, 1 runtime error.

#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "privatexr/accountant.hpp"
#include "privatexr/attacks.hpp"
#include "privatexr/attribution.hpp"
#include "privatexr/pipeline.hpp"
#include "privatexr/privatizer.hpp"
#include "privatexr/serve.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace privatexr;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
}

json config_or_empty(const Globals& g) { return g.config.empty() ? json::object() : read_json(g.config); }

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kRuntime, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Flag value if given, else config key, else fallback.
template <typename T>
T pick(const std::optional<T>& flag, const json& cfg, const char* key, T fallback) {
  if (flag) return *flag;
  if (cfg.contains(key) && !cfg[key].is_null()) {
    try {
      return cfg[key].get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::kConfig, std::string("config key \"") + key + "\": " + e.what());
    }
  }
  return fallback;
}

std::string require_path(const std::optional<std::string>& flag, const json& cfg, const char* key) {
  const auto v = pick<std::string>(flag, cfg, key, "");
  if (v.empty()) fail(ErrorKind::kConfig, std::string("missing --") + key);
  return v;
}

std::vector<int> parse_indices(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    const auto v = privatexr::detail::parse_int(tok);
    if (!v) fail(ErrorKind::kConfig, "bad feature index \"" + tok + "\"");
    out.push_back(static_cast<int>(*v));
  }
  return out;
}

FeatureDpSpec feature_dp_from(const json& cfg, const std::optional<std::string>& mode,
                              const std::optional<std::string>& selected, const std::optional<std::string>& level) {
  FeatureDpSpec s = cfg.contains("feature_dp") ? FeatureDpSpec::from_json(cfg["feature_dp"]) : FeatureDpSpec{};
  if (mode) s.mode = parse_dp_mode(*mode);
  if (selected) s.selected = parse_indices(*selected);
  if (level) s.level = *level;
  return s;
}

// --- subcommands -----------------------------------------------------------

int cmd_synth(const Globals& g, const std::optional<std::string>& out) {
  const json cfg = config_or_empty(g);
  SynthConfig sc = SynthConfig::from_json(cfg.value("synth", cfg));
  if (g.seed) sc.seed = *g.seed;
  const Dataset ds = synth_generate(sc);
  const std::string path = require_path(out, cfg, "out");
  write_csv(ds, path);
  std::cout << json{{"out", path}, {"frames", ds.size()}, {"users", sc.users}}.dump() << '\n';
  return 0;
}

Dataset load_data(const json& cfg, const std::optional<std::string>& data_flag) {
  DataSource src = cfg.contains("data") ? DataSource::from_json(cfg["data"]) : DataSource{};
  if (data_flag) {
    src.csv = *data_flag;
    src.synth.reset();
    if (!cfg.contains("data")) src.normalize = NormalizeMode::kNone;
  }
  Dataset ds = src.load();
  return src.normalize == NormalizeMode::kNone ? ds : normalize(ds);
}

int cmd_train(const Globals& g, const std::optional<std::string>& data, const std::optional<std::string>& out) {
  const json cfg = config_or_empty(g);
  const Dataset ds = load_data(cfg, data);
  const ModelSpec spec = resolve_model_spec(cfg.value("model", json{{"arch", "mlp"}, {"hidden", {64, 64}}}), ds);
  TrainConfig tc = cfg.contains("train") ? TrainConfig::from_json(cfg["train"]) : TrainConfig{};
  if (g.seed) tc.seed = *g.seed;
  const double val_fraction = cfg.value("validation_fraction", 0.0);
  Dataset train_ds = ds, val_ds = empty_like(ds);
  if (val_fraction > 0.0) {
    require(val_fraction < 1.0, ErrorKind::kConfig, "validation_fraction must lie in [0, 1)");
    std::tie(train_ds, val_ds) = split(ds, SplitSpec{1.0 - val_fraction, derive_seed(tc.seed, "split")});
  }
  const TrainedModel m = train(train_ds, val_ds, spec, tc);
  const std::string path = require_path(out, cfg, "out");
  save_model(m, path);
  json summary{{"out", path}, {"epochs_run", m.meta.epochs_run}, {"final_loss", m.meta.final_loss},
               {"steps", m.meta.steps}, {"epsilon", nullptr}};
  if (m.meta.privacy_spent) summary["epsilon"] = m.meta.privacy_spent->epsilon;
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_explain(const Globals& g, const std::optional<std::string>& model_path,
                const std::optional<std::string>& data, const std::optional<std::string>& out,
                const std::optional<int>& samples, bool sampled, const std::optional<int>& permutations) {
  const json cfg = config_or_empty(g);
  const TrainedModel m = load_model(require_path(model_path, cfg, "model"));
  const Dataset ds = load_data(cfg, data);
  const auto n = static_cast<std::size_t>(pick<int>(samples, cfg, "samples", 512));
  const std::uint64_t seed = g.seed.value_or(cfg.value("seed", std::uint64_t{0}));
  const Dataset picked = ds.subset(detail::head(detail::shuffled_indices(ds.size(), derive_seed(seed, "samples")), n));
  AttributionMode mode = ExactMode{};
  if (sampled || cfg.value("sampled", false))
    mode = SampledMode{static_cast<std::size_t>(pick<int>(permutations, cfg, "permutations", 200)),
                       derive_seed(seed, "permutations")};
  const auto report = explain(m, features_tensor(picked), zero_baseline(ds.feature_count()), mode);
  const auto gi = global_importance(report.per_sample_phi);
  json doc{{"importance", importance_to_json(gi, ds.feature_names)},
           {"selected_features", select_top_quarter(gi, ds.feature_count())},
           {"samples", picked.size()},
           {"value", report.value_kind},
           {"per_sample_phi", report.per_sample_phi}};
  const auto path = pick<std::string>(out, cfg, "out", "");
  if (!path.empty()) write_json(path, doc);
  doc.erase("per_sample_phi");
  std::cout << doc.dump() << '\n';
  return 0;
}

int cmd_privatize(const Globals& g, const std::optional<std::string>& data, const std::optional<std::string>& out,
                  const std::optional<std::string>& mode, const std::optional<std::string>& selected,
                  const std::optional<std::string>& level) {
  const json cfg = config_or_empty(g);
  const Dataset ds = load_data(cfg, data);
  const FeatureDpSpec spec = feature_dp_from(cfg, mode, selected, level);
  Rng rng = make_rng(g.seed.value_or(cfg.value("seed", std::uint64_t{0})));
  const FeaturePrivatizer priv(spec, ds.feature_count());
  const Dataset noisy = privatize_dataset(ds, spec, rng);
  write_csv(noisy, require_path(out, cfg, "out"));
  std::cout << priv.audit().dump() << '\n';
  return 0;
}

int cmd_attack_mia(const Globals& g, const std::optional<std::string>& model_path,
                   const std::optional<std::string>& data, const std::optional<std::string>& members_path,
                   const std::optional<std::string>& out) {
  const json cfg = config_or_empty(g);
  const TrainedModel target = load_model(require_path(model_path, cfg, "model"));
  const Dataset members_all = load_csv(require_path(members_path, cfg, "members"));
  const Dataset heldout = load_csv(require_path(data, cfg, "data"));
  const std::uint64_t seed = g.seed.value_or(cfg.value("seed", std::uint64_t{0}));
  const MiaSettings ms = cfg.contains("mia") ? MiaSettings::from_json(cfg["mia"]) : MiaSettings{};
  const auto holdout_order = detail::shuffled_indices(heldout.size(), derive_seed(seed, "mia-holdout"));
  const auto member_order = detail::shuffled_indices(members_all.size(), derive_seed(seed, "mia-members"));
  const std::size_t want = ms.eval_size > 0 ? static_cast<std::size_t>(ms.eval_size) : members_all.size();
  const std::size_t n_eval = std::min({want, members_all.size(), heldout.size() / 2});
  MiaConfig mc;
  mc.shadow_count = ms.shadow_count;
  mc.shadow_train_size = ms.shadow_train_size > 0 ? ms.shadow_train_size : static_cast<int>(members_all.size());
  mc.shadow_spec = target.spec;
  mc.shadow_train = cfg.contains("train") ? TrainConfig::from_json(cfg["train"]) : TrainConfig{};
  mc.attack_hidden = ms.attack_hidden;
  mc.attack_train.epochs = ms.attack_epochs;
  mc.seed = derive_seed(seed, "attacks");
  const auto r = run_mia(target, members_all.subset(detail::head(member_order, n_eval)),
                         heldout.subset(detail::head(holdout_order, n_eval)),
                         heldout.subset(detail::tail(holdout_order, n_eval)), mc);
  const json doc{{"attack", "mia"}, {"auc", r.auc}, {"auc_sweep", r.auc_sweep},
                 {"members", n_eval}, {"nonmembers", n_eval}, {"shadow_count", mc.shadow_count}};
  const auto path = pick<std::string>(out, cfg, "out", "");
  if (!path.empty()) write_json(path, doc);
  std::cout << doc.dump() << '\n';
  return 0;
}

int cmd_attack_rda(const Globals& g, const std::optional<std::string>& data, const std::optional<std::string>& out,
                   const std::optional<int>& runs, const std::optional<std::string>& mode,
                   const std::optional<std::string>& selected, const std::optional<std::string>& level) {
  const json cfg = config_or_empty(g);
  const Dataset ds = load_data(cfg, data);
  const std::uint64_t seed = g.seed.value_or(cfg.value("seed", std::uint64_t{0}));
  const RdaSettings rs = cfg.contains("rda") ? RdaSettings::from_json(cfg["rda"]) : RdaSettings{};
  RdaConfig rc;
  rc.runs = runs.value_or(rs.runs);
  rc.rbfn = rs.rbfn;
  rc.train_fraction = cfg.value("train_fraction", rc.train_fraction);
  rc.seed = derive_seed(seed, "rda");
  const FeatureDpSpec fdp = feature_dp_from(cfg, mode, selected, level);
  TestTransform transform;
  std::optional<FeaturePrivatizer> priv;
  if (fdp.mode != DpMode::kOff) {
    priv.emplace(fdp, ds.feature_count());
    transform = [&](const Dataset& test, int run) {
      Dataset outd = test;
      Rng rng = make_rng(derive_seed(derive_seed(seed, "rda-noise"), static_cast<std::uint64_t>(run)));
      for (auto& f : outd.frames) priv->apply(f.features, rng);
      return outd;
    };
  }
  const auto r = run_rda(ds, rc, transform);
  const auto user_ids = ds.users();
  const std::size_t users = std::set<std::int64_t>(user_ids.begin(), user_ids.end()).size();
  json doc{{"attack", "rda"}, {"rate", r.rate}, {"per_run", r.per_run}, {"users", users},
           {"chance", 1.0 / static_cast<double>(users)},
           {"feature_dp", priv ? priv->audit() : json(nullptr)}};
  const auto path = pick<std::string>(out, cfg, "out", "");
  if (!path.empty()) write_json(path, doc);
  std::cout << doc.dump() << '\n';
  return 0;
}

int cmd_pipeline(const Globals& g, const std::optional<std::string>& out) {
  if (g.config.empty()) fail(ErrorKind::kConfig, "pipeline needs --config");
  ExperimentConfig cfg = load_experiment_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (out) cfg.output_dir = *out;
  std::cout << run_pipeline(cfg).to_json().dump() << '\n';
  return 0;
}

int cmd_bench(const Globals& g, const std::optional<std::string>& model_path, const std::optional<std::string>& data,
              const std::optional<std::string>& selected, const std::optional<std::string>& level,
              const std::optional<int>& samples, const std::optional<int>& reps) {
  const json cfg = config_or_empty(g);
  const TrainedModel m = load_model(require_path(model_path, cfg, "model"));
  const Dataset ds = load_data(cfg, data);
  FeatureDpSpec base = feature_dp_from(cfg, std::nullopt, selected, level);
  if (base.selected.empty())
    for (std::size_t j = 0; j < (ds.feature_count() + 3) / 4; ++j) base.selected.push_back(static_cast<int>(j));
  FeatureDpSpec off = base, full = base, sel = base;
  off.mode = DpMode::kOff;
  full.mode = DpMode::kFull;
  sel.mode = DpMode::kSelective;
  const auto r = bench_inference(m, ds, {off, full, sel}, pick<int>(reps, cfg, "repetitions", 5),
                                 pick<int>(samples, cfg, "samples", 1000),
                                 g.seed.value_or(cfg.value("seed", std::uint64_t{0})));
  std::cout << json{{"no_dp", r.ms_per_sample[0]},
                    {"full_dp", r.ms_per_sample[1]},
                    {"selective_dp", r.ms_per_sample[2]},
                    {"selective_over_full", r.ms_per_sample[2] / r.ms_per_sample[1]},
                    {"unit", "ms_per_sample"}}
                   .dump()
            << '\n';
  return 0;
}

struct AccountArgs {
  std::optional<double> q, sigma, delta, epsilon;
  std::optional<std::int64_t> steps;
  bool solve = false;
};

int cmd_account(const Globals& g, const AccountArgs& a) {
  const json cfg = config_or_empty(g);
  const double q = pick<double>(a.q, cfg, "q", -1.0);
  const auto steps = pick<std::int64_t>(a.steps, cfg, "steps", -1);
  const double delta = pick<double>(a.delta, cfg, "delta", 1e-5);
  require(q > 0.0 && q <= 1.0, ErrorKind::kConfig, "--q must lie in (0, 1]");
  require(steps >= 1, ErrorKind::kConfig, "--steps must be positive");
  if (a.solve || cfg.value("solve_sigma", false)) {
    const double eps = pick<double>(a.epsilon, cfg, "epsilon", -1.0);
    require(eps > 0.0, ErrorKind::kConfig, "--solve-sigma needs --epsilon");
    const double sigma = accountant::find_sigma({eps, delta}, q, steps);
    const auto check = accountant::epsilon_after(q, sigma, steps, delta);
    std::cout << json{{"sigma", sigma}, {"epsilon", check.epsilon}, {"order", check.order}}.dump() << '\n';
    return 0;
  }
  const double sigma = pick<double>(a.sigma, cfg, "sigma", -1.0);
  require(sigma > 0.0, ErrorKind::kConfig, "--sigma must be positive");
  const auto r = accountant::epsilon_after(q, sigma, steps, delta);
  std::cout << json{{"epsilon", r.epsilon}, {"order", r.order}}.dump() << '\n';
  return 0;
}

struct ServeArgs {
  std::optional<std::string> bundle, build, host;
  std::optional<int> port, threads;
  std::optional<double> fps;
};

int cmd_serve(const Globals& g, const ServeArgs& a) {
  const json cfg = config_or_empty(g);
  fs::path bundle_path;
  if (a.build) {
    // --config is an experiment config; the bundle is trained into --build.
    if (g.config.empty()) fail(ErrorKind::kConfig, "serve --build needs --config");
    ExperimentConfig ec = ExperimentConfig::from_json(cfg);
    if (g.seed) ec.seed = *g.seed;
    build_serve_bundle(ec, *a.build);
    bundle_path = fs::path(*a.build) / "bundle.json";
  } else {
    bundle_path = require_path(a.bundle, cfg, "bundle");
  }
  ServeBundle b = load_bundle(bundle_path);
  if (a.fps) b.fps = *a.fps;
  if (g.seed) b.seed = *g.seed;
  std::shared_ptr<const ServeModel> model;
  try {
    model = std::make_shared<ServeModel>(std::move(b));
  } catch (const Error& e) {
    throw Error(e.kind(), "refusing to serve " + bundle_path.string() + ": " + e.message());
  }
  const std::string host = pick<std::string>(a.host, cfg, "host", "127.0.0.1");
  const int port = pick<int>(a.port, cfg, "port", 8080);
  Server server(model, host, static_cast<unsigned short>(port), pick<int>(a.threads, cfg, "threads", 2));
  std::cout << json{{"listening", host + ":" + std::to_string(server.port())}, {"bundle", bundle_path.string()}}.dump()
            << std::endl;
  server.run();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"privatexr: privacy workbench for multi-user sensor classifiers"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "JSON config file");
  auto* seed_opt = app.add_option("--seed", seed, "Base seed; overrides the config");

  std::optional<std::string> data, out, model, members, mode, selected, level;
  std::optional<int> samples, permutations, runs, reps;
  bool sampled = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset CSV");
  synth->add_option("--out", out, "Output CSV");

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", data, "Dataset CSV");
  train_cmd->add_option("--out", out, "Output model JSON");

  auto* explain_cmd = app.add_subcommand("explain", "Shapley attributions and top-quarter selection");
  explain_cmd->add_option("--model", model, "Model JSON");
  explain_cmd->add_option("--data", data, "Dataset CSV");
  explain_cmd->add_option("--out", out, "Output JSON with per-sample attributions");
  explain_cmd->add_option("--samples", samples, "Frames to explain");
  explain_cmd->add_flag("--sampled", sampled, "Permutation sampling instead of exact enumeration");
  explain_cmd->add_option("--permutations", permutations, "Permutations per frame when sampling");

  auto* priv_cmd = app.add_subcommand("privatize", "Apply input-level differential privacy to a CSV");
  priv_cmd->add_option("--data", data, "Dataset CSV");
  priv_cmd->add_option("--out", out, "Output CSV");
  priv_cmd->add_option("--mode", mode, "off | full | selective");
  priv_cmd->add_option("--selected", selected, "Comma-separated feature indices");
  priv_cmd->add_option("--level", level, "Privacy level name");

  auto* attack = app.add_subcommand("attack", "Privacy attacks");
  attack->require_subcommand(1);
  auto* mia = attack->add_subcommand("mia", "Shadow-model membership inference");
  mia->add_option("--model", model, "Target model JSON");
  mia->add_option("--members", members, "CSV of the target's training frames");
  mia->add_option("--data", data, "CSV of held-out frames (non-members and attacker pool)");
  mia->add_option("--out", out, "Output report JSON");
  auto* rda = attack->add_subcommand("rda", "Re-identification with an RBF network");
  rda->add_option("--data", data, "Dataset CSV");
  rda->add_option("--out", out, "Output report JSON");
  rda->add_option("--runs", runs, "Repetitions");
  rda->add_option("--mode", mode, "Feature DP applied to test frames: off | full | selective");
  rda->add_option("--selected", selected, "Comma-separated feature indices");
  rda->add_option("--level", level, "Privacy level name");

  auto* pipeline = app.add_subcommand("pipeline", "Run an experiment and print its report");
  pipeline->add_option("--out", out, "Directory for report.json, model.json and progress.jsonl");

  auto* bench = app.add_subcommand("bench", "Per-sample inference latency, off / full / selective");
  bench->add_option("--model", model, "Model JSON");
  bench->add_option("--data", data, "Dataset CSV");
  bench->add_option("--selected", selected, "Comma-separated feature indices");
  bench->add_option("--level", level, "Privacy level name");
  bench->add_option("--samples", samples, "Samples per pass");
  bench->add_option("--repetitions", reps, "Timed passes");

  AccountArgs acc;
  auto* account = app.add_subcommand("account", "RDP accountant for the subsampled Gaussian");
  account->add_option("--q", acc.q, "Sampling rate");
  account->add_option("--sigma", acc.sigma, "Noise multiplier");
  account->add_option("--steps", acc.steps, "Steps");
  account->add_option("--delta", acc.delta, "Target delta");
  account->add_option("--epsilon", acc.epsilon, "Target epsilon for --solve-sigma");
  account->add_flag("--solve-sigma", acc.solve, "Solve for the smallest sigma meeting --epsilon");

  ServeArgs sa;
  auto* serve = app.add_subcommand("serve", "Serve predictions over HTTP and /stream");
  serve->add_option("--bundle", sa.bundle, "Bundle JSON");
  serve->add_option("--build", sa.build, "Train a bundle from --config into this directory first");
  serve->add_option("--host", sa.host, "Bind address");
  serve->add_option("--port", sa.port, "Port");
  serve->add_option("--fps", sa.fps, "Stream replay rate");
  serve->add_option("--threads", sa.threads, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*synth) return cmd_synth(g, out);
    if (*train_cmd) return cmd_train(g, data, out);
    if (*explain_cmd) return cmd_explain(g, model, data, out, samples, sampled, permutations);
    if (*priv_cmd) return cmd_privatize(g, data, out, mode, selected, level);
    if (*mia) return cmd_attack_mia(g, model, data, members, out);
    if (*rda) return cmd_attack_rda(g, data, out, runs, mode, selected, level);
    if (*pipeline) return cmd_pipeline(g, out);
    if (*bench) return cmd_bench(g, model, data, selected, level, samples, reps);
    if (*account) return cmd_account(g, acc);
    if (*serve) return cmd_serve(g, sa);
  } catch (const Error& e) {
    std::cerr << "privatexr: " << e.what() << '\n';
    return e.kind() == ErrorKind::kConfig ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "privatexr: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
