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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "privatexr/accountant.hpp"
#include "privatexr/common.hpp"
#include "privatexr/data.hpp"
#include "privatexr/nn.hpp"

namespace privatexr {

// Privacy settings for DPSGD. Epoch count and patience come from the
// enclosing TrainConfig.
struct DpTrainConfig {
  double clip_norm = 1.0;
  // When unset, solved from target_epsilon for the planned step count.
  std::optional<double> noise_multiplier;
  // When unset, batch_size / n.
  std::optional<double> sampling_rate;
  double learning_rate = 0.1;
  // When unset, 1 / (2 n).
  std::optional<double> delta;
  std::optional<double> target_epsilon;

  static DpTrainConfig from_json(const nlohmann::json& j) {
    DpTrainConfig c;
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("noise_multiplier") && !j["noise_multiplier"].is_null())
      c.noise_multiplier = j["noise_multiplier"].get<double>();
    if (j.contains("sampling_rate") && !j["sampling_rate"].is_null())
      c.sampling_rate = j["sampling_rate"].get<double>();
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("delta") && !j["delta"].is_null()) c.delta = j["delta"].get<double>();
    if (j.contains("target_epsilon") && !j["target_epsilon"].is_null())
      c.target_epsilon = j["target_epsilon"].get<double>();
    return c;
  }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) -> nlohmann::json {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    return {{"clip_norm", clip_norm},
            {"noise_multiplier", opt(noise_multiplier)},
            {"sampling_rate", opt(sampling_rate)},
            {"learning_rate", learning_rate},
            {"delta", opt(delta)},
            {"target_epsilon", opt(target_epsilon)}};
  }
};

struct TrainConfig {
  int epochs = 250;
  int batch_size = 256;
  double learning_rate = 0.001;
  int patience = 30;  // <= 0 disables early stopping
  std::uint64_t seed = 0;
  std::optional<DpTrainConfig> dp;
  std::optional<std::filesystem::path> progress_log;

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    if (j.contains("dp") && !j["dp"].is_null()) c.dp = DpTrainConfig::from_json(j["dp"]);
    if (j.contains("progress_log")) c.progress_log = j["progress_log"].get<std::string>();
    return c;
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"patience", patience},
            {"seed", seed},
            {"dp", dp ? dp->to_json() : nlohmann::json(nullptr)}};
  }
};

// grad * min(1, C / ||grad||).
inline std::vector<double> clip_per_example(std::span<const double> grad, double clip_norm) {
  require(clip_norm > 0.0, ErrorKind::kInvalidArgument, "clip norm must be positive");
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  std::vector<double> out(grad.begin(), grad.end());
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (double& g : out) g *= scale;
  }
  return out;
}

inline double l2_norm(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

struct DpStepStats {
  std::size_t lot_size = 0;
  double max_clipped_norm = 0.0;
  bool applied = false;
};

// One DPSGD update with the plain SGD rule:
//   params -= lr * (sum_i clip(g_i, C) + N(0, sigma^2 C^2 I)) / expected_lot_size.
// An empty lot leaves params untouched. Noise is drawn coordinate by
// coordinate in parameter order.
inline DpStepStats dpsgd_step(const Network& net, std::span<double> params, const Tensor& lot,
                              std::span<const int> labels, double clip_norm,
                              double noise_multiplier, double expected_lot_size,
                              double learning_rate, Rng& rng) {
  require(expected_lot_size > 0.0, ErrorKind::kInvalidArgument,
          "expected lot size must be positive");
  DpStepStats stats;
  stats.lot_size = lot.rows();
  if (lot.rows() == 0) return stats;
  auto lg = loss_and_grads(net, params, lot, labels, Reduction::kPerExample);
  std::vector<double> sum(params.size(), 0.0);
  for (const auto& g : lg.per_example) {
    auto clipped = std::isinf(clip_norm) ? g : clip_per_example(g, clip_norm);
    const double norm = l2_norm(clipped);
    stats.max_clipped_norm = std::max(stats.max_clipped_norm, norm);
    if (!std::isinf(clip_norm) && norm > clip_norm + 1e-9) {
      fail(ErrorKind::kRuntime, "clipped gradient norm exceeds the clip bound");
    }
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += clipped[j];
  }
  if (noise_multiplier > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_multiplier * clip_norm);
    for (double& s : sum) s += noise(rng);
  }
  for (std::size_t j = 0; j < params.size(); ++j)
    params[j] -= learning_rate * sum[j] / expected_lot_size;
  stats.applied = true;
  return stats;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> epsilon_spent;
  double max_clipped_norm = 0.0;  // private path only
  std::int64_t steps = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"train_loss", train_loss},
            {"val_loss", val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr)},
            {"epsilon_spent",
             epsilon_spent ? nlohmann::json(*epsilon_spent) : nlohmann::json(nullptr)},
            {"steps", steps}};
  }
};

struct TrainResult {
  TrainedModel model;
  std::vector<EpochRecord> history;
  bool stopped_early = false;
};

namespace detail {

inline Tensor gather_rows(const Tensor& all, std::span<const std::size_t> idx) {
  std::vector<std::size_t> shape = all.shape;
  shape[0] = idx.size();
  Tensor out = Tensor::zeros(shape);
  const std::size_t w = all.row_size();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(all.values.begin() + static_cast<std::ptrdiff_t>(idx[i] * w), w,
                out.values.begin() + static_cast<std::ptrdiff_t>(i * w));
  return out;
}

inline std::vector<int> gather(std::span<const int> v, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

inline double mean_loss(const Network& net, std::span<const double> params, const Tensor& x,
                        std::span<const int> y) {
  if (x.rows() == 0) return 0.0;
  auto l = per_example_loss(net, params, x, y);
  return std::accumulate(l.begin(), l.end(), 0.0) / static_cast<double>(l.size());
}

}  // namespace detail

struct ResolvedDp {
  double clip_norm;
  double noise_multiplier;
  double sampling_rate;
  double delta;
  std::int64_t steps_per_epoch;
  std::int64_t planned_steps;
};

inline ResolvedDp resolve_dp(const DpTrainConfig& dp, std::size_t n, int batch_size, int epochs) {
  require(n > 0, ErrorKind::kInvalidArgument, "empty training set");
  require(dp.clip_norm > 0.0, ErrorKind::kConfig, "clip_norm must be positive");
  ResolvedDp r{};
  r.clip_norm = dp.clip_norm;
  r.sampling_rate = dp.sampling_rate.value_or(
      std::min(1.0, static_cast<double>(batch_size) / static_cast<double>(n)));
  require(r.sampling_rate > 0.0 && r.sampling_rate <= 1.0, ErrorKind::kConfig,
          "sampling_rate must lie in (0, 1]");
  r.delta = dp.delta.value_or(1.0 / (2.0 * static_cast<double>(n)));
  require(r.delta > 0.0 && r.delta < 1.0, ErrorKind::kConfig, "delta must lie in (0, 1)");
  r.steps_per_epoch = std::max<std::int64_t>(1, std::llround(1.0 / r.sampling_rate));
  r.planned_steps = r.steps_per_epoch * epochs;
  if (dp.noise_multiplier) {
    require(*dp.noise_multiplier >= 0.0, ErrorKind::kConfig, "noise_multiplier must be >= 0");
    r.noise_multiplier = *dp.noise_multiplier;
  } else {
    require(dp.target_epsilon.has_value(), ErrorKind::kConfig,
            "private training needs noise_multiplier or target_epsilon");
    r.noise_multiplier = accountant::find_sigma({*dp.target_epsilon, r.delta}, r.sampling_rate,
                                                r.planned_steps);
  }
  return r;
}

// Non-private: shuffled mini-batches with Adam. Private: Poisson lots with
// DPSGD and the SGD rule. Both stop early when validation loss has not
// improved for `patience` epochs.
inline TrainResult train_with_history(const Dataset& train_ds, const Dataset& val_ds,
                                      const ModelSpec& spec, const TrainConfig& cfg) {
  require(!train_ds.empty(), ErrorKind::kInvalidArgument, "empty training set");
  require(spec.input_dim == static_cast<int>(train_ds.feature_count()) && spec.time_steps == 1,
          ErrorKind::kDimension,
          "model expects " + std::to_string(spec.input_dim) + " features, dataset has " +
              std::to_string(train_ds.feature_count()));
  require(spec.class_count == static_cast<int>(train_ds.class_count()), ErrorKind::kDimension,
          "model expects " + std::to_string(spec.class_count) + " classes, dataset has " +
              std::to_string(train_ds.class_count()));
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, ErrorKind::kConfig,
          "epochs and batch_size must be positive");

  const Network net(spec);
  const Tensor x_train = features_tensor(train_ds);
  const std::vector<int> y_train = train_ds.labels();
  const Tensor x_val = features_tensor(val_ds);
  const std::vector<int> y_val = val_ds.labels();
  const std::size_t n = train_ds.size();

  TrainResult result;
  result.model.spec = spec;
  result.model.params =
      net.init_params(derive_seed(derive_seed(cfg.seed, "init"), spec.seed));
  auto& params = result.model.params;
  Rng rng = make_rng(derive_seed(cfg.seed, cfg.dp ? "training-noise" : "batches"));

  std::optional<ResolvedDp> dp;
  if (cfg.dp) {
    dp = resolve_dp(*cfg.dp, n, cfg.batch_size, cfg.epochs);
    result.model.meta.noise_multiplier = dp->noise_multiplier;
    result.model.meta.sampling_rate = dp->sampling_rate;
  }

  std::ofstream log;
  if (cfg.progress_log) {
    log.open(*cfg.progress_log, std::ios::binary);
    if (!log) fail(ErrorKind::kRuntime, "cannot write progress log " + cfg.progress_log->string());
  }

  OptimizerState opt;
  const UpdateRule adam = Adam{cfg.learning_rate};
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::int64_t steps = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto epsilon_at = [&](std::int64_t t) {
    return accountant::epsilon_after(dp->sampling_rate, dp->noise_multiplier, t, dp->delta);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    bool exhausted = false;
    if (!dp) {
      detail::seeded_shuffle(order, rng);
      for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
        std::span<const std::size_t> idx(order.data() + start, end - start);
        Tensor xb = detail::gather_rows(x_train, idx);
        auto yb = detail::gather(y_train, idx);
        auto lg = loss_and_grads(net, params, xb, yb, Reduction::kMean);
        optimizer_step(params, lg.grad, opt, adam);
        ++steps;
      }
    } else {
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      const double expected = dp->sampling_rate * static_cast<double>(n);
      for (std::int64_t s = 0; s < dp->steps_per_epoch; ++s) {
        if (cfg.dp->target_epsilon && dp->noise_multiplier > 0.0 &&
            epsilon_at(steps + 1).epsilon > *cfg.dp->target_epsilon) {
          exhausted = true;
          break;
        }
        std::vector<std::size_t> lot;
        for (std::size_t i = 0; i < n; ++i)
          if (coin(rng) < dp->sampling_rate) lot.push_back(i);
        Tensor xb = detail::gather_rows(x_train, lot);
        auto yb = detail::gather(y_train, lot);
        auto st = dpsgd_step(net, params, xb, yb, dp->clip_norm, dp->noise_multiplier, expected,
                             cfg.dp->learning_rate, rng);
        rec.max_clipped_norm = std::max(rec.max_clipped_norm, st.max_clipped_norm);
        ++steps;
      }
      if (dp->noise_multiplier > 0.0) rec.epsilon_spent = epsilon_at(steps).epsilon;
      else rec.epsilon_spent = std::numeric_limits<double>::infinity();
    }
    rec.steps = steps;
    rec.train_loss = detail::mean_loss(net, params, x_train, y_train);
    if (!val_ds.empty()) rec.val_loss = detail::mean_loss(net, params, x_val, y_val);
    result.history.push_back(rec);
    if (log) log << rec.to_json().dump() << '\n';
    result.model.meta.epochs_run = epoch;
    result.model.meta.final_loss = rec.train_loss;
    if (exhausted) {
      result.model.meta.budget_exhausted = true;
      break;
    }
    if (cfg.patience > 0 && rec.val_loss) {
      if (*rec.val_loss < best_val) {
        best_val = *rec.val_loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  result.model.meta.steps = steps;
  if (dp) {
    PrivacySpent spent;
    spent.delta = dp->delta;
    if (dp->noise_multiplier > 0.0) {
      auto e = epsilon_at(steps);
      spent.epsilon = e.epsilon;
      spent.best_order = e.order;
    } else {
      spent.epsilon = std::numeric_limits<double>::infinity();
    }
    result.model.meta.privacy_spent = spent;
  }
  return result;
}

inline TrainedModel train(const Dataset& train_ds, const Dataset& val_ds, const ModelSpec& spec,
                          const TrainConfig& cfg) {
  return train_with_history(train_ds, val_ds, spec, cfg).model;
}

}  // namespace privatexr
