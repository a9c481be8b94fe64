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
#include <fstream>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "privatexr/metrics.hpp"
#include "privatexr/trainer.hpp"

namespace privatexr {
namespace {

Dataset small_synth(std::uint64_t seed, int users = 4) {
  SynthConfig cfg;
  cfg.users = users;
  cfg.stimuli = 2;
  cfg.frames_per_user_stimulus = 20;
  cfg.seed = seed;
  return normalize(synth_generate(cfg));
}

TEST(Clip, ScalesOnlyAboveBound) {
  std::vector<double> g{3, 4};
  EXPECT_EQ(clip_per_example(g, 10.0), g);
  auto c = clip_per_example(g, 1.0);
  EXPECT_NEAR(c[0], 0.6, 1e-15);
  EXPECT_NEAR(c[1], 0.8, 1e-15);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 50);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(37);
    for (double& x : v) x = n(rng);
    EXPECT_LE(l2_norm(clip_per_example(v, 0.7)), 0.7 + 1e-9);
  }
}

TEST(DpsgdStep, NoNoiseNoClipFullLotEqualsSgd) {
  auto spec = ModelSpec::mlp(12, 4, {16});
  Network net(spec);
  auto ds = small_synth(3);
  auto x = features_tensor(ds);
  auto y = ds.labels();
  auto params = net.init_params(5);
  auto reference = params;

  Rng rng = make_rng(1);
  const double lr = 0.05;
  auto st = dpsgd_step(net, params, x, y, std::numeric_limits<double>::infinity(), 0.0,
                       static_cast<double>(ds.size()), lr, rng);
  EXPECT_TRUE(st.applied);

  auto lg = loss_and_grads(net, reference, x, y, Reduction::kMean);
  OptimizerState state;
  optimizer_step(reference, lg.grad, state, Sgd{lr});
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_NEAR(params[i], reference[i], 1e-12);
}

TEST(DpsgdStep, EmptyLotLeavesParamsUntouched) {
  auto spec = ModelSpec::mlp(12, 4, {8});
  Network net(spec);
  auto params = net.init_params(1);
  auto before = params;
  Rng rng = make_rng(2);
  Tensor empty = Tensor::zeros({0, 12});
  auto st = dpsgd_step(net, params, empty, {}, 1.0, 1.0, 10.0, 0.1, rng);
  EXPECT_FALSE(st.applied);
  EXPECT_EQ(params, before);
}

TEST(DpsgdStep, NoiseStandardDeviationMonteCarlo) {
  // Noise is isolated by differencing a noisy step against a noiseless one
  // from the same starting point.
  auto spec = ModelSpec::mlp(12, 4, {64, 64});
  Network net(spec);
  auto ds = small_synth(4);
  auto x = features_tensor(ds);
  auto y = ds.labels();
  const double clip = 0.5, sigma = 1.7, lr = 0.1, expected = 20.0;
  auto start = net.init_params(9);
  auto clean = start;
  Rng unused = make_rng(0);
  dpsgd_step(net, clean, x, y, clip, 0.0, expected, lr, unused);

  Rng rng = make_rng(11);
  long double s = 0, ss = 0;
  std::size_t count = 0;
  while (count < 100000) {
    auto noisy = start;
    dpsgd_step(net, noisy, x, y, clip, sigma, expected, lr, rng);
    for (std::size_t i = 0; i < noisy.size() && count < 100000; ++i, ++count) {
      const double z = (clean[i] - noisy[i]) * expected / lr;
      s += z;
      ss += static_cast<long double>(z) * z;
    }
  }
  const double mean = static_cast<double>(s / count);
  const double sd = std::sqrt(static_cast<double>(ss / count) - mean * mean);
  EXPECT_NEAR(sd, sigma * clip, 0.02 * sigma * clip);
  EXPECT_NEAR(mean, 0.0, 5 * sigma * clip / std::sqrt(100000.0));
}

TEST(Train, PrivateRunKeepsEveryClippedNormBounded) {
  auto ds = small_synth(6);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  cfg.patience = 0;
  cfg.seed = 3;
  DpTrainConfig dp;
  dp.clip_norm = 0.3;
  dp.noise_multiplier = 1.1;
  cfg.dp = dp;
  auto r = train_with_history(ds, {}, ModelSpec::mlp(12, 4, {16, 16}), cfg);
  ASSERT_EQ(r.history.size(), 20u);
  for (const auto& rec : r.history) {
    EXPECT_LE(rec.max_clipped_norm, 0.3 + 1e-9);
    EXPECT_GT(rec.max_clipped_norm, 0.0);
  }
  const auto& meta = r.model.meta;
  ASSERT_TRUE(meta.privacy_spent);
  const double q = 32.0 / ds.size();
  EXPECT_EQ(meta.steps, 20 * std::llround(1.0 / q));
  EXPECT_EQ(meta.privacy_spent->epsilon,
            accountant::epsilon_after(q, 1.1, meta.steps, 1.0 / (2.0 * ds.size())).epsilon);
}

TEST(Train, TargetEpsilonSolvesSigmaAndRespectsBudget) {
  auto ds = small_synth(7);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 40;
  cfg.patience = 0;
  DpTrainConfig dp;
  dp.target_epsilon = 1.0;
  cfg.dp = dp;
  auto m = train(ds, {}, ModelSpec::mlp(12, 4, {8}), cfg);
  ASSERT_TRUE(m.meta.privacy_spent);
  EXPECT_LE(m.meta.privacy_spent->epsilon, 1.0);
  EXPECT_GE(m.meta.privacy_spent->epsilon, 0.999);
  EXPECT_FALSE(m.meta.budget_exhausted);
}

TEST(Train, StopsWhenBudgetWouldBeExceeded) {
  auto ds = small_synth(8);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 40;
  cfg.patience = 0;
  DpTrainConfig dp;
  dp.noise_multiplier = 0.8;
  dp.target_epsilon = 2.0;
  cfg.dp = dp;
  auto m = train(ds, {}, ModelSpec::mlp(12, 4, {8}), cfg);
  EXPECT_TRUE(m.meta.budget_exhausted);
  EXPECT_LE(m.meta.privacy_spent->epsilon, 2.0);
  const double q = 40.0 / ds.size();
  EXPECT_GT(accountant::epsilon_after(q, 0.8, m.meta.steps + 1, 1.0 / (2.0 * ds.size())).epsilon,
            2.0);
  EXPECT_LT(m.meta.epochs_run, 50);
}

TEST(Train, NonPrivateLearnsAndIsDeterministic) {
  auto ds = small_synth(9);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.patience = 0;
  cfg.seed = 4;
  auto a = train_with_history(ds, {}, ModelSpec::mlp(12, 4, {32}), cfg);
  auto b = train_with_history(ds, {}, ModelSpec::mlp(12, 4, {32}), cfg);
  EXPECT_EQ(a.model.params, b.model.params);
  EXPECT_LT(a.history.back().train_loss, 0.5 * a.history.front().train_loss);
  EXPECT_FALSE(a.model.meta.privacy_spent);
}

TEST(Train, EarlyStoppingAndProgressLog) {
  auto all = small_synth(10);
  auto [train_ds, val_ds] = split(all, {0.5, 1, SplitGranularity::kFrame});
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  cfg.patience = 3;
  cfg.progress_log = std::filesystem::temp_directory_path() / "privatexr_progress.jsonl";
  auto r = train_with_history(train_ds, val_ds, ModelSpec::mlp(12, 4, {64, 64}), cfg);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_LT(r.history.size(), 400u);
  std::ifstream in(*cfg.progress_log);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"].get<int>(), static_cast<int>(++lines));
    EXPECT_TRUE(j["val_loss"].is_number());
  }
  EXPECT_EQ(lines, r.history.size());
}

TEST(Train, RejectsMismatchedSpecAndBadConfig) {
  auto ds = small_synth(11);
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(ds, {}, ModelSpec::mlp(5, 4), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
  cfg.dp = DpTrainConfig{};
  try {
    train(ds, {}, ModelSpec::mlp(12, 4), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(Clip, HalvesAtTwiceTheBound) {
  std::vector<double> inside{0.3, 0.4};  // norm 0.5
  EXPECT_EQ(clip_per_example(inside, 1.0), inside);
  std::vector<double> outside{1.2, -1.6};  // norm 2
  auto c = clip_per_example(outside, 1.0);
  EXPECT_NEAR(c[0], 0.6, 1e-15);
  EXPECT_NEAR(c[1], -0.8, 1e-15);
}

TEST(DpsgdStep, ClippingOnlyUsesHalfGradient) {
  auto spec = ModelSpec::mlp(12, 4, {8});
  Network net(spec);
  auto ds = small_synth(12);
  auto x = detail::gather_rows(features_tensor(ds), std::vector<std::size_t>{0});
  std::vector<int> y{ds.frames[0].label};
  auto params = net.init_params(2);
  auto g = loss_and_grads(net, params, x, y, Reduction::kMean).grad;
  const double clip = l2_norm(g) / 2.0;
  auto expected = params;
  for (std::size_t i = 0; i < g.size(); ++i) expected[i] -= 0.1 * (g[i] * (clip / l2_norm(g)));
  Rng rng = make_rng(0);
  dpsgd_step(net, params, x, y, clip, 0.0, 1.0, 0.1, rng);
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_NEAR(params[i], expected[i], 1e-15);
}

// Multinomial logistic regression by full-batch gradient descent. Used to
// confirm the generator's label signal independently of the network code.
std::vector<int> logistic_oracle(const Dataset& train_ds, const Dataset& test_ds) {
  const std::size_t d = train_ds.feature_count(), k = train_ds.class_count();
  std::vector<double> w((d + 1) * k, 0.0);
  auto scores = [&](const std::vector<double>& x) {
    std::vector<double> z(k);
    for (std::size_t c = 0; c < k; ++c) {
      z[c] = w[d * k + c];
      for (std::size_t j = 0; j < d; ++j) z[c] += w[j * k + c] * x[j];
    }
    return z;
  };
  for (int it = 0; it < 300; ++it) {
    std::vector<double> grad(w.size(), 0.0);
    for (const auto& f : train_ds.frames) {
      auto z = scores(f.features);
      const double m = *std::max_element(z.begin(), z.end());
      double sum = 0;
      for (double& v : z) sum += (v = std::exp(v - m));
      for (std::size_t c = 0; c < k; ++c) {
        const double r = z[c] / sum - (static_cast<int>(c) == f.label ? 1.0 : 0.0);
        for (std::size_t j = 0; j < d; ++j) grad[j * k + c] += r * f.features[j];
        grad[d * k + c] += r;
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.5 * grad[i] / train_ds.size();
  }
  std::vector<int> pred;
  for (const auto& f : test_ds.frames) {
    auto z = scores(f.features);
    pred.push_back(static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()));
  }
  return pred;
}

double held_out_balanced_accuracy(double beta, bool check_oracle) {
  SynthConfig sc;
  sc.label_signal_strength = beta;
  sc.seed = 21;
  auto [train_ds, test_ds] = split(normalize(synth_generate(sc)), {0.7, 2, SplitGranularity::kFrame});
  if (check_oracle) {
    auto lr = balanced_accuracy(logistic_oracle(train_ds, test_ds), test_ds.labels()).value;
    EXPECT_GE(lr, 0.85) << "generator signal weaker than the pinned threshold";
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 64;
  cfg.patience = 0;
  cfg.seed = 5;
  auto m = train(train_ds, {}, ModelSpec::mlp(12, 4, {64, 64}), cfg);
  return balanced_accuracy(predict_classes(m, features_tensor(test_ds)), test_ds.labels()).value;
}

TEST(Train, LearnsGeneratorSignalAboveOracleThreshold) {
  EXPECT_GE(held_out_balanced_accuracy(1.5, true), 0.85);
}

TEST(Train, NoLabelSignalStaysNearChance) {
  EXPECT_NEAR(held_out_balanced_accuracy(0.0, false), 0.25, 0.08);
}

TEST(Train, LowPrivacyLevelMatchesAccountantExactly) {
  auto ds = small_synth(13);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 20;
  cfg.patience = 0;
  DpTrainConfig dp;
  dp.target_epsilon = 5.0;
  cfg.dp = dp;
  auto m = train(ds, {}, ModelSpec::mlp(12, 4, {8}), cfg);
  const double delta = 1.0 / (2.0 * ds.size());
  EXPECT_LE(m.meta.privacy_spent->epsilon, 5.0);
  EXPECT_EQ(m.meta.privacy_spent->delta, delta);
  EXPECT_EQ(m.meta.privacy_spent->epsilon,
            accountant::epsilon_after(*m.meta.sampling_rate, *m.meta.noise_multiplier,
                                      m.meta.steps, delta)
                .epsilon);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.seed = 42;
  DpTrainConfig dp;
  dp.target_epsilon = 3.0;
  dp.clip_norm = 2.0;
  cfg.dp = dp;
  auto back = TrainConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.dp->target_epsilon, 3.0);
  EXPECT_FALSE(back.dp->noise_multiplier);
}

}  // namespace
}  // namespace privatexr
