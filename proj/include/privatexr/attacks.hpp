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
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "json.hpp"
#include "privatexr/common.hpp"
#include "privatexr/data.hpp"
#include "privatexr/metrics.hpp"
#include "privatexr/nn.hpp"
#include "privatexr/trainer.hpp"

namespace privatexr {

// ---------------------------------------------------------------------------
// Membership inference (shadow models)

struct MiaConfig {
  int shadow_count = 4;
  // Members per shadow; non-members get the same count.
  int shadow_train_size = 200;
  ModelSpec shadow_spec;
  // The target's training recipe, reused verbatim for every shadow.
  TrainConfig shadow_train;
  std::vector<int> attack_hidden = {32};
  TrainConfig attack_train = [] {
    TrainConfig c;
    c.epochs = 60;
    c.batch_size = 256;
    c.learning_rate = 0.001;
    c.patience = 0;
    return c;
  }();
  std::uint64_t seed = 0;
  // Applied to each shadow's member frames before training, so shadows can
  // mimic a target that was trained on privatized inputs.
  std::function<Dataset(const Dataset&, int shadow)> shadow_transform;
};

struct ShadowModel {
  TrainedModel model;
  std::vector<std::size_t> members;     // indices into the attacker pool
  std::vector<std::size_t> nonmembers;
};

inline Dataset empty_like(const Dataset& ds) { return Dataset{ds.feature_names, ds.class_names, {}, ds.norm_stats}; }

inline std::vector<ShadowModel> train_shadow_ensemble(const Dataset& pool, const MiaConfig& cfg) {
  require(cfg.shadow_count >= 2, ErrorKind::kConfig, "need at least 2 shadow models");
  const auto size = static_cast<std::size_t>(cfg.shadow_train_size);
  require(size >= 1, ErrorKind::kConfig, "shadow_train_size must be positive");
  require(pool.size() >= 2 * size, ErrorKind::kInvalidArgument,
          "attacker pool of " + std::to_string(pool.size()) + " frames is smaller than 2 x " +
              std::to_string(size));
  std::vector<ShadowModel> shadows;
  for (int s = 0; s < cfg.shadow_count; ++s) {
    const std::uint64_t shadow_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(s));
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(derive_seed(shadow_seed, "split"));
    detail::seeded_shuffle(order, rng);
    ShadowModel sm;
    sm.members.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
    sm.nonmembers.assign(order.begin() + static_cast<std::ptrdiff_t>(size),
                         order.begin() + static_cast<std::ptrdiff_t>(2 * size));
    std::sort(sm.members.begin(), sm.members.end());
    std::sort(sm.nonmembers.begin(), sm.nonmembers.end());
    TrainConfig tc = cfg.shadow_train;
    tc.seed = derive_seed(shadow_seed, "train");
    tc.progress_log.reset();
    Dataset members = pool.subset(sm.members);
    if (cfg.shadow_transform) members = cfg.shadow_transform(members, s);
    sm.model = train(members, empty_like(pool), cfg.shadow_spec, tc);
    shadows.push_back(std::move(sm));
  }
  return shadows;
}

// [probabilities sorted descending | cross-entropy | one-hot label]
inline std::vector<std::vector<double>> attack_features(const TrainedModel& model,
                                                        const Dataset& frames) {
  const Network net(model.spec);
  const Tensor x = features_tensor(frames);
  const auto y = frames.labels();
  Tensor proba = predict_proba(net, model.params, x);
  auto losses = per_example_loss(net, model.params, x, y);
  const std::size_t k = net.class_count();
  std::vector<std::vector<double>> out;
  out.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto r = proba.row(i);
    std::vector<double> f(r.begin(), r.end());
    std::sort(f.begin(), f.end(), std::greater<>());
    f.push_back(losses[i]);
    for (std::size_t c = 0; c < k; ++c) f.push_back(static_cast<int>(c) == y[i] ? 1.0 : 0.0);
    out.push_back(std::move(f));
  }
  return out;
}

struct AttackDataset {
  std::vector<std::vector<double>> features;
  std::vector<int> member;  // 1 = in, 0 = out
};

// Assembled in shadow order; members then non-members per shadow.
inline AttackDataset build_attack_dataset(const std::vector<ShadowModel>& shadows,
                                          const Dataset& pool) {
  AttackDataset out;
  for (const auto& s : shadows) {
    for (int in = 1; in >= 0; --in) {
      auto feats = attack_features(s.model, pool.subset(in ? s.members : s.nonmembers));
      for (auto& f : feats) {
        out.features.push_back(std::move(f));
        out.member.push_back(in);
      }
    }
  }
  return out;
}

struct AttackModel {
  TrainedModel classifier;

  // Membership score: attack probability of "member".
  std::vector<double> score(const std::vector<std::vector<double>>& features) const {
    Tensor p = predict_proba(classifier, rows_tensor(features));
    std::vector<double> out(p.rows());
    for (std::size_t i = 0; i < p.rows(); ++i) out[i] = p.at(i, 1);
    return out;
  }
};

inline AttackModel train_attack_model(const AttackDataset& data, const MiaConfig& cfg) {
  require(!data.features.empty(), ErrorKind::kInvalidArgument, "empty attack dataset");
  const std::size_t width = data.features.front().size();
  Dataset ds;
  for (std::size_t j = 0; j < width; ++j) ds.feature_names.push_back("a" + std::to_string(j));
  ds.class_names = {"out", "in"};
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    Frame f;
    f.features = data.features[i];
    f.label = data.member[i];
    ds.frames.push_back(std::move(f));
  }
  ModelSpec spec = ModelSpec::mlp(static_cast<int>(width), 2, cfg.attack_hidden);
  TrainConfig tc = cfg.attack_train;
  tc.seed = derive_seed(cfg.seed, "attack-model");
  tc.dp.reset();
  return AttackModel{train(ds, empty_like(ds), spec, tc)};
}

struct MiaResult {
  double auc = 0.5;
  double auc_sweep = 0.5;
  std::vector<double> member_scores;
  std::vector<double> nonmember_scores;
};

inline MiaResult score_membership(const TrainedModel& target, const Dataset& member_eval,
                                  const Dataset& nonmember_eval, const AttackModel& attack) {
  require(!member_eval.empty() && !nonmember_eval.empty(), ErrorKind::kInvalidArgument,
          "MIA evaluation needs both members and non-members");
  MiaResult r;
  r.member_scores = attack.score(attack_features(target, member_eval));
  r.nonmember_scores = attack.score(attack_features(target, nonmember_eval));
  std::vector<double> scores = r.member_scores;
  scores.insert(scores.end(), r.nonmember_scores.begin(), r.nonmember_scores.end());
  std::vector<int> labels(r.member_scores.size(), 1);
  labels.resize(scores.size(), 0);
  r.auc = auc_mann_whitney(scores, labels);
  r.auc_sweep = auc_threshold_sweep(scores, labels);
  return r;
}

// Shadow ensemble -> attack model -> AUC against the target.
inline MiaResult run_mia(const TrainedModel& target, const Dataset& member_eval,
                         const Dataset& nonmember_eval, const Dataset& attacker_pool,
                         const MiaConfig& cfg) {
  auto shadows = train_shadow_ensemble(attacker_pool, cfg);
  auto attack = train_attack_model(build_attack_dataset(shadows, attacker_pool), cfg);
  return score_membership(target, member_eval, nonmember_eval, attack);
}

// ---------------------------------------------------------------------------
// Re-identification (RBFN identifier)

struct RbfnConfig {
  int centers_per_user = 4;
  double ridge = 1e-3;
  int kmeans_iterations = 20;
  std::uint64_t seed = 0;
};

struct RbfnModel {
  std::vector<std::int64_t> user_ids;         // output class -> user id
  std::vector<std::vector<double>> centers;   // M x d
  std::vector<double> widths;                 // per center
  std::vector<std::vector<double>> weights;   // (M + 1) x U, last row is the bias

  std::vector<double> activations(std::span<const double> x) const {
    std::vector<double> phi(centers.size() + 1);
    for (std::size_t m = 0; m < centers.size(); ++m) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double diff = x[j] - centers[m][j];
        d2 += diff * diff;
      }
      phi[m] = std::exp(-d2 / (2.0 * widths[m] * widths[m]));
    }
    phi.back() = 1.0;
    return phi;
  }

  std::vector<double> predict_proba(std::span<const double> x) const {
    auto phi = activations(x);
    const std::size_t u = user_ids.size();
    std::vector<double> out(u, 0.0);
    for (std::size_t m = 0; m < phi.size(); ++m)
      for (std::size_t c = 0; c < u; ++c) out[c] += phi[m] * weights[m][c];
    const double mx = *std::max_element(out.begin(), out.end());
    double z = 0.0;
    for (double& v : out) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : out) v /= z;
    return out;
  }
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

// Lloyd's algorithm with a fixed iteration count; empty clusters keep their
// previous centroid.
inline std::vector<std::vector<double>> kmeans(const std::vector<std::vector<double>>& points,
                                               std::size_t k, int iterations, Rng& rng) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  seeded_shuffle(order, rng);
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < k; ++c) centers.push_back(points[order[c]]);
  const std::size_t d = points.front().size();
  std::vector<std::size_t> assign(points.size(), 0);
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = INFINITY;
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = sq_dist(points[i], centers[c]);
        if (dist < best) {
          best = dist;
          assign[i] = c;
        }
      }
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }
  return centers;
}

// Solves (A + ridge I) X = B for symmetric positive semi-definite A via Cholesky.
inline std::vector<std::vector<double>> ridge_solve(std::vector<std::vector<double>> a,
                                                    const std::vector<std::vector<double>>& b,
                                                    double ridge) {
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) a[i][i] += ridge;
  for (std::size_t j = 0; j < n; ++j) {
    double s = a[j][j];
    for (std::size_t k = 0; k < j; ++k) s -= a[j][k] * a[j][k];
    require(s > 0.0, ErrorKind::kRuntime, "ridge system is not positive definite");
    a[j][j] = std::sqrt(s);
    for (std::size_t i = j + 1; i < n; ++i) {
      double t = a[i][j];
      for (std::size_t k = 0; k < j; ++k) t -= a[i][k] * a[j][k];
      a[i][j] = t / a[j][j];
    }
  }
  const std::size_t cols = b.front().size();
  std::vector<std::vector<double>> x(n, std::vector<double>(cols, 0.0));
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double t = b[i][c];
      for (std::size_t k = 0; k < i; ++k) t -= a[i][k] * y[k];
      y[i] = t / a[i][i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double t = y[i];
      for (std::size_t k = i + 1; k < n; ++k) t -= a[k][i] * x[k][c];
      x[i][c] = t / a[i][i];
    }
  }
  return x;
}

}  // namespace detail

// Per-user k-means centers, one shared width (median pairwise center
// distance), ridge-regressed output weights onto one-hot identities.
inline RbfnModel train_rbfn(const Dataset& train_ds, const RbfnConfig& cfg) {
  require(cfg.centers_per_user >= 1, ErrorKind::kConfig, "centers_per_user must be positive");
  require(!train_ds.empty(), ErrorKind::kInvalidArgument, "empty RBFN training set");
  std::map<std::int64_t, std::vector<std::vector<double>>> by_user;
  for (const auto& f : train_ds.frames) by_user[f.user_id].push_back(f.features);
  const auto c = static_cast<std::size_t>(cfg.centers_per_user);
  RbfnModel model;
  Rng rng = make_rng(cfg.seed);
  for (const auto& [user, points] : by_user) {
    require(points.size() >= c, ErrorKind::kInvalidArgument,
            "user " + std::to_string(user) + " has " + std::to_string(points.size()) +
                " training frames, fewer than " + std::to_string(c) + " centers");
    model.user_ids.push_back(user);
    for (auto& center : detail::kmeans(points, c, cfg.kmeans_iterations, rng))
      model.centers.push_back(std::move(center));
  }
  std::vector<double> dists;
  for (std::size_t a = 0; a < model.centers.size(); ++a)
    for (std::size_t b = a + 1; b < model.centers.size(); ++b)
      dists.push_back(std::sqrt(detail::sq_dist(model.centers[a], model.centers[b])));
  double width = 1.0;
  if (!dists.empty()) {
    auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    width = *mid;
    if (dists.size() % 2 == 0) {
      const double lower = *std::max_element(dists.begin(), mid);
      width = 0.5 * (width + lower);
    }
    if (!(width > 0.0)) width = 1.0;
  }
  model.widths.assign(model.centers.size(), width);

  std::map<std::int64_t, std::size_t> column;
  for (std::size_t i = 0; i < model.user_ids.size(); ++i) column[model.user_ids[i]] = i;
  const std::size_t m = model.centers.size() + 1;
  const std::size_t u = model.user_ids.size();
  std::vector<std::vector<double>> gram(m, std::vector<double>(m, 0.0));
  std::vector<std::vector<double>> rhs(m, std::vector<double>(u, 0.0));
  for (const auto& f : train_ds.frames) {
    auto phi = model.activations(f.features);
    const std::size_t col = column[f.user_id];
    for (std::size_t a = 0; a < m; ++a) {
      rhs[a][col] += phi[a];
      for (std::size_t b = 0; b < m; ++b) gram[a][b] += phi[a] * phi[b];
    }
  }
  model.weights = detail::ridge_solve(std::move(gram), rhs, cfg.ridge);
  return model;
}

// Per user: average the frame probabilities within each stimulus, take the
// argmax per stimulus, then a majority vote over stimuli (ties go to the
// larger summed average probability, then the smaller user id). Returns the
// fraction of users identified correctly.
inline double identification_rate(const RbfnModel& model, const Dataset& test) {
  require(!test.empty(), ErrorKind::kInvalidArgument, "empty RDA test set");
  const std::size_t u = model.user_ids.size();
  std::map<std::int64_t, std::map<std::int64_t, std::pair<std::vector<double>, std::size_t>>> groups;
  for (const auto& f : test.frames) {
    auto p = model.predict_proba(f.features);
    auto& g = groups[f.user_id][f.stimulus_id];
    if (g.first.empty()) g.first.assign(u, 0.0);
    for (std::size_t c = 0; c < u; ++c) g.first[c] += p[c];
    ++g.second;
  }
  std::size_t correct = 0;
  for (const auto& [user, stimuli] : groups) {
    std::vector<int> votes(u, 0);
    std::vector<double> mass(u, 0.0);
    for (const auto& [stim, g] : stimuli) {
      std::vector<double> avg = g.first;
      for (double& v : avg) v /= static_cast<double>(g.second);
      const auto best = static_cast<std::size_t>(std::max_element(avg.begin(), avg.end()) - avg.begin());
      ++votes[best];
      for (std::size_t c = 0; c < u; ++c) mass[c] += avg[c];
    }
    std::size_t winner = 0;
    for (std::size_t c = 1; c < u; ++c) {
      if (votes[c] > votes[winner] || (votes[c] == votes[winner] && mass[c] > mass[winner]))
        winner = c;
    }
    if (model.user_ids[winner] == user) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(groups.size());
}

struct RdaConfig {
  int runs = 30;
  double train_fraction = 0.70;
  RbfnConfig rbfn;
  std::uint64_t seed = 0;
};

struct RdaResult {
  double rate = 0.0;
  std::vector<double> per_run;
};

// Optional transform applied to each run's test split (e.g. feature noise).
using TestTransform = std::function<Dataset(const Dataset&, int run)>;

// R runs of: re-split frames, retrain the identifier, score identification.
inline RdaResult run_rda(const Dataset& ds, const RdaConfig& cfg,
                         const TestTransform& transform = nullptr) {
  require(cfg.runs >= 1, ErrorKind::kConfig, "runs must be positive");
  RdaResult out;
  for (int r = 0; r < cfg.runs; ++r) {
    const std::uint64_t run_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(r));
    auto [train_ds, test_ds] =
        split(ds, SplitSpec{cfg.train_fraction, derive_seed(run_seed, "split"), SplitGranularity::kFrame});
    RbfnConfig rc = cfg.rbfn;
    rc.seed = derive_seed(run_seed, "rbfn");
    auto model = train_rbfn(train_ds, rc);
    if (transform) test_ds = transform(test_ds, r);
    out.per_run.push_back(identification_rate(model, test_ds));
  }
  out.rate = std::accumulate(out.per_run.begin(), out.per_run.end(), 0.0) /
             static_cast<double>(out.per_run.size());
  return out;
}

}  // namespace privatexr
