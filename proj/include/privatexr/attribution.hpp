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
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "privatexr/common.hpp"
#include "privatexr/nn.hpp"

namespace privatexr {

using Coalition = std::vector<std::uint8_t>;  // 1 = feature taken from x

// A cooperative game over player_count() players, evaluated a batch of
// coalitions at a time.
template <typename G>
concept CoalitionGame = requires(const G& g, const std::vector<Coalition>& cs) {
  { g.player_count() } -> std::convertible_to<std::size_t>;
  { g.evaluate(cs) } -> std::same_as<std::vector<double>>;
};

// v(S) = model probability of x's predicted class on the hybrid input that
// takes features in S from x and the rest from the baseline. The class is
// fixed once from the unmasked input.
class ModelValueFunction {
 public:
  ModelValueFunction(const Network& net, std::span<const double> params,
                     std::vector<double> x, std::vector<double> baseline)
      : net_(&net), params_(params), x_(std::move(x)), baseline_(std::move(baseline)) {
    require(x_.size() == baseline_.size(), ErrorKind::kDimension,
            "input and baseline lengths differ");
    Tensor one = Tensor::zeros({1, x_.size()});
    std::copy(x_.begin(), x_.end(), one.values.begin());
    Tensor logits = net_->logits(params_, one);
    target_class_ = static_cast<std::size_t>(
        std::max_element(logits.values.begin(), logits.values.end()) - logits.values.begin());
  }

  std::size_t player_count() const { return x_.size(); }
  std::size_t target_class() const { return target_class_; }

  std::vector<double> evaluate(const std::vector<Coalition>& coalitions) const {
    const std::size_t d = x_.size();
    Tensor batch = Tensor::zeros({coalitions.size(), d});
    for (std::size_t i = 0; i < coalitions.size(); ++i) {
      auto row = batch.row(i);
      for (std::size_t j = 0; j < d; ++j) row[j] = coalitions[i][j] ? x_[j] : baseline_[j];
    }
    Tensor proba = predict_proba(*net_, params_, batch);
    std::vector<double> out(coalitions.size());
    for (std::size_t i = 0; i < coalitions.size(); ++i) out[i] = proba.at(i, target_class_);
    return out;
  }

 private:
  const Network* net_;
  std::span<const double> params_;
  std::vector<double> x_;
  std::vector<double> baseline_;
  std::size_t target_class_ = 0;
};

// Single-coalition evaluation of the model game.
inline double value_function(const TrainedModel& model, std::span<const double> x,
                             std::span<const double> baseline, const std::vector<int>& subset) {
  const Network net(model.spec);
  ModelValueFunction v(net, model.params, {x.begin(), x.end()},
                       {baseline.begin(), baseline.end()});
  Coalition c(x.size(), 0);
  for (int j : subset) {
    require(j >= 0 && static_cast<std::size_t>(j) < x.size(), ErrorKind::kInvalidArgument,
            "coalition member out of range");
    c[static_cast<std::size_t>(j)] = 1;
  }
  return v.evaluate({c}).front();
}

inline constexpr std::size_t kMaxExactPlayers = 20;

// phi_i = sum over S not containing i of |S|!(d-|S|-1)!/d! [v(S+i) - v(S)],
// from a full table of 2^d coalition values.
template <CoalitionGame G>
std::vector<double> exact_shapley(const G& game) {
  const std::size_t d = game.player_count();
  require(d >= 1, ErrorKind::kInvalidArgument, "game has no players");
  require(d <= kMaxExactPlayers, ErrorKind::kInvalidArgument,
          "exact Shapley enumeration is limited to " + std::to_string(kMaxExactPlayers) +
              " features; use sampled_shapley for d=" + std::to_string(d));
  const std::size_t total = std::size_t{1} << d;
  std::vector<double> table(total);
  constexpr std::size_t kChunk = 4096;
  std::vector<Coalition> chunk;
  for (std::size_t start = 0; start < total; start += kChunk) {
    const std::size_t end = std::min(total, start + kChunk);
    chunk.assign(end - start, Coalition(d, 0));
    for (std::size_t m = start; m < end; ++m)
      for (std::size_t j = 0; j < d; ++j) chunk[m - start][j] = (m >> j) & 1U;
    auto values = game.evaluate(chunk);
    std::copy(values.begin(), values.end(), table.begin() + static_cast<std::ptrdiff_t>(start));
  }
  // weight(s) = 1 / (d * C(d-1, s))
  std::vector<double> weight(d);
  for (std::size_t s = 0; s < d; ++s) {
    double binom = 1.0;
    for (std::size_t k = 1; k <= s; ++k)
      binom = binom * static_cast<double>(d - 1 - s + k) / static_cast<double>(k);
    weight[s] = 1.0 / (static_cast<double>(d) * binom);
  }
  std::vector<double> phi(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    for (std::size_t m = 0; m < total; ++m) {
      if (m & bit) continue;
      const auto s = static_cast<std::size_t>(std::popcount(m));
      phi[i] += weight[s] * (table[m | bit] - table[m]);
    }
  }
  return phi;
}

// Monte-Carlo permutation estimator; every sampled permutation is paired
// with its reverse.
template <CoalitionGame G>
std::vector<double> sampled_shapley(const G& game, std::size_t permutations, std::uint64_t seed) {
  require(permutations >= 1, ErrorKind::kInvalidArgument, "need at least one permutation");
  const std::size_t d = game.player_count();
  Rng rng = make_rng(seed);
  std::vector<double> phi(d, 0.0);
  std::vector<std::size_t> perm(d);
  std::vector<Coalition> chain;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::iota(perm.begin(), perm.end(), 0);
    detail::seeded_shuffle(perm, rng);
    chain.clear();
    for (int dir = 0; dir < 2; ++dir) {
      Coalition c(d, 0);
      chain.push_back(c);
      for (std::size_t k = 0; k < d; ++k) {
        c[perm[dir == 0 ? k : d - 1 - k]] = 1;
        chain.push_back(c);
      }
    }
    auto v = game.evaluate(chain);
    for (int dir = 0; dir < 2; ++dir) {
      const std::size_t base = static_cast<std::size_t>(dir) * (d + 1);
      for (std::size_t k = 0; k < d; ++k)
        phi[perm[dir == 0 ? k : d - 1 - k]] += v[base + k + 1] - v[base + k];
    }
  }
  for (double& x : phi) x /= static_cast<double>(2 * permutations);
  return phi;
}

struct ExactMode {};
struct SampledMode {
  std::size_t permutations = 200;
  std::uint64_t seed = 0;
};
using AttributionMode = std::variant<ExactMode, SampledMode>;

struct AttributionReport {
  std::vector<std::vector<double>> per_sample_phi;
  std::vector<double> baseline;
  std::string value_kind = "probability_of_predicted_class";
};

struct GlobalImportance {
  std::vector<double> mean_abs_phi;
  std::vector<int> ranking;  // descending mean |phi|, ties by ascending index
};

// Baseline for normalized data: the feature means, i.e. zeros.
inline std::vector<double> zero_baseline(std::size_t d) { return std::vector<double>(d, 0.0); }

inline AttributionReport explain(const TrainedModel& model, const Tensor& samples,
                                 const std::vector<double>& baseline, const AttributionMode& mode) {
  require(samples.rows() > 0, ErrorKind::kInvalidArgument, "no samples to explain");
  require(samples.rank() == 2, ErrorKind::kDimension,
          "attribution explains per-frame feature vectors (n x d)");
  const Network net(model.spec);
  AttributionReport report;
  report.baseline = baseline;
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    auto row = samples.row(i);
    ModelValueFunction v(net, model.params, {row.begin(), row.end()}, baseline);
    if (std::holds_alternative<ExactMode>(mode)) {
      report.per_sample_phi.push_back(exact_shapley(v));
    } else {
      const auto& s = std::get<SampledMode>(mode);
      report.per_sample_phi.push_back(sampled_shapley(v, s.permutations, derive_seed(s.seed, i)));
    }
  }
  return report;
}

inline std::vector<int> rank_descending(const std::vector<double>& scores) {
  std::vector<int> ranking(scores.size());
  std::iota(ranking.begin(), ranking.end(), 0);
  std::stable_sort(ranking.begin(), ranking.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return ranking;
}

inline GlobalImportance global_importance(const std::vector<std::vector<double>>& phi) {
  require(!phi.empty(), ErrorKind::kInvalidArgument, "no attribution rows");
  const std::size_t d = phi.front().size();
  GlobalImportance gi;
  gi.mean_abs_phi.assign(d, 0.0);
  for (const auto& row : phi)
    for (std::size_t j = 0; j < d; ++j) gi.mean_abs_phi[j] += std::abs(row[j]);
  for (double& m : gi.mean_abs_phi) m /= static_cast<double>(phi.size());
  gi.ranking = rank_descending(gi.mean_abs_phi);
  return gi;
}

inline GlobalImportance global_importance(const TrainedModel& model, const Tensor& samples,
                                          const std::vector<double>& baseline,
                                          const AttributionMode& mode) {
  return global_importance(explain(model, samples, baseline, mode).per_sample_phi);
}

// First ceil(d/4) features of the ranking.
inline std::vector<int> select_top_quarter(const GlobalImportance& gi, std::size_t d) {
  require(d >= 1, ErrorKind::kInvalidArgument, "need at least one feature");
  require(gi.ranking.size() == d, ErrorKind::kDimension, "ranking length differs from d");
  const std::size_t count = (d + 3) / 4;
  return {gi.ranking.begin(), gi.ranking.begin() + static_cast<std::ptrdiff_t>(count)};
}

inline nlohmann::json importance_to_json(const GlobalImportance& gi,
                                         const std::vector<std::string>& names) {
  nlohmann::json ranked = nlohmann::json::array();
  for (int j : gi.ranking) {
    const auto u = static_cast<std::size_t>(j);
    ranked.push_back({{"index", j},
                      {"name", u < names.size() ? names[u] : std::to_string(j)},
                      {"mean_abs_phi", gi.mean_abs_phi[u]}});
  }
  return {{"ranking", gi.ranking}, {"mean_abs_phi", gi.mean_abs_phi}, {"ranked_features", ranked}};
}

}  // namespace privatexr
