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

// Test-only oracles shared by the unit and acceptance suites. Nothing here
// calls into the code path it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "privatexr/attribution.hpp"
#include "privatexr/data.hpp"
#include "privatexr/nn.hpp"

namespace privatexr::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t params = 0;
};

// Central differences of the mean batch loss, h = 1e-5. Relative error per
// coordinate is |a - n| / max(|a|, |n|, floor); the floor keeps coordinates
// whose true gradient is ~0 from dividing round-off by round-off.
inline GradCheck gradient_check(const ModelSpec& spec, const Tensor& batch,
                                const std::vector<int>& labels, std::uint64_t seed,
                                double floor = 1e-6) {
  const Network net(spec);
  std::vector<double> params = net.init_params(seed);
  // Perturb biases and norm parameters away from their init constants.
  std::mt19937_64 rng(seed ^ 0xabcdefULL);
  std::normal_distribution<double> n01(0.0, 0.1);
  for (double& p : params) p += n01(rng);
  auto analytic = loss_and_grads(net, params, batch, labels, Reduction::kMean).grad;
  auto loss_at = [&](const std::vector<double>& p) {
    auto l = per_example_loss(net, p, batch, labels);
    double s = 0.0;
    for (double v : l) s += v;
    return s / static_cast<double>(l.size());
  };
  GradCheck out;
  out.params = params.size();
  const double h = 1e-5;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params;
    p[i] = params[i] + h;
    const double up = loss_at(p);
    p[i] = params[i] - h;
    const double down = loss_at(p);
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
  }
  return out;
}

inline Tensor random_batch(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (double& v : t.values) v = n01(rng);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> out(n);
  for (int& y : out) y = u(rng);
  return out;
}

// Specs used by the gradient oracle: d = 6, fewer than 5,000 parameters.
inline ModelSpec gradcheck_mlp() { return ModelSpec::mlp(6, 3, {16, 12}); }
inline ModelSpec gradcheck_conv() {
  return ModelSpec::conv1d(6, 3, ConvSpec{8, 3, 1, 1}, {10});
}
inline ModelSpec gradcheck_attn() {
  return ModelSpec::attn_encoder(6, 3, AttnSpec{16, 32, 2}, {});
}

using Big = boost::multiprecision::cpp_bin_float_50;

// Direct (non-log-space) evaluation of the subsampled Gaussian moment at
// 50 decimal digits.
inline Big oracle_rdp(double q, double sigma, int order) {
  const Big bq = q, bs = sigma;
  Big total = 0;
  for (int k = 0; k <= order; ++k) {
    Big binom = 1;
    for (int i = 1; i <= k; ++i) binom = binom * (order - k + i) / i;
    total += binom * boost::multiprecision::pow(bq, k) *
             boost::multiprecision::pow(Big(1) - bq, order - k) *
             boost::multiprecision::exp(Big(k) * (k - 1) / (2 * bs * bs));
  }
  return boost::multiprecision::log(total) / (order - 1);
}

inline double oracle_epsilon(double q, double sigma, std::int64_t steps, double delta) {
  Big best = 1e300;
  for (int a = 2; a <= 64; ++a) {
    Big e = steps * oracle_rdp(q, sigma, a) + boost::multiprecision::log(1 / Big(delta)) / (a - 1);
    if (e < best) best = e;
  }
  return static_cast<double>(best);
}

// delta(sigma) of the Gaussian mechanism, evaluated at 50 digits.
inline Big oracle_delta(double epsilon, double sigma, double sensitivity) {
  using boost::multiprecision::erfc;
  using boost::multiprecision::exp;
  using boost::multiprecision::sqrt;
  const Big e = epsilon, s = sigma, d = sensitivity;
  auto phi = [](const Big& x) { return erfc(-x / sqrt(Big(2))) / 2; };
  return phi(d / (2 * s) - e * s / d) - exp(e) * phi(-d / (2 * s) - e * s / d);
}

// Nearest-centroid identifier used to pin the identity-signal strength:
// user centroids from 70% of the frames, then per (user, stimulus) the mean
// test frame is assigned to the closest centroid.
inline double nearest_centroid_rate(const Dataset& ds, std::uint64_t seed) {
  auto [train, test] = split(ds, {0.7, seed, SplitGranularity::kFrame});
  std::map<std::int64_t, std::pair<std::vector<double>, int>> cent;
  for (auto& f : train.frames) {
    auto& c = cent[f.user_id];
    if (c.first.empty()) c.first.assign(f.features.size(), 0.0);
    for (std::size_t j = 0; j < f.features.size(); ++j) c.first[j] += f.features[j];
    ++c.second;
  }
  std::map<std::pair<std::int64_t, std::int64_t>, std::pair<std::vector<double>, int>> groups;
  for (auto& f : test.frames) {
    auto& g = groups[{f.user_id, f.stimulus_id}];
    if (g.first.empty()) g.first.assign(f.features.size(), 0.0);
    for (std::size_t j = 0; j < f.features.size(); ++j) g.first[j] += f.features[j];
    ++g.second;
  }
  int hits = 0;
  for (auto& [key, g] : groups) {
    double best = INFINITY;
    std::int64_t who = -1;
    for (auto& [u, c] : cent) {
      double d2 = 0;
      for (std::size_t j = 0; j < g.first.size(); ++j) {
        const double diff = g.first[j] / g.second - c.first[j] / c.second;
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        who = u;
      }
    }
    hits += who == key.first;
  }
  return static_cast<double>(hits) / groups.size();
}

inline TrainedModel random_mlp(std::size_t d, std::uint64_t seed, std::vector<int> hidden = {16, 8}) {
  TrainedModel m;
  m.spec = ModelSpec::mlp(static_cast<int>(d), 3, std::move(hidden));
  m.params = init_params(m.spec, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& p : m.params) p += n(rng);  // non-zero biases too
  return m;
}

inline std::vector<double> random_vec(std::size_t d, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(d);
  for (double& x : v) x = n(rng);
  return v;
}

// v(S) = c + sum_{i in S} w_i x_i + sum_{i not in S} w_i b_i, the logit of a
// linear score model.
struct LinearGame {
  std::vector<double> w, x, b;
  double c = 0.3;
  std::size_t player_count() const { return w.size(); }
  std::vector<double> evaluate(const std::vector<Coalition>& cs) const {
    std::vector<double> out;
    for (const auto& s : cs) {
      double v = c;
      for (std::size_t i = 0; i < w.size(); ++i) v += w[i] * (s[i] ? x[i] : b[i]);
      out.push_back(v);
    }
    return out;
  }
};

// Logit of the predicted class of a network with no hidden layer.
struct LogitGame {
  const Network* net;
  std::span<const double> params;
  std::vector<double> x, b;
  std::size_t cls;
  std::size_t player_count() const { return x.size(); }
  std::vector<double> evaluate(const std::vector<Coalition>& cs) const {
    std::vector<std::vector<double>> rows;
    for (const auto& s : cs) {
      std::vector<double> r(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) r[i] = s[i] ? x[i] : b[i];
      rows.push_back(r);
    }
    Tensor l = net->logits(params, rows_tensor(rows));
    std::vector<double> out;
    for (std::size_t i = 0; i < cs.size(); ++i) out.push_back(l.at(i, cls));
    return out;
  }
};

}  // namespace privatexr::testing
