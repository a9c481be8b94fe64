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
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "privatexr/common.hpp"

// Renyi DP accounting for the Poisson-subsampled Gaussian mechanism at
// integer orders.
namespace privatexr::accountant {

struct RdpCurve {
  std::vector<int> orders;
  std::vector<double> values;

  bool operator==(const RdpCurve&) const = default;
};

struct PrivacySpec {
  double epsilon = 1.0;
  double delta = 1e-5;
};

struct EpsilonResult {
  double epsilon = 0.0;
  int order = 0;
};

inline std::vector<int> default_orders() {
  std::vector<int> orders;
  for (int a = 2; a <= 64; ++a) orders.push_back(a);
  return orders;
}

namespace detail {

inline double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace detail

// eps_alpha = log( sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2)) ) / (a-1),
// summed with log-sum-exp.
inline double rdp_one_step(double q, double sigma, int order) {
  require(order >= 2, ErrorKind::kInvalidArgument, "Renyi order must be an integer >= 2");
  require(q >= 0.0 && q <= 1.0, ErrorKind::kInvalidArgument, "sampling rate must lie in [0, 1]");
  require(sigma > 0.0, ErrorKind::kInvalidArgument, "noise multiplier must be positive");
  if (q == 0.0) return 0.0;
  const double log_q = std::log(q);
  const double log_1mq = q == 1.0 ? -std::numeric_limits<double>::infinity() : std::log1p(-q);
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(order) + 1);
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= order; ++k) {
    if (q == 1.0 && k < order) continue;
    const double kk = static_cast<double>(k);
    double t = detail::log_binomial(order, k) + kk * log_q +
               static_cast<double>(order - k) * (k == order ? 0.0 : log_1mq) +
               kk * (kk - 1.0) / (2.0 * sigma * sigma);
    terms.push_back(t);
    mx = std::max(mx, t);
  }
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - mx);
  const double log_moment = mx + std::log(sum);
  return std::max(0.0, log_moment / static_cast<double>(order - 1));
}

// Non-integer orders are rejected rather than rounded.
inline double rdp_one_step(double q, double sigma, double order) {
  require(std::floor(order) == order, ErrorKind::kInvalidArgument,
          "fractional Renyi orders are not supported");
  return rdp_one_step(q, sigma, static_cast<int>(order));
}

inline RdpCurve rdp_curve(double q, double sigma, const std::vector<int>& orders = default_orders()) {
  RdpCurve c{orders, {}};
  c.values.reserve(orders.size());
  for (int a : orders) c.values.push_back(rdp_one_step(q, sigma, a));
  return c;
}

inline RdpCurve compose(const RdpCurve& curve, std::int64_t steps) {
  require(steps >= 0, ErrorKind::kInvalidArgument, "step count must be non-negative");
  RdpCurve out = curve;
  for (double& v : out.values) v *= static_cast<double>(steps);
  return out;
}

// Sum of two curves over the same orders (heterogeneous composition).
inline RdpCurve combine(const RdpCurve& a, const RdpCurve& b) {
  require(a.orders == b.orders, ErrorKind::kInvalidArgument, "curves use different orders");
  RdpCurve out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += b.values[i];
  return out;
}

inline EpsilonResult to_epsilon(const RdpCurve& curve, double delta) {
  require(!curve.orders.empty() && curve.orders.size() == curve.values.size(),
          ErrorKind::kInvalidArgument, "empty RDP curve");
  require(delta > 0.0 && delta < 1.0, ErrorKind::kInvalidArgument, "delta must lie in (0, 1)");
  EpsilonResult best{std::numeric_limits<double>::infinity(), 0};
  const double log_inv_delta = std::log(1.0 / delta);
  for (std::size_t i = 0; i < curve.orders.size(); ++i) {
    const double eps = curve.values[i] + log_inv_delta / static_cast<double>(curve.orders[i] - 1);
    if (eps < best.epsilon) best = {eps, curve.orders[i]};
  }
  return best;
}

// Epsilon after `steps` compositions of one subsampled Gaussian step.
inline EpsilonResult epsilon_after(double q, double sigma, std::int64_t steps, double delta,
                                   const std::vector<int>& orders = default_orders()) {
  return to_epsilon(compose(rdp_curve(q, sigma, orders), steps), delta);
}

inline constexpr double kSigmaLow = 0.3;
inline constexpr double kSigmaHigh = 100.0;

// Smallest noise multiplier (to within 0.1% of the budget) for which the
// composed mechanism meets `target`.
inline double find_sigma(const PrivacySpec& target, double q, std::int64_t steps,
                         const std::vector<int>& orders = default_orders()) {
  require(target.epsilon > 0.0, ErrorKind::kInvalidArgument, "target epsilon must be positive");
  auto eps_at = [&](double sigma) {
    return epsilon_after(q, sigma, steps, target.delta, orders).epsilon;
  };
  double hi = kSigmaHigh;
  if (eps_at(hi) > target.epsilon) {
    fail(ErrorKind::kInfeasible,
         "target epsilon " + std::to_string(target.epsilon) +
             " is unreachable with sigma in [0.3, 100]");
  }
  double lo = kSigmaLow;
  if (eps_at(lo) <= target.epsilon) return lo;
  // Invariant: eps(lo) > target >= eps(hi).
  // Bisect to a 1e-7 relative width in sigma, which lands well inside the
  // [0.999 target, target] acceptance band.
  for (int iter = 0; iter < 200 && hi - lo > 1e-7 * hi; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (eps_at(mid) > target.epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

}  // namespace privatexr::accountant
