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
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "privatexr/common.hpp"
#include "privatexr/data.hpp"

namespace privatexr {

// ---------------------------------------------------------------------------
// Analytic Gaussian mechanism

namespace detail {

// log Phi(x), accurate far into the lower tail.
inline double log_normal_cdf(double x) {
  if (x > -20.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) +
                        105.0 / (x2 * x2 * x2 * x2);
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace detail

// delta(sigma) = Phi(D/(2s) - e s/D) - exp(e) Phi(-D/(2s) - e s/D).
// It depends on sigma and sensitivity only through their ratio.
inline double analytic_gaussian_delta(double epsilon, double sigma, double sensitivity) {
  const double r = sigma / sensitivity;
  const double a = 0.5 / r - epsilon * r;
  const double b = -0.5 / r - epsilon * r;
  return detail::normal_cdf(a) - std::exp(epsilon + detail::log_normal_cdf(b));
}

inline constexpr double kCalibrationTolerance = 1e-9;

// Smallest sigma (relative tolerance 1e-9, rounded up) meeting (epsilon, delta)-DP
// for the given L2 sensitivity.
inline double calibrate_sigma(double epsilon, double delta, double sensitivity) {
  require(epsilon > 0.0, ErrorKind::kInvalidArgument, "epsilon must be positive");
  require(delta > 0.0 && delta < 1.0, ErrorKind::kInvalidArgument, "delta must lie in (0, 1)");
  require(sensitivity > 0.0, ErrorKind::kInvalidArgument, "sensitivity must be positive");
  auto ok = [&](double r) { return analytic_gaussian_delta(epsilon, r, 1.0) <= delta; };
  double hi = 1.0;
  while (!ok(hi)) hi *= 2.0;
  double lo = hi / 2.0;
  while (ok(lo)) {
    hi = lo;
    lo /= 2.0;
    require(lo > 1e-300, ErrorKind::kRuntime, "sigma calibration underflow");
  }
  // Invariant: !ok(lo), ok(hi).
  while (hi - lo > kCalibrationTolerance * hi) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? hi : lo) = mid;
  }
  // One extra tolerance step keeps the result on the safe side of roundoff.
  return hi * (1.0 + kCalibrationTolerance) * sensitivity;
}

// ---------------------------------------------------------------------------
// Input-level feature privatization

enum class DpMode { kOff, kFull, kSelective };

inline std::string dp_mode_name(DpMode m) {
  switch (m) {
    case DpMode::kOff: return "off";
    case DpMode::kFull: return "full";
    case DpMode::kSelective: return "selective";
  }
  return "?";
}

inline DpMode parse_dp_mode(const std::string& s) {
  if (s == "off") return DpMode::kOff;
  if (s == "full") return DpMode::kFull;
  if (s == "selective") return DpMode::kSelective;
  fail(ErrorKind::kConfig, "unknown feature DP mode \"" + s + "\"");
}

// Named privacy levels. "high" privacy is the smallest budget.
inline std::map<std::string, double> default_privacy_levels() {
  return {{"low", 5.0}, {"medium", 3.0}, {"high", 1.0}};
}

struct FeatureDpSpec {
  DpMode mode = DpMode::kOff;
  std::vector<int> selected;
  std::map<std::string, double> levels = default_privacy_levels();
  std::string level = "high";
  double delta = 1e-5;
  double clamp = 3.0;

  double epsilon() const {
    auto it = levels.find(level);
    if (it == levels.end()) fail(ErrorKind::kConfig, "unknown privacy level \"" + level + "\"");
    return it->second;
  }

  void validate(std::size_t d) const {
    require(delta > 0.0 && delta < 1.0, ErrorKind::kConfig, "delta must lie in (0, 1)");
    require(clamp > 0.0, ErrorKind::kConfig, "clamp bound must be positive");
    for (const auto& [name, eps] : levels)
      require(eps > 0.0, ErrorKind::kConfig, "level \"" + name + "\" has non-positive epsilon");
    if (mode == DpMode::kOff) return;
    epsilon();
    if (mode == DpMode::kSelective) {
      require(!selected.empty(), ErrorKind::kInvalidArgument,
              "selective mode needs a non-empty feature selection");
      for (int j : selected)
        require(j >= 0 && static_cast<std::size_t>(j) < d, ErrorKind::kInvalidArgument,
                "selected feature " + std::to_string(j) + " out of range");
    }
  }

  // Targeted feature indices, ascending and unique.
  std::vector<int> targets(std::size_t d) const {
    std::vector<int> t;
    if (mode == DpMode::kFull) {
      for (std::size_t j = 0; j < d; ++j) t.push_back(static_cast<int>(j));
    } else if (mode == DpMode::kSelective) {
      t = selected;
      std::sort(t.begin(), t.end());
      t.erase(std::unique(t.begin(), t.end()), t.end());
    }
    return t;
  }

  static FeatureDpSpec from_json(const nlohmann::json& j) {
    FeatureDpSpec s;
    s.mode = parse_dp_mode(j.value("mode", std::string("off")));
    s.selected = j.value("selected", s.selected);
    if (j.contains("levels")) s.levels = j.at("levels").get<std::map<std::string, double>>();
    s.level = j.value("level", s.level);
    s.delta = j.value("delta", s.delta);
    s.clamp = j.value("clamp", s.clamp);
    return s;
  }

  nlohmann::json to_json() const {
    return {{"mode", dp_mode_name(mode)}, {"selected", selected}, {"levels", levels},
            {"level", level},             {"delta", delta},       {"clamp", clamp}};
  }
};

// Splits `total` into `parts` shares of total/parts, the last share taking the
// rounding remainder, so that summing the shares left to right gives `total`
// exactly.
inline std::vector<double> split_budget(double total, std::size_t parts) {
  std::vector<double> shares(parts, total / static_cast<double>(parts));
  if (parts > 1) {
    double head = 0.0;
    for (std::size_t i = 0; i + 1 < parts; ++i) head += shares[i];
    shares.back() = total - head;
  }
  return shares;
}

// A FeatureDpSpec resolved against a feature count: targets, per-feature
// budgets and calibrated noise scales.
class FeaturePrivatizer {
 public:
  FeaturePrivatizer(const FeatureDpSpec& spec, std::size_t d) : spec_(spec), d_(d) {
    spec_.validate(d);
    targets_ = spec_.targets(d);
    if (targets_.empty()) return;
    per_feature_epsilon_ = split_budget(spec_.epsilon(), targets_.size());
    per_feature_delta_ = split_budget(spec_.delta, targets_.size());
    const double sensitivity = 2.0 * spec_.clamp;
    sigma_.resize(targets_.size());
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      if (i > 0 && per_feature_epsilon_[i] == per_feature_epsilon_[i - 1] &&
          per_feature_delta_[i] == per_feature_delta_[i - 1]) {
        sigma_[i] = sigma_[i - 1];
      } else {
        sigma_[i] = calibrate_sigma(per_feature_epsilon_[i], per_feature_delta_[i], sensitivity);
      }
    }
  }

  const FeatureDpSpec& spec() const { return spec_; }
  const std::vector<int>& targets() const { return targets_; }
  const std::vector<double>& per_feature_epsilon() const { return per_feature_epsilon_; }
  const std::vector<double>& per_feature_delta() const { return per_feature_delta_; }
  const std::vector<double>& sigma() const { return sigma_; }

  // In place. Draws one normal per targeted feature, in ascending index order.
  void apply(std::span<double> x, Rng& rng) const {
    require(x.size() == d_, ErrorKind::kDimension,
            "expected " + std::to_string(d_) + " features, got " + std::to_string(x.size()));
    const double b = spec_.clamp;
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      double& v = x[static_cast<std::size_t>(targets_[i])];
      v = std::clamp(v, -b, b);
      std::normal_distribution<double> noise(0.0, sigma_[i]);
      v += noise(rng);
    }
  }

  std::vector<double> privatize(std::span<const double> x, Rng& rng) const {
    std::vector<double> out(x.begin(), x.end());
    apply(out, rng);
    return out;
  }

  nlohmann::json audit() const {
    return {{"mode", dp_mode_name(spec_.mode)},
            {"level", spec_.mode == DpMode::kOff ? nlohmann::json(nullptr)
                                                 : nlohmann::json(spec_.level)},
            {"epsilon_total", spec_.mode == DpMode::kOff ? nlohmann::json(nullptr)
                                                         : nlohmann::json(spec_.epsilon())},
            {"delta_total", spec_.delta},
            {"selected", targets_},
            {"per_feature_epsilon", per_feature_epsilon_},
            {"per_feature_delta", per_feature_delta_},
            {"sigma_feature", sigma_},
            {"B", spec_.clamp},
            {"sensitivity", 2.0 * spec_.clamp}};
  }

 private:
  FeatureDpSpec spec_;
  std::size_t d_;
  std::vector<int> targets_;
  std::vector<double> per_feature_epsilon_;
  std::vector<double> per_feature_delta_;
  std::vector<double> sigma_;
};

inline std::vector<double> privatize(std::span<const double> x, const FeatureDpSpec& spec,
                                     Rng& rng) {
  return FeaturePrivatizer(spec, x.size()).privatize(x, rng);
}

// Rows are privatized in order from one stream.
inline std::vector<std::vector<double>> privatize_batch(
    const std::vector<std::vector<double>>& rows, const FeatureDpSpec& spec, Rng& rng) {
  if (rows.empty()) return {};
  FeaturePrivatizer p(spec, rows.front().size());
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(p.privatize(r, rng));
  return out;
}

inline Dataset privatize_dataset(const Dataset& ds, const FeatureDpSpec& spec, Rng& rng) {
  FeaturePrivatizer p(spec, ds.feature_count());
  Dataset out = ds;
  for (auto& f : out.frames) p.apply(f.features, rng);
  return out;
}

}  // namespace privatexr
