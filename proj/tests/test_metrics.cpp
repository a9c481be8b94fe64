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

#include <random>

#include "privatexr/metrics.hpp"

namespace privatexr {
namespace {

TEST(BalancedAccuracy, PerfectAndArithmetic) {
  std::vector<int> y{0, 1, 2, 3, 1};
  EXPECT_EQ(balanced_accuracy(y, y).value, 1.0);
  std::vector<int> labels{0, 0, 1, 1};
  std::vector<int> pred{0, 0, 1, 0};
  EXPECT_EQ(balanced_accuracy(pred, labels).value, 0.75);
  EXPECT_EQ(mean_accuracy(pred, labels), 0.75);
}

TEST(BalancedAccuracy, ZeroSupportClassIsExcludedAndFlagged) {
  std::vector<int> labels{0, 0, 2, 2};
  std::vector<int> pred{0, 1, 2, 2};
  auto r = balanced_accuracy(pred, labels, 4);
  EXPECT_EQ(r.value, 0.75);
  EXPECT_EQ(r.excluded_classes, (std::vector<int>{1, 3}));
}

TEST(BalancedAccuracy, RandomPredictionsNearChance) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> k(0, 3);
  std::vector<int> labels, pred;
  for (int i = 0; i < 4000; ++i) {
    labels.push_back(i % 4);
    pred.push_back(k(rng));
  }
  const double b = balanced_accuracy(pred, labels).value;
  EXPECT_NEAR(b, 0.25, 0.03);
  EXPECT_LT(std::abs(mean_accuracy(pred, labels) - b), 0.02);
}

TEST(BalancedAccuracy, RejectsMismatchedInput) {
  std::vector<int> a{0, 1}, b{0};
  EXPECT_THROW(balanced_accuracy(a, b), Error);
  EXPECT_THROW(balanced_accuracy(b, std::vector<int>{}), Error);
}

TEST(Auc, ConstantAndSeparatedScores) {
  std::vector<double> flat(10, 0.3);
  std::vector<int> y{1, 0, 1, 0, 1, 0, 1, 0, 1, 1};
  EXPECT_EQ(auc_mann_whitney(flat, y), 0.5);
  EXPECT_EQ(auc_threshold_sweep(flat, y), 0.5);
  std::vector<double> sep;
  for (int v : y) sep.push_back(v ? 2.0 + sep.size() : -1.0 * sep.size());
  EXPECT_EQ(auc_mann_whitney(sep, y), 1.0);
  EXPECT_EQ(auc_threshold_sweep(sep, y), 1.0);
}

// O(n^2) pair count.
double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] && !y[j]) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

TEST(Auc, TwoAlgorithmsAgreeOnRandomScores) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 200; ++i) {
      y.push_back(static_cast<int>(rng() % 2));
      // Rounded scores force ties in some trials.
      double v = n(rng) + 0.5 * y.back();
      s.push_back(trial % 2 ? std::round(v * 4) / 4 : v);
    }
    const double mw = auc_mann_whitney(s, y);
    EXPECT_NEAR(auc_threshold_sweep(s, y), mw, 1e-10);
    EXPECT_NEAR(auc_pairs(s, y), mw, 1e-12);
    std::vector<int> flipped;
    for (int v : y) flipped.push_back(1 - v);
    EXPECT_DOUBLE_EQ(auc_mann_whitney(s, flipped), 1.0 - mw);
  }
}

TEST(Auc, NeedsBothClasses) {
  std::vector<double> s{0.1, 0.2};
  std::vector<int> y{1, 1};
  EXPECT_THROW(auc_mann_whitney(s, y), Error);
  EXPECT_THROW(auc_threshold_sweep(s, y), Error);
}

}  // namespace
}  // namespace privatexr
