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
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "privatexr/common.hpp"

namespace privatexr {

struct BalancedAccuracy {
  double value = 0.0;
  // Classes in [0, K) with no support in the labels; left out of the mean.
  std::vector<int> excluded_classes;
};

// Unweighted mean of per-class recall over classes present in `labels`.
inline BalancedAccuracy balanced_accuracy(std::span<const int> predictions,
                                          std::span<const int> labels, int class_count = 0) {
  require(!labels.empty(), ErrorKind::kInvalidArgument, "balanced accuracy of empty labels");
  require(predictions.size() == labels.size(), ErrorKind::kDimension,
          "prediction and label counts differ");
  int k = class_count;
  for (int y : labels) k = std::max(k, y + 1);
  std::vector<std::size_t> support(static_cast<std::size_t>(k), 0), hits(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++support[y];
    if (predictions[i] == labels[i]) ++hits[y];
  }
  BalancedAccuracy out;
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    const auto u = static_cast<std::size_t>(c);
    if (support[u] == 0) {
      out.excluded_classes.push_back(c);
      continue;
    }
    sum += static_cast<double>(hits[u]) / static_cast<double>(support[u]);
    ++present;
  }
  out.value = sum / present;
  return out;
}

// Plain top-1 accuracy.
inline double mean_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  require(!labels.empty(), ErrorKind::kInvalidArgument, "accuracy of empty labels");
  require(predictions.size() == labels.size(), ErrorKind::kDimension,
          "prediction and label counts differ");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Mann-Whitney AUC: (concordant pairs + 0.5 ties) / pairs, via ranks in
// O(n log n). Positives are labels != 0.
inline double auc_mann_whitney(std::span<const double> scores, std::span<const int> positive) {
  require(scores.size() == positive.size(), ErrorKind::kDimension,
          "score and label counts differ");
  std::size_t n_pos = 0;
  for (int p : positive) n_pos += p != 0;
  const std::size_t n_neg = positive.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorKind::kInvalidArgument,
          "AUC needs at least one positive and one negative");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // For each positive: #negatives strictly below + 0.5 * #negatives tied.
  double concordant = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? pos_here : neg_here) += 1;
      ++j;
    }
    concordant += static_cast<double>(pos_here) *
                  (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_here));
    neg_below += neg_here;
    i = j;
  }
  return concordant / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ROC area by sweeping thresholds over distinct scores (high to low) and
// integrating TPR over FPR with the trapezoid rule.
inline double auc_threshold_sweep(std::span<const double> scores, std::span<const int> positive) {
  require(scores.size() == positive.size(), ErrorKind::kDimension,
          "score and label counts differ");
  std::size_t n_pos = 0;
  for (int p : positive) n_pos += p != 0;
  const std::size_t n_neg = positive.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorKind::kInvalidArgument,
          "AUC needs at least one positive and one negative");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area, in units of pairs
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t dtp = 0, dfp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? dtp : dfp) += 1;
      ++j;
    }
    area2 += static_cast<double>(dfp) * static_cast<double>(2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area2 / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace privatexr
