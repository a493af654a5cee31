/*
 * Copyright 2026 The corefine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace corefine {

/// counts(i, j) = pixels with ground truth i predicted as j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t categories);

  std::size_t categories() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * n_ + pred]; }
  std::uint64_t total() const;

  /// Adds one prediction/label pair of maps. Pixels whose label equals
  /// `ignore_index` are skipped; any other out-of-range value throws.
  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                  std::optional<int> ignore_index = std::nullopt);

  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix& other) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct ClassScores {
  double iou = 0.0;
  double f1 = 0.0;
  bool observed = false;  // tp + fp + fn > 0
};

struct MetricSummary {
  std::vector<ClassScores> per_class;
  double miou = 0.0;
  double oa = 0.0;
  double mf1 = 0.0;

  /// {"miou":..,"oa":..,"mf1":..,"per_class":[{"iou":..,"f1":..},..]}
  std::string to_json() const;
};

/// Means run over categories with tp + fp + fn > 0. Throws when nothing was
/// scored.
MetricSummary summarize(const ConfusionMatrix& cm);

}  // namespace corefine
