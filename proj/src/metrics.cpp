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

#include "corefine/metrics.hpp"

#include <json.hpp>
#include <numeric>
#include <stdexcept>

namespace corefine {

ConfusionMatrix::ConfusionMatrix(std::size_t categories) : n_(categories), counts_(categories * categories, 0) {
  if (categories == 0) throw std::invalid_argument("confusion matrix needs at least one category");
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                                 std::optional<int> ignore_index) {
  if (pred.size() != label.size()) {
    throw std::invalid_argument("prediction and label maps differ in size: " + std::to_string(pred.size()) +
                                " vs " + std::to_string(label.size()));
  }
  // Validate first so a bad map leaves the counts untouched.
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (ignore_index && label[i] == *ignore_index) continue;
    if (label[i] >= n_ || pred[i] >= n_) {
      throw std::out_of_range("pixel " + std::to_string(i) + " has label " + std::to_string(label[i]) +
                              " / prediction " + std::to_string(pred[i]) + " outside [0, " + std::to_string(n_) +
                              ")");
    }
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (ignore_index && label[i] == *ignore_index) continue;
    ++counts_[label[i] * n_ + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

MetricSummary summarize(const ConfusionMatrix& cm) {
  const auto n = cm.categories();
  const auto total = cm.total();
  if (total == 0) throw std::invalid_argument("cannot summarize a confusion matrix with no scored pixels");

  MetricSummary s;
  s.per_class.resize(n);
  std::uint64_t trace = 0;
  double iou_sum = 0.0, f1_sum = 0.0;
  std::size_t observed = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const auto tp = cm.at(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    trace += tp;
    auto& cls = s.per_class[c];
    const auto union_count = tp + fp + fn;
    if (union_count == 0) continue;
    cls.observed = true;
    cls.iou = static_cast<double>(tp) / static_cast<double>(union_count);
    cls.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    iou_sum += cls.iou;
    f1_sum += cls.f1;
    ++observed;
  }
  s.miou = iou_sum / static_cast<double>(observed);
  s.mf1 = f1_sum / static_cast<double>(observed);
  s.oa = static_cast<double>(trace) / static_cast<double>(total);
  return s;
}

std::string MetricSummary::to_json() const {
  nlohmann::ordered_json doc;
  doc["miou"] = miou;
  doc["oa"] = oa;
  doc["mf1"] = mf1;
  doc["per_class"] = nlohmann::ordered_json::array();
  for (const auto& c : per_class) doc["per_class"].push_back({{"iou", c.iou}, {"f1", c.f1}});
  return doc.dump();
}

}  // namespace corefine
