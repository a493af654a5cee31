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
#include <vector>

#include "corefine/tensor.hpp"

namespace corefine {

/// Category index per pixel, [B][H][W] flattened.
struct LabelBatch {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;
};

struct LossWeights {
  double lambda_hm = 0.1;
  double lambda_fd = 0.1;
  double fisher_eps = 1e-6;
  std::optional<int> ignore_index;

  void validate() const;
};

inline constexpr double kDiceSmoothing = 1.0;

/// Mean over non-ignored pixels of -log softmax(logits)[label]. Logits are
/// [B, N, H, W] at label resolution. Zero when every pixel is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelBatch& labels, std::optional<int> ignore_index);

/// 1 - mean_n (2 sum p g + s) / (sum p + sum g + s), over all N categories,
/// ignored pixels excluded from every sum.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const LabelBatch& labels, std::optional<int> ignore_index);

/// Cross-entropy plus Dice of each layer's raw scores, upsampled to label
/// resolution, summed over layers. Zero for an empty list.
template <typename T>
Tensor<T> heatmap_loss(const std::vector<Tensor<T>>& scores, const LabelBatch& labels,
                       std::optional<int> ignore_index);

template <typename T>
struct FisherTerms {
  Tensor<T> within;   // S_w
  Tensor<T> between;  // S_b
  Tensor<T> ratio;    // S_w / (S_b + eps)
};

/// Scatter statistics of one layer's embeddings [B, N, C].
template <typename T>
FisherTerms<T> fisher_terms(const Tensor<T>& embeddings, T eps);

/// Sum over layers of S_w / (S_b + eps).
template <typename T>
Tensor<T> fisher_loss(const std::vector<Tensor<T>>& embeddings, T eps);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  Tensor<T> main;
  Tensor<T> heatmap;
  Tensor<T> fisher;
};

/// main + lambda_hm * heatmap + lambda_fd * fisher, where
/// main = CE(upsampled logits) + Dice(probs).
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& upsampled_logits, const Tensor<T>& probs, const LabelBatch& labels,
                            const std::vector<Tensor<T>>& scores, const std::vector<Tensor<T>>& embeddings,
                            const LossWeights& weights);

}  // namespace corefine
