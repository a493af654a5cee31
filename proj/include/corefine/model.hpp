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
#include <string>
#include <utility>
#include <vector>

#include "corefine/hbis.hpp"
#include "corefine/tensor.hpp"

namespace corefine {

struct ModelConfig {
  std::size_t num_categories = 4;
  std::size_t c_feat = 32;
  std::size_t c_class = 32;
  std::size_t hbis_layers = 2;
  // One 3x3 convolution + ReLU per stage.
  std::vector<std::size_t> encoder_widths{32, 64, 32};
  std::vector<std::size_t> encoder_strides{2, 2, 1};
  // Output scale of the aggregated feature map relative to the image.
  std::size_t downsample = 4;
  TopKConfig topk;
  std::size_t image_height = 64;
  std::size_t image_width = 64;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  /// Cumulative stride after each encoder stage.
  std::vector<std::size_t> stage_scales() const;
  std::size_t feature_height() const { return image_height / downsample; }
  std::size_t feature_width() const { return image_width / downsample; }
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [O, C, k, k]
  Tensor<T> bias;    // [O, 1, 1]
};

template <typename T>
struct ModelParams {
  std::vector<ConvParams<T>> stages;
  std::vector<ConvParams<T>> projections;  // 1x1, one per stage, to c_feat
  Tensor<T> initial_embeddings;            // [N, C_class], shared by every image
  std::vector<HbisParams<T>> layers;
  Linear<T> head;  // C_class -> C_feat

  /// Deterministic in (config, seed).
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Every trainable array in a fixed order with a stable dotted name.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  std::vector<Tensor<T>> tensors() const;
};

template <typename T>
struct DecodeResult {
  Tensor<T> features;    // F_L
  Tensor<T> embeddings;  // CE_L
  std::vector<HbisOutput<T>> layers;
};

/// image [B, 3, H, W] -> F_0 [B, c_feat, H/downsample, W/downsample]
template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& image, const ModelParams<T>& params, const ModelConfig& config);

/// CE_0 repeated for a batch of `batch` images, [B, N, C_class].
template <typename T>
Tensor<T> batch_embeddings(const Tensor<T>& initial, std::size_t batch);

template <typename T>
DecodeResult<T> decode(const Tensor<T>& features, const Tensor<T>& embeddings, const ModelParams<T>& params,
                       const ModelConfig& config);

template <typename T>
struct HeadOutput {
  Tensor<T> logits;            // [B, N, H', W']
  Tensor<T> upsampled_logits;  // [B, N, H, W]
  Tensor<T> probs;             // softmax over categories of the upsampled logits
};

template <typename T>
HeadOutput<T> output_head(const Tensor<T>& features, const Tensor<T>& embeddings, const Linear<T>& head,
                          std::size_t upsample);

template <typename T>
struct ForwardResult {
  Tensor<T> initial_features;  // F_0
  DecodeResult<T> decoded;
  HeadOutput<T> head;
};

template <typename T>
ForwardResult<T> model_forward(const Tensor<T>& image, const ModelParams<T>& params, const ModelConfig& config);

/// Per-pixel argmax over axis 1 of [B, N, H, W]; ties go to the lowest
/// category. Result is [B][H][W] flattened.
template <typename T>
std::vector<std::uint8_t> predict(const Tensor<T>& probs);

}  // namespace corefine
