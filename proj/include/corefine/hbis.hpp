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
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corefine/random.hpp"
#include "corefine/tensor.hpp"

// Heatmap-driven bidirectional synergy layer.
//
// One layer maps pixel features F [B, C_feat, H, W] and per-image class
// embeddings CE [B, N, C_class] to refined features, refined embeddings and
// the class heatmap that mediates between them:
//
//   heatmap     S = F . query(CE),  H = sigmoid(S)
//   feature->embedding
//               top-K pixels per class, weights H / (sum H + eps),
//               context C = weighted sum of context(F),
//               gate G = sigmoid(gate([CE | C])), CE' = (1-G) CE + G C
//   embedding->feature
//               gamma = 1 + tanh(scale(CE')), beta = shift(CE'),
//               F' = a F + (1-a) sum_n softmax_n(S) (gamma_n * F + beta_n)
//
// The heatmap is computed once from the incoming (F, CE) and feeds both
// directions; the modulation uses the updated embeddings.

namespace corefine {

/// Affine map over the last axis; weight is stored [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  /// Weights uniform in +-1/sqrt(in), zero bias, both trainable.
  static Linear init(std::size_t in, std::size_t out, SplitMix64& rng);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& layer);

template <typename T>
struct HbisParams {
  Linear<T> query;    // C_class -> C_feat
  Linear<T> context;  // C_feat -> C_class
  Linear<T> gate;     // 2 C_class -> 1, shared by all categories
  Linear<T> scale;    // C_class -> C_feat
  Linear<T> shift;    // C_class -> C_feat
  Tensor<T> alpha;    // [1], unconstrained; the blend weight is sigmoid(alpha)

  static HbisParams init(std::size_t c_feat, std::size_t c_class, SplitMix64& rng, double initial_blend = 0.9);

  std::size_t feature_width() const { return query.out_features(); }
  std::size_t embedding_width() const { return query.in_features(); }

  /// Parameter arrays in a fixed order, named "query.weight", ..., "alpha".
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
};

struct TopKConfig {
  double ratio = 0.02;
  double eps = 1e-6;

  /// max(1, round(ratio * pixels)).
  std::size_t k_for(std::size_t pixels) const;
  void validate() const;
};

/// Raw class scores and their sigmoid, both [B, N, H, W].
template <typename T>
struct Heatmap {
  Tensor<T> scores;
  Tensor<T> probs;
};

/// Selected pixel indices (flat within one H x W plane) for each
/// (image, category), K per pair, stored [B][N][K].
struct RegionSet {
  std::size_t batch = 0;
  std::size_t categories = 0;
  std::size_t k = 0;
  std::size_t plane = 0;  // H * W
  std::vector<std::size_t> pixels;

  std::size_t at(std::size_t b, std::size_t n, std::size_t i) const { return pixels[(b * categories + n) * k + i]; }
};

/// Scores F(x,y) . projection(CE_n) for every pixel and category. Shared by
/// the heatmap and the output head.
template <typename T>
Tensor<T> class_scores(const Tensor<T>& features, const Tensor<T>& embeddings, const Linear<T>& projection);

template <typename T>
Heatmap<T> generate_heatmap(const Tensor<T>& features, const Tensor<T>& embeddings, const Linear<T>& query);

/// Top-K pixels of one heatmap channel; ties go to the lower flat index.
template <typename T>
std::vector<std::size_t> select_region(std::span<const T> channel, const TopKConfig& cfg);

template <typename T>
RegionSet select_regions(const Heatmap<T>& heatmap, const TopKConfig& cfg);

/// Normalized heat of each selected pixel, [B, N, K]. Pixels outside the
/// region carry zero weight and are not materialized.
template <typename T>
Tensor<T> normalize_region(const Tensor<T>& probs, const RegionSet& regions, T eps);

/// Context vector per category: sum over the region of weight * context(F), [B, N, C_class].
template <typename T>
Tensor<T> pool_context(const Tensor<T>& features, const Tensor<T>& weights, const RegionSet& regions,
                       const Linear<T>& context);

template <typename T>
struct GatedUpdate {
  Tensor<T> embeddings;  // [B, N, C_class]
  Tensor<T> gate;        // [B, N, 1]
};

/// (1 - G) * previous + G * context, row by row.
template <typename T>
Tensor<T> blend_embeddings(const Tensor<T>& previous, const Tensor<T>& context, const Tensor<T>& gate);

template <typename T>
GatedUpdate<T> gated_update(const Tensor<T>& previous, const Tensor<T>& context, const Linear<T>& gate);

template <typename T>
struct AffineParams {
  Tensor<T> gamma;  // [B, N, C_feat], in (0, 2)
  Tensor<T> beta;   // [B, N, C_feat]
};

template <typename T>
AffineParams<T> affine_params(const Tensor<T>& embeddings, const Linear<T>& scale, const Linear<T>& shift);

/// Class-conditional modulation fused by the softmax of the raw scores over
/// categories, then blended with the input: blend * F + (1 - blend) * fused.
/// `blend` is the effective weight, shape [1].
template <typename T>
Tensor<T> modulate_and_fuse(const Tensor<T>& features, const AffineParams<T>& affine, const Tensor<T>& scores,
                            const Tensor<T>& blend);

template <typename T>
Tensor<T> effective_blend(const HbisParams<T>& params);

template <typename T>
struct HbisOutput {
  Tensor<T> features;    // [B, C_feat, H, W]
  Tensor<T> embeddings;  // [B, N, C_class]
  Heatmap<T> heatmap;
  Tensor<T> context;  // [B, N, C_class]
  Tensor<T> gate;     // [B, N, 1]
  RegionSet regions;
};

template <typename T>
HbisOutput<T> hbis_forward(const Tensor<T>& features, const Tensor<T>& embeddings, const HbisParams<T>& params,
                           const TopKConfig& cfg);

}  // namespace corefine
