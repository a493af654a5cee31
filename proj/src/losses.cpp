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

#include "corefine/losses.hpp"

#include <stdexcept>

namespace corefine {

void LossWeights::validate() const {
  if (!(lambda_hm >= 0.0) || !(lambda_fd >= 0.0)) throw std::invalid_argument("loss weights must be >= 0");
  if (!(fisher_eps > 0.0)) throw std::invalid_argument("fisher_eps must be positive");
}

namespace {

struct Targets {
  std::vector<double> one_hot;  // [B, N, H, W], zero rows at ignored pixels
  std::vector<double> mask;     // [B, 1, H, W]
  std::size_t scored = 0;
};

Targets make_targets(const Shape& shape, const LabelBatch& labels, std::optional<int> ignore_index) {
  if (shape.size() != 4 || shape[0] != labels.batch || shape[2] != labels.height || shape[3] != labels.width) {
    throw std::invalid_argument("prediction " + shape_str(shape) + " does not match labels [" +
                                std::to_string(labels.batch) + "," + std::to_string(labels.height) + "," +
                                std::to_string(labels.width) + "]");
  }
  const auto b = shape[0], n = shape[1], plane = shape[2] * shape[3];
  if (labels.values.size() != b * plane) throw std::invalid_argument("label buffer size mismatch");
  Targets t;
  t.one_hot.assign(b * n * plane, 0.0);
  t.mask.assign(b * plane, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int y = labels.values[bi * plane + p];
      if (ignore_index && y == *ignore_index) continue;
      if (y < 0 || static_cast<std::size_t>(y) >= n) {
        throw std::out_of_range("label " + std::to_string(y) + " at pixel " + std::to_string(bi * plane + p) +
                                " is outside [0, " + std::to_string(n) + ")");
      }
      t.one_hot[(bi * n + static_cast<std::size_t>(y)) * plane + p] = 1.0;
      t.mask[bi * plane + p] = 1.0;
      ++t.scored;
    }
  }
  return t;
}

template <typename T>
Tensor<T> constant(Shape shape, const std::vector<double>& values) {
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelBatch& labels, std::optional<int> ignore_index) {
  auto targets = make_targets(logits.shape(), labels, ignore_index);
  auto one_hot = constant<T>(logits.shape(), targets.one_hot);
  auto picked = sum(mul(log_softmax(logits, 1), one_hot));
  const T scale = targets.scored ? T{-1} / static_cast<T>(targets.scored) : T{0};
  return affine(picked, scale, T{0});
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const LabelBatch& labels, std::optional<int> ignore_index) {
  auto targets = make_targets(probs.shape(), labels, ignore_index);
  const auto& s = probs.shape();
  auto one_hot = constant<T>(s, targets.one_hot);
  auto mask = constant<T>(Shape{s[0], 1, s[2], s[3]}, targets.mask);
  const std::vector<std::size_t> spatial{0, 2, 3};
  auto inter = sum(mul(probs, one_hot), spatial);         // [N]
  auto pred_mass = sum(mul(probs, mask), spatial);        // [N]
  auto true_mass = sum(one_hot, spatial);                 // [N]
  const T smooth = static_cast<T>(kDiceSmoothing);
  auto numer = affine(inter, T{2}, smooth);
  auto denom = affine(add(pred_mass, true_mass), T{1}, smooth);
  auto score = mean(div(numer, denom), {0});
  return affine(score, T{-1}, T{1});
}

template <typename T>
Tensor<T> heatmap_loss(const std::vector<Tensor<T>>& scores, const LabelBatch& labels,
                       std::optional<int> ignore_index) {
  Tensor<T> total = Tensor<T>::scalar(T{0});
  for (const auto& layer_scores : scores) {
    if (labels.height % layer_scores.dim(2) != 0 || labels.width % layer_scores.dim(3) != 0 ||
        labels.height / layer_scores.dim(2) != labels.width / layer_scores.dim(3)) {
      throw std::invalid_argument("heatmap " + shape_str(layer_scores.shape()) +
                                  " cannot be upsampled to the label grid");
    }
    auto up = upsample_nearest(layer_scores, labels.height / layer_scores.dim(2));
    auto term = add(cross_entropy(up, labels, ignore_index), dice_loss(softmax(up, 1), labels, ignore_index));
    total = add(total, term);
  }
  return total;
}

template <typename T>
FisherTerms<T> fisher_terms(const Tensor<T>& embeddings, T eps) {
  if (embeddings.rank() != 3) {
    throw std::invalid_argument("fisher loss expects embeddings [B,N,C], got " + shape_str(embeddings.shape()));
  }
  const auto b = embeddings.dim(0), n = embeddings.dim(1);
  auto centers = mean(embeddings, {0}, true);  // [1, N, C]
  auto spread = sub(embeddings, centers);
  auto within = affine(sum(mul(spread, spread)), T{1} / static_cast<T>(b * n), T{0});
  auto overall = mean(centers, {1}, true);  // [1, 1, C]
  auto offset = sub(centers, overall);
  auto between = affine(sum(mul(offset, offset)), T{1} / static_cast<T>(n), T{0});
  auto ratio = div(within, affine(between, T{1}, eps));
  return {std::move(within), std::move(between), std::move(ratio)};
}

template <typename T>
Tensor<T> fisher_loss(const std::vector<Tensor<T>>& embeddings, T eps) {
  Tensor<T> total = Tensor<T>::scalar(T{0});
  for (const auto& layer : embeddings) total = add(total, fisher_terms(layer, eps).ratio);
  return total;
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& upsampled_logits, const Tensor<T>& probs, const LabelBatch& labels,
                            const std::vector<Tensor<T>>& scores, const std::vector<Tensor<T>>& embeddings,
                            const LossWeights& weights) {
  weights.validate();
  LossBreakdown<T> out;
  out.main = add(cross_entropy(upsampled_logits, labels, weights.ignore_index),
                 dice_loss(probs, labels, weights.ignore_index));
  out.heatmap = heatmap_loss(scores, labels, weights.ignore_index);
  out.fisher = fisher_loss(embeddings, static_cast<T>(weights.fisher_eps));
  out.total = add(add(out.main, affine(out.heatmap, static_cast<T>(weights.lambda_hm), T{0})),
                  affine(out.fisher, static_cast<T>(weights.lambda_fd), T{0}));
  return out;
}

#define COREFINE_INSTANTIATE(T)                                                                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, const LabelBatch&, std::optional<int>);                   \
  template Tensor<T> dice_loss(const Tensor<T>&, const LabelBatch&, std::optional<int>);                       \
  template Tensor<T> heatmap_loss(const std::vector<Tensor<T>>&, const LabelBatch&, std::optional<int>);       \
  template FisherTerms<T> fisher_terms(const Tensor<T>&, T);                                                   \
  template Tensor<T> fisher_loss(const std::vector<Tensor<T>>&, T);                                            \
  template LossBreakdown<T> total_loss(const Tensor<T>&, const Tensor<T>&, const LabelBatch&,                  \
                                       const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,           \
                                       const LossWeights&);

COREFINE_INSTANTIATE(float)
COREFINE_INSTANTIATE(double)

#undef COREFINE_INSTANTIATE

}  // namespace corefine
