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

#include "corefine/model.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace corefine {

namespace {

bool power_of_two(std::size_t v) { return v != 0 && std::has_single_bit(v); }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (num_categories < 2 || num_categories > 255) fail("num_categories must lie in [2, 255]");
  if (c_feat < 4 || c_class < 4) fail("c_feat and c_class must be >= 4");
  if (!power_of_two(downsample)) fail("downsample must be a power of 2");
  if (encoder_widths.empty() || encoder_widths.size() != encoder_strides.size()) {
    fail("encoder_widths and encoder_strides must be non-empty and of equal length");
  }
  for (auto w : encoder_widths) {
    if (w == 0) fail("encoder widths must be positive");
  }
  for (auto s : encoder_strides) {
    if (!power_of_two(s)) fail("encoder strides must be powers of 2");
  }
  std::size_t deepest = 1;
  for (auto s : stage_scales()) deepest = std::max(deepest, s);
  const auto grid = std::max(deepest, downsample);
  if (image_height == 0 || image_width == 0 || image_height % grid != 0 || image_width % grid != 0) {
    fail("image extents " + std::to_string(image_height) + "x" + std::to_string(image_width) +
         " must be divisible by " + std::to_string(grid));
  }
  topk.validate();
}

std::vector<std::size_t> ModelConfig::stage_scales() const {
  std::vector<std::size_t> scales;
  std::size_t scale = 1;
  for (auto s : encoder_strides) {
    scale *= s;
    scales.push_back(scale);
  }
  return scales;
}

namespace {

template <typename T>
ConvParams<T> init_conv(std::size_t out, std::size_t in, std::size_t kernel, SplitMix64& rng) {
  const auto fan_in = in * kernel * kernel;
  // He-uniform: keeps activation scale through the relu stages.
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> w(out * fan_in);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  return {Tensor<T>(Shape{out, in, kernel, kernel}, std::move(w), true),
          Tensor<T>(Shape{out, 1, 1}, std::vector<T>(out, T{0}), true)};
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed);
  ModelParams p;
  std::size_t in = 3;
  for (auto width : config.encoder_widths) {
    p.stages.push_back(init_conv<T>(width, in, 3, rng));
    in = width;
  }
  for (auto width : config.encoder_widths) p.projections.push_back(init_conv<T>(config.c_feat, width, 1, rng));

  std::vector<T> ce(config.num_categories * config.c_class);
  for (auto& v : ce) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  p.initial_embeddings = Tensor<T>(Shape{config.num_categories, config.c_class}, std::move(ce), true);

  for (std::size_t l = 0; l < config.hbis_layers; ++l) {
    p.layers.push_back(HbisParams<T>::init(config.c_feat, config.c_class, rng));
  }
  p.head = Linear<T>::init(config.c_class, config.c_feat, rng);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    out.emplace_back("encoder.stage" + std::to_string(i) + ".weight", stages[i].weight);
    out.emplace_back("encoder.stage" + std::to_string(i) + ".bias", stages[i].bias);
  }
  for (std::size_t i = 0; i < projections.size(); ++i) {
    out.emplace_back("aggregate.proj" + std::to_string(i) + ".weight", projections[i].weight);
    out.emplace_back("aggregate.proj" + std::to_string(i) + ".bias", projections[i].bias);
  }
  out.emplace_back("embeddings.initial", initial_embeddings);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (auto& [name, t] : layers[l].named()) out.emplace_back("hbis" + std::to_string(l) + "." + name, t);
  }
  out.emplace_back("head.weight", head.weight);
  out.emplace_back("head.bias", head.bias);
  return out;
}

template <typename T>
std::vector<Tensor<T>> ModelParams<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& image, const ModelParams<T>& params, const ModelConfig& config) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw std::invalid_argument("encoder expects images [B,3,H,W], got " + shape_str(image.shape()));
  }
  const auto scales = config.stage_scales();
  std::size_t grid = config.downsample;
  for (auto s : scales) grid = std::max(grid, s);
  if (image.dim(2) % grid != 0 || image.dim(3) % grid != 0) {
    throw std::invalid_argument("image extents " + shape_str(image.shape()) + " not divisible by " +
                                std::to_string(grid));
  }

  // Per-image channel means removed, then a fixed gain. Linear in the
  // image, so a black image stays exactly zero.
  Tensor<T> x = affine(sub(image, mean(image, {2, 3}, true)), T{4}, T{0});
  Tensor<T> fused;
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    const auto& stage = params.stages[s];
    x = relu(add(conv2d(x, stage.weight, config.encoder_strides[s], 1), stage.bias));

    // Bring every scale to the output grid: strided projection when finer,
    // nearest upsampling when coarser.
    const auto scale = scales[s];
    const auto stride = scale < config.downsample ? config.downsample / scale : 1;
    auto projected = add(conv2d(x, params.projections[s].weight, stride, 0), params.projections[s].bias);
    if (scale > config.downsample) projected = upsample_nearest(projected, scale / config.downsample);
    fused = fused.defined() ? add(fused, projected) : projected;
  }
  return fused;
}

template <typename T>
Tensor<T> batch_embeddings(const Tensor<T>& initial, std::size_t batch) {
  return add(Tensor<T>::zeros(Shape{batch, initial.dim(0), initial.dim(1)}), initial);
}

template <typename T>
DecodeResult<T> decode(const Tensor<T>& features, const Tensor<T>& embeddings, const ModelParams<T>& params,
                       const ModelConfig& config) {
  if (features.dim(1) != config.c_feat || embeddings.dim(2) != config.c_class ||
      embeddings.dim(1) != config.num_categories) {
    throw std::invalid_argument("decoder inputs " + shape_str(features.shape()) + ", " +
                                shape_str(embeddings.shape()) + " disagree with the model config");
  }
  DecodeResult<T> out{features, embeddings, {}};
  for (const auto& layer : params.layers) {
    auto step = hbis_forward(out.features, out.embeddings, layer, config.topk);
    out.features = step.features;
    out.embeddings = step.embeddings;
    out.layers.push_back(std::move(step));
  }
  return out;
}

template <typename T>
HeadOutput<T> output_head(const Tensor<T>& features, const Tensor<T>& embeddings, const Linear<T>& head,
                          std::size_t upsample) {
  HeadOutput<T> out;
  out.logits = class_scores(features, embeddings, head);
  out.upsampled_logits = upsample_nearest(out.logits, upsample);
  out.probs = softmax(out.upsampled_logits, 1);
  return out;
}

template <typename T>
ForwardResult<T> model_forward(const Tensor<T>& image, const ModelParams<T>& params, const ModelConfig& config) {
  ForwardResult<T> out;
  out.initial_features = encoder_forward(image, params, config);
  out.decoded = decode(out.initial_features, batch_embeddings(params.initial_embeddings, image.dim(0)), params,
                       config);
  out.head = output_head(out.decoded.features, out.decoded.embeddings, params.head, config.downsample);
  return out;
}

template <typename T>
std::vector<std::uint8_t> predict(const Tensor<T>& probs) {
  if (probs.rank() != 4) throw std::invalid_argument("predict expects [B,N,H,W], got " + shape_str(probs.shape()));
  const auto b = probs.dim(0), n = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  auto v = probs.values();
  std::vector<std::uint8_t> labels(b * plane);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      T best_v = v[(bi * n) * plane + p];
      for (std::size_t c = 1; c < n; ++c) {
        const T cand = v[(bi * n + c) * plane + p];
        if (cand > best_v) {
          best_v = cand;
          best = c;
        }
      }
      labels[bi * plane + p] = static_cast<std::uint8_t>(best);
    }
  }
  return labels;
}

#define COREFINE_INSTANTIATE(T)                                                                           \
  template struct ModelParams<T>;                                                                         \
  template Tensor<T> encoder_forward(const Tensor<T>&, const ModelParams<T>&, const ModelConfig&);        \
  template Tensor<T> batch_embeddings(const Tensor<T>&, std::size_t);                                     \
  template DecodeResult<T> decode(const Tensor<T>&, const Tensor<T>&, const ModelParams<T>&,              \
                                  const ModelConfig&);                                                    \
  template HeadOutput<T> output_head(const Tensor<T>&, const Tensor<T>&, const Linear<T>&, std::size_t);  \
  template ForwardResult<T> model_forward(const Tensor<T>&, const ModelParams<T>&, const ModelConfig&);   \
  template std::vector<std::uint8_t> predict(const Tensor<T>&);

COREFINE_INSTANTIATE(float)
COREFINE_INSTANTIATE(double)

#undef COREFINE_INSTANTIATE

}  // namespace corefine
