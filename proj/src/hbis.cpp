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

#include "corefine/hbis.hpp"

#include <cmath>
#include <stdexcept>

namespace corefine {

template <typename T>
Linear<T> Linear<T>::init(std::size_t in, std::size_t out, SplitMix64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<T> w(in * out);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  return Linear{Tensor<T>(Shape{in, out}, std::move(w), true), Tensor<T>(Shape{out}, std::vector<T>(out, T{0}), true)};
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& layer) {
  if (x.shape().back() != layer.in_features()) {
    throw std::invalid_argument("linear layer expects width " + std::to_string(layer.in_features()) + ", got " +
                                shape_str(x.shape()));
  }
  return add(matmul(x, layer.weight), layer.bias);
}

template <typename T>
HbisParams<T> HbisParams<T>::init(std::size_t c_feat, std::size_t c_class, SplitMix64& rng, double initial_blend) {
  HbisParams p;
  p.query = Linear<T>::init(c_class, c_feat, rng);
  p.context = Linear<T>::init(c_feat, c_class, rng);
  p.gate = Linear<T>::init(2 * c_class, 1, rng);
  p.scale = Linear<T>::init(c_class, c_feat, rng);
  p.shift = Linear<T>::init(c_class, c_feat, rng);
  const double raw = std::log(initial_blend / (1.0 - initial_blend));
  p.alpha = Tensor<T>(Shape{1}, std::vector<T>{static_cast<T>(raw)}, true);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> HbisParams<T>::named() const {
  return {
      {"query.weight", query.weight}, {"query.bias", query.bias},     {"context.weight", context.weight},
      {"context.bias", context.bias}, {"gate.weight", gate.weight},   {"gate.bias", gate.bias},
      {"scale.weight", scale.weight}, {"scale.bias", scale.bias},     {"shift.weight", shift.weight},
      {"shift.bias", shift.bias},     {"alpha", alpha},
  };
}

std::size_t TopKConfig::k_for(std::size_t pixels) const {
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(pixels)));
  return std::min(pixels, std::max<std::size_t>(1, k));
}

void TopKConfig::validate() const {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("top-k ratio must lie in (0, 1]");
  if (!(eps > 0.0)) throw std::invalid_argument("top-k eps must be positive");
}

template <typename T>
Tensor<T> class_scores(const Tensor<T>& features, const Tensor<T>& embeddings, const Linear<T>& projection) {
  if (features.rank() != 4 || embeddings.rank() != 3 || features.dim(0) != embeddings.dim(0)) {
    throw std::invalid_argument("class scores need features [B,C,H,W] and embeddings [B,N,C], got " +
                                shape_str(features.shape()) + " and " + shape_str(embeddings.shape()));
  }
  if (projection.out_features() != features.dim(1)) {
    throw std::invalid_argument("projection width " + std::to_string(projection.out_features()) +
                                " does not match feature width " + std::to_string(features.dim(1)));
  }
  const auto b = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const auto n = embeddings.dim(1);
  auto queries = linear(embeddings, projection);                        // [B, N, C_feat]
  auto flat = reshape(features, Shape{b, c, h * w});                    // [B, C_feat, P]
  return reshape(matmul(queries, flat), Shape{b, n, h, w});             // [B, N, H, W]
}

template <typename T>
Heatmap<T> generate_heatmap(const Tensor<T>& features, const Tensor<T>& embeddings, const Linear<T>& query) {
  auto scores = class_scores(features, embeddings, query);
  auto probs = sigmoid(scores);
  return {std::move(scores), std::move(probs)};
}

template <typename T>
std::vector<std::size_t> select_region(std::span<const T> channel, const TopKConfig& cfg) {
  if (channel.empty()) throw std::invalid_argument("cannot select a region from an empty channel");
  return topk_indices(channel, cfg.k_for(channel.size()));
}

template <typename T>
RegionSet select_regions(const Heatmap<T>& heatmap, const TopKConfig& cfg) {
  const auto& probs = heatmap.probs;
  RegionSet regions;
  regions.batch = probs.dim(0);
  regions.categories = probs.dim(1);
  regions.plane = probs.dim(2) * probs.dim(3);
  regions.k = cfg.k_for(regions.plane);
  regions.pixels.reserve(regions.batch * regions.categories * regions.k);
  auto values = probs.values();
  for (std::size_t ch = 0; ch < regions.batch * regions.categories; ++ch) {
    auto picked = select_region(values.subspan(ch * regions.plane, regions.plane), cfg);
    regions.pixels.insert(regions.pixels.end(), picked.begin(), picked.end());
  }
  return regions;
}

template <typename T>
Tensor<T> normalize_region(const Tensor<T>& probs, const RegionSet& regions, T eps) {
  const auto b = regions.batch, n = regions.categories, k = regions.k;
  std::vector<std::size_t> rows(b * n * k);
  for (std::size_t ch = 0; ch < b * n; ++ch) {
    for (std::size_t i = 0; i < k; ++i) rows[ch * k + i] = ch * regions.plane + regions.pixels[ch * k + i];
  }
  auto column = reshape(probs, Shape{probs.numel(), 1});
  auto selected = reshape(gather_rows(column, std::span<const std::size_t>(rows)), Shape{b, n, k});
  auto mass = affine(sum(selected, {2}, true), T{1}, eps);  // [B, N, 1]
  return div(selected, mass);
}

template <typename T>
Tensor<T> pool_context(const Tensor<T>& features, const Tensor<T>& weights, const RegionSet& regions,
                       const Linear<T>& context) {
  const auto b = regions.batch, n = regions.categories, k = regions.k;
  const auto c = features.dim(1), plane = regions.plane;
  std::vector<std::size_t> rows(b * n * k);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ni = 0; ni < n; ++ni) {
      for (std::size_t i = 0; i < k; ++i) rows[(bi * n + ni) * k + i] = bi * plane + regions.at(bi, ni, i);
    }
  }
  // Pixel-major view [B*P, C_feat] so each selected pixel is one row.
  auto pixels = reshape(transpose(reshape(features, Shape{b, c, plane})), Shape{b * plane, c});
  auto projected = linear(gather_rows(pixels, std::span<const std::size_t>(rows)), context);  // [B*N*K, C_class]
  auto grouped = reshape(projected, Shape{b * n, k, context.out_features()});
  auto w = reshape(weights, Shape{b * n, 1, k});
  return reshape(matmul(w, grouped), Shape{b, n, context.out_features()});
}

template <typename T>
Tensor<T> blend_embeddings(const Tensor<T>& previous, const Tensor<T>& context, const Tensor<T>& gate) {
  return add(mul(previous, affine(gate, T{-1}, T{1})), mul(context, gate));
}

template <typename T>
GatedUpdate<T> gated_update(const Tensor<T>& previous, const Tensor<T>& context, const Linear<T>& gate) {
  if (previous.shape() != context.shape()) {
    throw std::invalid_argument("embedding rows " + shape_str(previous.shape()) + " vs context rows " +
                                shape_str(context.shape()));
  }
  auto g = sigmoid(linear(concat<T>({previous, context}, 2), gate));
  auto updated = blend_embeddings(previous, context, g);
  return {std::move(updated), std::move(g)};
}

template <typename T>
AffineParams<T> affine_params(const Tensor<T>& embeddings, const Linear<T>& scale, const Linear<T>& shift) {
  return {affine(tanh(linear(embeddings, scale)), T{1}, T{1}), linear(embeddings, shift)};
}

template <typename T>
Tensor<T> modulate_and_fuse(const Tensor<T>& features, const AffineParams<T>& affine_p, const Tensor<T>& scores,
                            const Tensor<T>& blend) {
  const auto b = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const auto n = scores.dim(1);
  if (scores.dim(0) != b || scores.dim(2) != h || scores.dim(3) != w || affine_p.gamma.shape() != Shape{b, n, c} ||
      affine_p.beta.shape() != Shape{b, n, c}) {
    throw std::invalid_argument("modulation shapes disagree with features " + shape_str(features.shape()));
  }
  auto assign = softmax(reshape(scores, Shape{b, n, h * w}), 1);  // [B, N, P]
  auto flat = reshape(features, Shape{b, c, h * w});
  // sum_n A_n (gamma_n * F + beta_n) = (gamma^T A) * F + beta^T A
  auto scale = matmul(transpose(affine_p.gamma), assign);  // [B, C, P]
  auto shift = matmul(transpose(affine_p.beta), assign);   // [B, C, P]
  auto fused = add(mul(scale, flat), shift);
  auto out = add(mul(flat, blend), mul(fused, affine(blend, T{-1}, T{1})));
  return reshape(out, Shape{b, c, h, w});
}

template <typename T>
Tensor<T> effective_blend(const HbisParams<T>& params) {
  return sigmoid(params.alpha);
}

template <typename T>
HbisOutput<T> hbis_forward(const Tensor<T>& features, const Tensor<T>& embeddings, const HbisParams<T>& params,
                           const TopKConfig& cfg) {
  if (features.rank() != 4 || features.dim(1) != params.feature_width()) {
    throw std::invalid_argument("synergy layer expects feature width " + std::to_string(params.feature_width()) +
                                ", got " + shape_str(features.shape()));
  }
  if (embeddings.rank() != 3 || embeddings.dim(2) != params.embedding_width()) {
    throw std::invalid_argument("synergy layer expects embedding width " + std::to_string(params.embedding_width()) +
                                ", got " + shape_str(embeddings.shape()));
  }
  HbisOutput<T> out;
  out.heatmap = generate_heatmap(features, embeddings, params.query);
  out.regions = select_regions(out.heatmap, cfg);
  auto weights = normalize_region(out.heatmap.probs, out.regions, static_cast<T>(cfg.eps));
  out.context = pool_context(features, weights, out.regions, params.context);
  auto update = gated_update(embeddings, out.context, params.gate);
  out.embeddings = update.embeddings;
  out.gate = update.gate;
  auto affine_p = affine_params(out.embeddings, params.scale, params.shift);
  out.features = modulate_and_fuse(features, affine_p, out.heatmap.scores, effective_blend(params));
  return out;
}

#define COREFINE_INSTANTIATE(T)                                                                                  \
  template struct Linear<T>;                                                                                     \
  template struct HbisParams<T>;                                                                                 \
  template Tensor<T> linear(const Tensor<T>&, const Linear<T>&);                                                 \
  template Tensor<T> class_scores(const Tensor<T>&, const Tensor<T>&, const Linear<T>&);                         \
  template Heatmap<T> generate_heatmap(const Tensor<T>&, const Tensor<T>&, const Linear<T>&);                    \
  template std::vector<std::size_t> select_region(std::span<const T>, const TopKConfig&);                        \
  template RegionSet select_regions(const Heatmap<T>&, const TopKConfig&);                                       \
  template Tensor<T> normalize_region(const Tensor<T>&, const RegionSet&, T);                                    \
  template Tensor<T> pool_context(const Tensor<T>&, const Tensor<T>&, const RegionSet&, const Linear<T>&);       \
  template Tensor<T> blend_embeddings(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template GatedUpdate<T> gated_update(const Tensor<T>&, const Tensor<T>&, const Linear<T>&);                    \
  template AffineParams<T> affine_params(const Tensor<T>&, const Linear<T>&, const Linear<T>&);                  \
  template Tensor<T> modulate_and_fuse(const Tensor<T>&, const AffineParams<T>&, const Tensor<T>&,               \
                                       const Tensor<T>&);                                                        \
  template Tensor<T> effective_blend(const HbisParams<T>&);                                                      \
  template HbisOutput<T> hbis_forward(const Tensor<T>&, const Tensor<T>&, const HbisParams<T>&, const TopKConfig&);

COREFINE_INSTANTIATE(float)
COREFINE_INSTANTIATE(double)

#undef COREFINE_INSTANTIATE

}  // namespace corefine
