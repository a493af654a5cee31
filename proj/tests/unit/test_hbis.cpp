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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "corefine/gradcheck.hpp"
#include "corefine/hbis.hpp"
#include "support.hpp"

namespace cf = corefine;
using namespace testing_support;

namespace {

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Linear layer applied to one row: y = x W + b with W stored [in, out].
std::vector<double> project_row(const cf::Linear<double>& l, const std::vector<double>& x) {
  const auto in = l.in_features(), out = l.out_features();
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = l.bias[o];
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * l.weight[i * out + o];
    y[o] = acc;
  }
  return y;
}

void zero(cf::Linear<double>& l) {
  for (auto& v : l.weight.mutable_values()) v = 0;
  for (auto& v : l.bias.mutable_values()) v = 0;
}

void randomize_biases(cf::HbisParams<double>& p, SplitMix64& rng) {
  for (auto* l : {&p.query, &p.context, &p.gate, &p.scale, &p.shift}) {
    for (auto& v : l->bias.mutable_values()) v = rng.uniform(-0.5, 0.5);
  }
}

// Straight-line reference of one layer, written with explicit loops over
// plain arrays.
struct Reference {
  std::vector<double> scores, probs, context, gate, embeddings, features;
};

Reference reference_layer(const D& F, const D& CE, const cf::HbisParams<double>& p, std::size_t k, double eps) {
  const auto B = F.dim(0), C = F.dim(1), P = F.dim(2) * F.dim(3);
  const auto N = CE.dim(1), E = CE.dim(2);
  Reference r;
  r.scores.assign(B * N * P, 0);
  r.probs.assign(B * N * P, 0);
  r.context.assign(B * N * E, 0);
  r.gate.assign(B * N, 0);
  r.embeddings.assign(B * N * E, 0);
  r.features.assign(B * C * P, 0);
  const double a = sigm(p.alpha[0]);

  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::vector<double>> gamma(N), beta(N);
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<double> ce(E);
      for (std::size_t e = 0; e < E; ++e) ce[e] = CE[(b * N + n) * E + e];
      const auto q = project_row(p.query, ce);
      for (std::size_t px = 0; px < P; ++px) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) s += F[(b * C + c) * P + px] * q[c];
        r.scores[(b * N + n) * P + px] = s;
        r.probs[(b * N + n) * P + px] = sigm(s);
      }
      // Top-k by full stable sort on (value desc, index asc).
      std::vector<std::size_t> order(P);
      std::iota(order.begin(), order.end(), 0);
      const double* h = &r.probs[(b * N + n) * P];
      std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return h[x] > h[y]; });
      double total = 0;
      for (std::size_t i = 0; i < k; ++i) total += h[order[i]];
      std::vector<double> ctx(E, 0);
      for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> f(C);
        for (std::size_t c = 0; c < C; ++c) f[c] = F[(b * C + c) * P + order[i]];
        const auto proj = project_row(p.context, f);
        for (std::size_t e = 0; e < E; ++e) ctx[e] += h[order[i]] / (total + eps) * proj[e];
      }
      std::vector<double> joined(ce);
      joined.insert(joined.end(), ctx.begin(), ctx.end());
      const double g = sigm(project_row(p.gate, joined)[0]);
      std::vector<double> updated(E);
      for (std::size_t e = 0; e < E; ++e) {
        updated[e] = (1 - g) * ce[e] + g * ctx[e];
        r.context[(b * N + n) * E + e] = ctx[e];
        r.embeddings[(b * N + n) * E + e] = updated[e];
      }
      r.gate[b * N + n] = g;
      gamma[n] = project_row(p.scale, updated);
      for (auto& v : gamma[n]) v = 1 + std::tanh(v);
      beta[n] = project_row(p.shift, updated);
    }
    for (std::size_t px = 0; px < P; ++px) {
      double mx = -INFINITY;
      for (std::size_t n = 0; n < N; ++n) mx = std::max(mx, r.scores[(b * N + n) * P + px]);
      std::vector<double> w(N);
      double z = 0;
      for (std::size_t n = 0; n < N; ++n) z += w[n] = std::exp(r.scores[(b * N + n) * P + px] - mx);
      for (std::size_t c = 0; c < C; ++c) {
        const double f = F[(b * C + c) * P + px];
        double fused = 0;
        for (std::size_t n = 0; n < N; ++n) fused += w[n] / z * (gamma[n][c] * f + beta[n][c]);
        r.features[(b * C + c) * P + px] = a * f + (1 - a) * fused;
      }
    }
  }
  return r;
}

struct Instance {
  D features, embeddings;
  cf::HbisParams<double> params;
};

Instance make_instance(std::uint64_t seed, std::size_t B, std::size_t C, std::size_t E, std::size_t N,
                       std::size_t H, std::size_t W) {
  SplitMix64 rng(seed);
  Instance in{random_tensor({B, C, H, W}, rng), random_tensor({B, N, E}, rng),
              cf::HbisParams<double>::init(C, E, rng, 0.6)};
  randomize_biases(in.params, rng);
  return in;
}

}  // namespace

// ---- heatmap ---------------------------------------------------------------

TEST(Heatmap, ZeroFeaturesGiveOneHalf) {
  SplitMix64 rng(1);
  const auto q = cf::Linear<double>::init(5, 6, rng);
  const auto hm = cf::generate_heatmap(D::zeros({2, 6, 3, 3}), random_tensor({2, 4, 5}, rng), q);
  EXPECT_EQ(hm.probs.shape(), (Shape{2, 4, 3, 3}));
  for (double v : hm.probs.values()) EXPECT_EQ(v, 0.5);
}

TEST(Heatmap, SinglePixelClosedForm) {
  // f = [1, 0], projected query [2, 0] from an identity projection of CE = [2, 0].
  cf::Linear<double> q{D({2, 2}, {1, 0, 0, 1}), D({2}, {0, 0})};
  const auto hm = cf::generate_heatmap(D({1, 2, 1, 1}, {1, 0}), D({1, 1, 2}, {2, 0}), q);
  EXPECT_NEAR(hm.probs.item(), 0.8807970779778823, 1e-15);
  EXPECT_NEAR(hm.scores.item(), 2.0, 1e-15);
}

TEST(Heatmap, MatchesLoopOracle) {
  SplitMix64 rng(2);
  const auto F = random_tensor({1, 8, 4, 4}, rng);
  const auto CE = random_tensor({1, 3, 5}, rng);
  auto q = cf::Linear<double>::init(5, 8, rng);
  for (auto& v : q.bias.mutable_values()) v = rng.uniform(-1, 1);
  const auto hm = cf::generate_heatmap(F, CE, q);
  for (std::size_t n = 0; n < 3; ++n) {
    const auto qn = project_row(q, {CE[n * 5], CE[n * 5 + 1], CE[n * 5 + 2], CE[n * 5 + 3], CE[n * 5 + 4]});
    for (std::size_t px = 0; px < 16; ++px) {
      double s = 0;
      for (std::size_t c = 0; c < 8; ++c) s += F[c * 16 + px] * qn[c];
      EXPECT_NEAR(hm.scores[n * 16 + px], s, 1e-13);
      EXPECT_NEAR(hm.probs[n * 16 + px], sigm(s), 1e-13);
      EXPECT_GT(hm.probs[n * 16 + px], 0.0);
      EXPECT_LT(hm.probs[n * 16 + px], 1.0);
    }
  }
}

TEST(Heatmap, WidthMismatchThrows) {
  SplitMix64 rng(3);
  const auto q = cf::Linear<double>::init(5, 6, rng);
  EXPECT_THROW(cf::generate_heatmap(D::zeros({1, 7, 2, 2}), D::zeros({1, 2, 5}), q), std::invalid_argument);
  EXPECT_THROW(cf::generate_heatmap(D::zeros({1, 6, 2, 2}), D::zeros({1, 2, 4}), q), std::invalid_argument);
}

// ---- region selection ------------------------------------------------------

TEST(Region, KFollowsRoundedRatio) {
  cf::TopKConfig cfg;
  EXPECT_EQ(cfg.k_for(100), 2u);  // 10 x 10 at 0.02
  EXPECT_EQ(cfg.k_for(16), 1u);   // round(0.32) = 0, floored at 1
  EXPECT_EQ(cfg.k_for(256), 5u);  // round(5.12)
  cfg.ratio = 0.1;
  EXPECT_EQ(cfg.k_for(25), 3u);   // round(2.5) rounds half away from zero
  cfg.ratio = 1.0;
  EXPECT_EQ(cfg.k_for(7), 7u);
}

TEST(Region, InvalidConfigRejected) {
  cf::TopKConfig cfg;
  cfg.ratio = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.ratio = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.ratio = 0.5;
  cfg.eps = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Region, TenByTenSelectsTwo) {
  SplitMix64 rng(4);
  std::vector<double> ch(100);
  for (auto& v : ch) v = rng.uniform();
  ch[37] = 2.0;
  ch[5] = 1.5;
  EXPECT_EQ(cf::select_region<double>(ch, cf::TopKConfig{}), (std::vector<std::size_t>{37, 5}));
}

TEST(Region, UniformChannelPicksLowestIndices) {
  const std::vector<double> ch(16, 0.7);
  cf::TopKConfig cfg;
  cfg.ratio = 3.0 / 16.0;
  EXPECT_EQ(cf::select_region<double>(ch, cfg), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Region, RandomChannelMatchesSortOracle) {
  SplitMix64 rng(5);
  cf::TopKConfig cfg;
  cfg.ratio = 0.1;
  for (int t = 0; t < 10; ++t) {
    std::vector<double> ch(64);
    for (auto& v : ch) v = std::round(rng.uniform() * 20) / 20;
    std::vector<std::size_t> order(64);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ch[a] > ch[b]; });
    order.resize(6);
    EXPECT_EQ(cf::select_region<double>(ch, cfg), order);
  }
}

// ---- normalization ---------------------------------------------------------

namespace {

cf::RegionSet single_region(std::vector<std::size_t> pixels, std::size_t plane) {
  cf::RegionSet r;
  r.batch = 1;
  r.categories = 1;
  r.k = pixels.size();
  r.plane = plane;
  r.pixels = std::move(pixels);
  return r;
}

}  // namespace

TEST(Normalize, SingleMember) {
  const D probs({1, 1, 1, 2}, {0.5, 0.1});
  const auto w = cf::normalize_region(probs, single_region({0}, 2), 1e-6);
  EXPECT_DOUBLE_EQ(w.item(), 0.5 / (0.5 + 1e-6));
}

TEST(Normalize, TwoMembersProportional) {
  const D probs({1, 1, 1, 3}, {0.2, 0.1, 0.6});
  const auto w = cf::normalize_region(probs, single_region({2, 0}, 3), 0.0);
  EXPECT_NEAR(w[0], 0.75, 1e-15);
  EXPECT_NEAR(w[1], 0.25, 1e-15);
}

TEST(Normalize, RegionSumIsSOverSPlusEps) {
  SplitMix64 rng(6);
  cf::TopKConfig cfg;
  cfg.ratio = 0.2;
  for (int t = 0; t < 20; ++t) {
    const auto scores = random_tensor({2, 3, 5, 5}, rng, -3, 3);
    const cf::Heatmap<double> hm{scores, cf::sigmoid(scores)};
    const auto regions = cf::select_regions(hm, cfg);
    const auto w = cf::normalize_region(hm.probs, regions, cfg.eps);
    for (std::size_t bn = 0; bn < 6; ++bn) {
      double s = 0, sum_w = 0;
      for (std::size_t i = 0; i < regions.k; ++i) {
        s += hm.probs[bn * 25 + regions.pixels[bn * regions.k + i]];
        sum_w += w[bn * regions.k + i];
      }
      EXPECT_NEAR(sum_w, s / (s + cfg.eps), 1e-12);
      EXPECT_LT(sum_w, 1.0);
    }
  }
}

// ---- context pooling -------------------------------------------------------

TEST(Pool, IdenticalFeaturesScaleTheProjection) {
  SplitMix64 rng(7);
  std::vector<double> f(3 * 4);
  const double col[3] = {0.3, -1.2, 0.8};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) f[c * 4 + p] = col[c];
  const D F({1, 3, 2, 2}, f);
  auto ctx = cf::Linear<double>::init(3, 4, rng);
  for (auto& v : ctx.bias.mutable_values()) v = rng.uniform(-1, 1);
  const D weights({1, 1, 3}, {0.2, 0.3, 0.1});
  const auto C = cf::pool_context(F, weights, single_region({0, 2, 3}, 4), ctx);
  const auto proj = project_row(ctx, {col[0], col[1], col[2]});
  for (std::size_t e = 0; e < 4; ++e) EXPECT_NEAR(C[e], 0.6 * proj[e], 1e-14);
}

TEST(Pool, IdentityProjectionOnePixel) {
  const D F({1, 2, 1, 3}, {1, 2, 3, 4, 5, 6});
  cf::Linear<double> ctx{D({2, 2}, {1, 0, 0, 1}), D({2}, {0, 0})};
  const auto C = cf::pool_context(F, D({1, 1, 1}, {0.4}), single_region({1}, 3), ctx);
  EXPECT_NEAR(C[0], 0.4 * 2, 1e-15);
  EXPECT_NEAR(C[1], 0.4 * 5, 1e-15);
}

// ---- gated update ----------------------------------------------------------

TEST(Gate, ConvexEndpointsAndFixedPoint) {
  SplitMix64 rng(8);
  const auto prev = random_tensor({2, 3, 4}, rng), ctx = random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(to_vec(cf::blend_embeddings(prev, ctx, D::zeros({2, 3, 1}))), to_vec(prev));
  EXPECT_EQ(to_vec(cf::blend_embeddings(prev, ctx, D::full({2, 3, 1}, 1.0))), to_vec(ctx));
  const auto any_gate = random_tensor({2, 3, 1}, rng, 0, 1);
  const auto fixed = cf::blend_embeddings(prev, prev, any_gate);
  for (std::size_t i = 0; i < prev.numel(); ++i) EXPECT_NEAR(fixed[i], prev[i], 1e-15);
}

TEST(Gate, UpdateIsComponentwiseConvex) {
  SplitMix64 rng(9);
  const auto gate = cf::Linear<double>::init(8, 1, rng);
  for (int t = 0; t < 10; ++t) {
    const auto prev = random_tensor({2, 3, 4}, rng, -3, 3), ctx = random_tensor({2, 3, 4}, rng, -3, 3);
    const auto out = cf::gated_update(prev, ctx, gate);
    for (double g : out.gate.values()) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
    for (std::size_t i = 0; i < prev.numel(); ++i) {
      EXPECT_GE(out.embeddings[i], std::min(prev[i], ctx[i]) - 1e-15);
      EXPECT_LE(out.embeddings[i], std::max(prev[i], ctx[i]) + 1e-15);
    }
  }
}

// ---- affine modulation -----------------------------------------------------

TEST(Affine, ZeroProjectionsGiveIdentityModulation) {
  SplitMix64 rng(10);
  auto scale = cf::Linear<double>::init(4, 6, rng), shift = cf::Linear<double>::init(4, 6, rng);
  zero(scale);
  zero(shift);
  const auto ap = cf::affine_params(random_tensor({2, 3, 4}, rng), scale, shift);
  for (double v : ap.gamma.values()) EXPECT_EQ(v, 1.0);
  for (double v : ap.beta.values()) EXPECT_EQ(v, 0.0);
}

TEST(Affine, LargePreactivationSaturatesTowardTwo) {
  SplitMix64 rng(11);
  auto scale = cf::Linear<double>::init(2, 3, rng), shift = cf::Linear<double>::init(2, 3, rng);
  zero(scale);
  for (auto& v : scale.bias.mutable_values()) v = 12.0;
  const auto ap = cf::affine_params(random_tensor({1, 2, 2}, rng), scale, shift);
  for (double v : ap.gamma.values()) EXPECT_NEAR(v, 2.0, 1e-9);
}

TEST(Affine, GammaStrictlyInsideOpenInterval) {
  SplitMix64 rng(12);
  const auto scale = cf::Linear<double>::init(5, 7, rng), shift = cf::Linear<double>::init(5, 7, rng);
  for (int t = 0; t < 20; ++t) {
    const auto ap = cf::affine_params(random_tensor({3, 4, 5}, rng, -5, 5), scale, shift);
    for (double v : ap.gamma.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 2.0);
    }
  }
}

// ---- fusion ----------------------------------------------------------------

TEST(Fuse, BlendOneReturnsInput) {
  SplitMix64 rng(13);
  const auto F = random_tensor({2, 4, 3, 3}, rng);
  const cf::AffineParams<double> ap{random_tensor({2, 3, 4}, rng, 0.1, 1.9), random_tensor({2, 3, 4}, rng)};
  const auto out = cf::modulate_and_fuse(F, ap, random_tensor({2, 3, 3, 3}, rng, -3, 3), D({1}, {1.0}));
  for (std::size_t i = 0; i < F.numel(); ++i) EXPECT_NEAR(out[i], F[i], 1e-12);
}

TEST(Fuse, IdentityModulationReturnsInputForAnyBlend) {
  SplitMix64 rng(14);
  const auto F = random_tensor({2, 4, 3, 3}, rng);
  const cf::AffineParams<double> ap{D::full({2, 3, 4}, 1.0), D::zeros({2, 3, 4})};
  for (double a : {0.0, 0.3, 0.9}) {
    const auto out = cf::modulate_and_fuse(F, ap, random_tensor({2, 3, 3, 3}, rng, -3, 3), D({1}, {a}));
    for (std::size_t i = 0; i < F.numel(); ++i) EXPECT_NEAR(out[i], F[i], 1e-12);
  }
}

TEST(Fuse, SoftmaxWeightsSumToOnePerPixel) {
  SplitMix64 rng(15);
  const auto S = random_tensor({2, 5, 4, 4}, rng, -20, 20);
  const auto w = cf::sum(cf::softmax(S, 1), {1});
  for (double v : w.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(Fuse, MatchesPerPixelLoopOracle) {
  SplitMix64 rng(16);
  const std::size_t B = 2, C = 3, N = 4, P = 6;
  const auto F = random_tensor({B, C, 2, 3}, rng);
  const auto gamma = random_tensor({B, N, C}, rng, 0.1, 1.9), beta = random_tensor({B, N, C}, rng);
  const auto S = random_tensor({B, N, 2, 3}, rng, -3, 3);
  const double a = 0.35;
  const auto out = cf::modulate_and_fuse(F, cf::AffineParams<double>{gamma, beta}, S, D({1}, {a}));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      double z = 0;
      for (std::size_t n = 0; n < N; ++n) z += std::exp(S[(b * N + n) * P + p]);
      for (std::size_t c = 0; c < C; ++c) {
        const double f = F[(b * C + c) * P + p];
        double fused = 0;
        for (std::size_t n = 0; n < N; ++n) {
          fused += std::exp(S[(b * N + n) * P + p]) / z * (gamma[(b * N + n) * C + c] * f + beta[(b * N + n) * C + c]);
        }
        EXPECT_NEAR(out[(b * C + c) * P + p], a * f + (1 - a) * fused, 1e-10);
      }
    }
}

// ---- full layer ------------------------------------------------------------

TEST(Layer, InitialBlendIsPointNine) {
  SplitMix64 rng(17);
  const auto p = cf::HbisParams<double>::init(6, 5, rng);
  EXPECT_NEAR(cf::effective_blend(p).item(), 0.9, 1e-15);
  EXPECT_EQ(p.named().size(), 11u);
  for (double v : p.query.bias.values()) EXPECT_EQ(v, 0.0);
  const double bound = 1.0 / std::sqrt(5.0);
  for (double v : p.query.weight.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Layer, IdentityConfiguration) {
  auto in = make_instance(18, 2, 6, 5, 3, 4, 4);
  zero(in.params.gate);
  zero(in.params.scale);
  zero(in.params.shift);
  cf::TopKConfig cfg;
  cfg.ratio = 0.25;
  const auto out = cf::hbis_forward(in.features, in.embeddings, in.params, cfg);
  for (std::size_t i = 0; i < in.features.numel(); ++i) EXPECT_NEAR(out.features[i], in.features[i], 1e-12);
  for (double g : out.gate.values()) EXPECT_EQ(g, 0.5);
  for (std::size_t i = 0; i < in.embeddings.numel(); ++i) {
    EXPECT_NEAR(out.embeddings[i], 0.5 * in.embeddings[i] + 0.5 * out.context[i], 1e-15);
  }
}

TEST(Layer, ToyInstanceMatchesStraightLineReference) {
  for (std::uint64_t seed : {19, 20, 21}) {
    auto in = make_instance(seed, 1, 3, 4, 2, 4, 4);
    cf::TopKConfig cfg;
    cfg.ratio = 0.25;
    const auto out = cf::hbis_forward(in.features, in.embeddings, in.params, cfg);
    const auto ref = reference_layer(in.features, in.embeddings, in.params, 4, cfg.eps);
    expect_close(to_vec(out.heatmap.scores), ref.scores, 1e-12, 1e-12);
    expect_close(to_vec(out.heatmap.probs), ref.probs, 1e-12, 1e-12);
    expect_close(to_vec(out.context), ref.context, 1e-12, 1e-12);
    expect_close(to_vec(out.gate), ref.gate, 1e-12, 1e-12);
    expect_close(to_vec(out.embeddings), ref.embeddings, 1e-12, 1e-12);
    expect_close(to_vec(out.features), ref.features, 1e-12, 1e-12);
  }
}

TEST(Layer, BatchedInstanceMatchesReference) {
  auto in = make_instance(22, 3, 5, 6, 4, 5, 4);
  cf::TopKConfig cfg;  // K = round(0.4) -> 1
  const auto out = cf::hbis_forward(in.features, in.embeddings, in.params, cfg);
  const auto ref = reference_layer(in.features, in.embeddings, in.params, 1, cfg.eps);
  expect_close(to_vec(out.embeddings), ref.embeddings, 1e-12, 1e-12);
  expect_close(to_vec(out.features), ref.features, 1e-12, 1e-12);
}

TEST(Layer, PermutingCategoriesPermutesOutputs) {
  auto in = make_instance(23, 2, 4, 5, 3, 4, 4);
  cf::TopKConfig cfg;
  cfg.ratio = 0.25;
  const std::size_t perm[3] = {2, 0, 1};
  std::vector<double> permuted(in.embeddings.numel());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t e = 0; e < 5; ++e) permuted[(b * 3 + n) * 5 + e] = in.embeddings[(b * 3 + perm[n]) * 5 + e];
  const auto a = cf::hbis_forward(in.features, in.embeddings, in.params, cfg);
  const auto p = cf::hbis_forward(in.features, D({2, 3, 5}, permuted), in.params, cfg);
  expect_close(to_vec(p.features), to_vec(a.features), 1e-12, 1e-12);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t e = 0; e < 5; ++e) {
        EXPECT_NEAR(p.embeddings[(b * 3 + n) * 5 + e], a.embeddings[(b * 3 + perm[n]) * 5 + e], 1e-13);
        EXPECT_NEAR(p.context[(b * 3 + n) * 5 + e], a.context[(b * 3 + perm[n]) * 5 + e], 1e-13);
      }
      for (std::size_t px = 0; px < 16; ++px) {
        EXPECT_EQ(p.heatmap.scores[(b * 3 + n) * 16 + px], a.heatmap.scores[(b * 3 + perm[n]) * 16 + px]);
      }
    }
}

TEST(Layer, GradientsMatchFiniteDifferences) {
  auto in = make_instance(24, 2, 6, 5, 3, 4, 4);
  cf::TopKConfig cfg;
  cfg.ratio = 0.25;
  std::vector<cf::GradInput> inputs;
  for (const auto& [name, t] : in.params.named()) inputs.push_back({name, t});
  inputs.push_back({"features", in.features});
  inputs.push_back({"embeddings", in.embeddings});
  cf::GradcheckOptions opts;
  opts.max_entries = 1000;
  SplitMix64 rng(0);
  const auto results = cf::check_gradients(
      [&] {
        const auto out = cf::hbis_forward(in.features, in.embeddings, in.params, cfg);
        return cf::add(cf::sum(out.features), cf::sum(out.embeddings));
      },
      inputs, opts, rng);
  ASSERT_EQ(results.size(), 13u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.component << " " << r.max_rel_error;
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(Layer, FloatPathAgreesWithDouble) {
  auto in = make_instance(25, 1, 4, 4, 2, 4, 4);
  cf::TopKConfig cfg;
  cfg.ratio = 0.25;
  const auto cast = [](const D& t) {
    std::vector<float> v(t.values().begin(), t.values().end());
    return cf::Tensor<float>(t.shape(), v);
  };
  cf::HbisParams<float> pf;
  auto lin = [&](const cf::Linear<double>& l) { return cf::Linear<float>{cast(l.weight), cast(l.bias)}; };
  pf.query = lin(in.params.query);
  pf.context = lin(in.params.context);
  pf.gate = lin(in.params.gate);
  pf.scale = lin(in.params.scale);
  pf.shift = lin(in.params.shift);
  pf.alpha = cast(in.params.alpha);
  const auto a = cf::hbis_forward(in.features, in.embeddings, in.params, cfg);
  const auto b = cf::hbis_forward(cast(in.features), cast(in.embeddings), pf, cfg);
  for (std::size_t i = 0; i < a.features.numel(); ++i) EXPECT_NEAR(b.features[i], a.features[i], 1e-5);
}
