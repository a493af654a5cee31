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

#include "corefine/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "corefine/data.hpp"
#include "corefine/hbis.hpp"
#include "corefine/losses.hpp"
#include "corefine/model.hpp"

namespace corefine {

namespace {

using D = Tensor<double>;

D random_tensor(const Shape& shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D(shape, std::move(v), true);
}

// Values bounded away from zero, for kinks and poles.
D away_from_zero(const Shape& shape, SplitMix64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = rng.uniform(0.2, 1.0);
    if (rng.uniform() < 0.5) x = -x;
  }
  return D(shape, std::move(v), true);
}

D constant_like(const D& t, SplitMix64& rng) {
  std::vector<double> v(t.numel());
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return D(t.shape(), std::move(v));
}

// Random visiting order over all entries of an array.
std::vector<std::size_t> visit_order(std::size_t numel, SplitMix64& rng) {
  std::vector<std::size_t> idx(numel);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = numel; i > 1; --i) {
    std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i - 1)))]);
  }
  return idx;
}

GradcheckResult merge(const std::string& name, const std::vector<GradcheckResult>& parts, double tol) {
  GradcheckResult r{name, 0.0, 0, 0, true};
  for (const auto& p : parts) {
    r.max_rel_error = std::max(r.max_rel_error, p.max_rel_error);
    r.checked += p.checked;
    r.skipped += p.skipped;
  }
  r.passed = r.max_rel_error <= tol;
  return r;
}

// Folds an op's output into a scalar with fixed random weights so every
// output entry carries a distinct upstream gradient.
D weigh(const D& y, const D& w) { return sum(mul(y, w)); }

class Suite {
 public:
  Suite(const GradcheckOptions& options) : options_(options), rng_(options.seed) {}

  void op(const std::string& name, std::vector<GradInput> inputs, const std::function<D()>& output) {
    const auto probe = output();
    const auto w = constant_like(probe, rng_);
    const auto parts = check_gradients([&] { return weigh(output(), w); }, inputs, options_, rng_);
    report_.results.push_back(merge("op." + name, parts, options_.tolerance));
  }

  void each(const std::string& prefix, const std::vector<GradInput>& inputs, const std::function<D()>& loss) {
    for (auto& r : check_gradients(loss, inputs, options_, rng_, prefix)) report_.results.push_back(std::move(r));
  }

  void merged(const std::string& name, const std::vector<GradInput>& inputs, const std::function<D()>& loss) {
    report_.results.push_back(merge(name, check_gradients(loss, inputs, options_, rng_), options_.tolerance));
  }

  SplitMix64& rng() { return rng_; }
  GradcheckReport finish() {
    report_.tolerance = options_.tolerance;
    return std::move(report_);
  }

 private:
  const GradcheckOptions& options_;
  SplitMix64 rng_;
  GradcheckReport report_;
};

void primitive_ops(Suite& s) {
  auto& rng = s.rng();
  {
    auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 1}, rng);
    s.op("add", {{"a", a}, {"b", b}}, [=] { return add(a, b); });
    s.op("sub", {{"a", a}, {"b", b}}, [=] { return sub(a, b); });
    s.op("mul", {{"a", a}, {"b", b}}, [=] { return mul(a, b); });
    auto d = away_from_zero({3, 1}, rng);
    s.op("div", {{"a", a}, {"d", d}}, [=] { return div(a, d); });
  }
  {
    auto x = random_tensor({3, 5}, rng);
    s.op("affine", {{"x", x}}, [=] { return affine(x, 1.7, -0.3); });
    auto p = random_tensor({3, 5}, rng, 0.3, 2.0);
    s.op("log", {{"x", p}}, [=] { return log(p); });
    auto z = random_tensor({3, 5}, rng, -3.0, 3.0);
    s.op("sigmoid", {{"x", z}}, [=] { return sigmoid(z); });
    s.op("tanh", {{"x", z}}, [=] { return tanh(z); });
    auto k = away_from_zero({3, 5}, rng);
    s.op("relu", {{"x", k}}, [=] { return relu(k); });
  }
  {
    auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng), shared = random_tensor({4, 2}, rng);
    s.op("matmul", {{"a", a}, {"b", b}}, [=] { return matmul(a, b); });
    s.op("matmul_shared", {{"a", a}, {"b", shared}}, [=] { return matmul(a, shared); });
    s.op("transpose", {{"x", a}}, [=] { return transpose(a); });
    s.op("reshape", {{"x", a}}, [=] { return reshape(a, {6, 4}); });
  }
  {
    auto x = random_tensor({2, 4, 3}, rng, -2.0, 2.0);
    s.op("softmax", {{"x", x}}, [=] { return softmax(x, 1); });
    s.op("log_softmax", {{"x", x}}, [=] { return log_softmax(x, 2); });
  }
  {
    auto x = random_tensor({2, 3, 6, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng), w1 = random_tensor({2, 3, 1, 1}, rng);
    s.op("conv2d", {{"x", x}, {"w", w}}, [=] { return conv2d(x, w, 1, 1); });
    s.op("conv2d_stride2", {{"x", x}, {"w", w}}, [=] { return conv2d(x, w, 2, 1); });
    s.op("conv2d_1x1", {{"x", x}, {"w", w1}}, [=] { return conv2d(x, w1, 2, 0); });
    s.op("upsample_nearest", {{"x", x}}, [=] { return upsample_nearest(x, 2); });
    s.op("sum", {{"x", x}}, [=] { return sum(x, {1, 3}); });
    s.op("mean", {{"x", x}}, [=] { return mean(x, {0, 2}, true); });
    s.op("sum_all", {{"x", x}}, [=] { return sum(x); });
  }
  {
    auto a = random_tensor({2, 3, 2}, rng), b = random_tensor({2, 1, 2}, rng);
    s.op("concat", {{"a", a}, {"b", b}}, [=] { return concat<double>({a, b}, 1); });
    auto rows = random_tensor({5, 3}, rng);
    const std::vector<std::size_t> idx{4, 0, 4, 2};
    s.op("gather_rows", {{"x", rows}}, [=] { return gather_rows(rows, idx); });
  }
}

std::vector<GradInput> inputs_of(const std::vector<std::pair<std::string, D>>& named) {
  std::vector<GradInput> out;
  for (const auto& [name, t] : named) out.push_back({name, t});
  return out;
}

void layer(Suite& s) {
  auto& rng = s.rng();
  const std::size_t c_feat = 6, c_class = 5, n = 3;
  auto params = HbisParams<double>::init(c_feat, c_class, rng, 0.6);
  // Push the modulation away from the identity so every path carries gradient.
  for (auto* lin : {&params.gate, &params.scale, &params.shift}) {
    for (auto& v : lin->bias.mutable_values()) v = rng.uniform(-0.5, 0.5);
  }
  auto features = random_tensor({2, c_feat, 4, 4}, rng);
  auto embeddings = random_tensor({2, n, c_class}, rng);
  TopKConfig cfg;
  cfg.ratio = 0.25;  // K = 4 of 16 pixels
  auto inputs = inputs_of(params.named());
  inputs.push_back({"features_in", features});
  inputs.push_back({"embeddings_in", embeddings});
  s.each("hbis.", inputs, [=] {
    const auto out = hbis_forward(features, embeddings, params, cfg);
    return add(sum(out.features), sum(out.embeddings));
  });
}

LabelBatch random_labels(std::size_t b, std::size_t h, std::size_t w, std::size_t n, SplitMix64& rng) {
  LabelBatch labels{b, h, w, std::vector<std::uint8_t>(b * h * w)};
  for (auto& v : labels.values) v = static_cast<std::uint8_t>(rng.integer(0, static_cast<std::int64_t>(n - 1)));
  return labels;
}

void losses(Suite& s) {
  auto& rng = s.rng();
  const auto labels = random_labels(2, 4, 4, 3, rng);
  auto logits = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
  s.merged("loss.cross_entropy", {{"logits", logits}},
           [=] { return cross_entropy(logits, labels, std::nullopt); });
  s.merged("loss.dice", {{"logits", logits}},
           [=] { return dice_loss(softmax(logits, 1), labels, std::nullopt); });
  auto ignored = labels;
  ignored.values[3] = ignored.values[7] = 255;
  s.merged("loss.cross_entropy_ignore", {{"logits", logits}},
           [=] { return cross_entropy(logits, ignored, 255); });

  const auto fine = random_labels(2, 8, 8, 3, rng);
  auto s1 = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0), s2 = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
  s.merged("loss.heatmap", {{"s1", s1}, {"s2", s2}},
           [=] { return heatmap_loss<double>({s1, s2}, fine, std::nullopt); });

  auto e1 = random_tensor({4, 3, 5}, rng), e2 = random_tensor({4, 3, 5}, rng);
  s.merged("loss.fisher", {{"e1", e1}, {"e2", e2}}, [=] { return fisher_loss<double>({e1, e2}, 1e-6); });
}

void end_to_end(Suite& s, std::uint64_t seed) {
  ModelConfig config;
  config.num_categories = 3;
  config.c_feat = 8;
  config.c_class = 6;
  config.hbis_layers = 2;
  config.encoder_widths = {4, 8, 8};
  config.encoder_strides = {2, 2, 1};
  config.downsample = 4;
  config.topk.ratio = 0.1;  // K = 2 of the 4 x 4 grid
  config.image_height = config.image_width = 16;
  config.validate();

  auto params = ModelParams<double>::init(config, seed);
  for (auto& layer : params.layers) {
    for (auto* lin : {&layer.gate, &layer.scale, &layer.shift}) {
      for (auto& v : lin->bias.mutable_values()) v = s.rng().uniform(-0.5, 0.5);
    }
    layer.alpha.mutable_values()[0] = 0.0;
  }
  for (auto& stage : params.stages) {
    for (auto& v : stage.bias.mutable_values()) v = s.rng().uniform(0.0, 0.2);
  }

  SynthConfig synth;
  synth.seed = seed;
  synth.count = 2;
  synth.size = 16;
  synth.categories = 3;
  const auto samples = synth_generate(synth);
  const std::vector<std::size_t> idx{0, 1};
  const auto image = image_batch<double>(samples, idx);
  const auto labels = label_batch(samples, idx);
  LossWeights weights;

  s.each("model.", inputs_of(params.named()), [=] {
    const auto fwd = model_forward(image, params, config);
    std::vector<D> scores, embeddings;
    for (const auto& l : fwd.decoded.layers) {
      scores.push_back(l.heatmap.scores);
      embeddings.push_back(l.embeddings);
    }
    return total_loss(fwd.head.upsampled_logits, fwd.head.probs, labels, scores, embeddings, weights).total;
  });
}

// Restores the fault slot however the suite exits.
struct FaultScope {
  explicit FaultScope(const std::optional<std::string>& op) {
    if (op) debug::set_adjoint_fault(debug::AdjointFault{*op});
  }
  ~FaultScope() { debug::set_adjoint_fault(std::nullopt); }
};

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::vector<GradcheckResult> check_gradients(const std::function<Tensor<double>()>& loss,
                                             const std::vector<GradInput>& inputs, const GradcheckOptions& options,
                                             SplitMix64& rng, const std::string& prefix) {
  std::vector<std::vector<double>> analytic;
  {
    for (const auto& in : inputs) {
      auto t = in.tensor;
      t.set_requires_grad(true);
      t.zero_grad();
    }
    Graph<double> graph;
    graph.backward(loss());
    for (const auto& in : inputs) analytic.push_back(in.tensor.grad());
  }

  // Evaluates the loss and the branch signature of that evaluation.
  const auto traced = [&loss] {
    debug::set_branch_trace(true);
    const double value = loss().item();
    const auto signature = debug::branch_trace();
    debug::set_branch_trace(false);
    return std::pair{value, signature};
  };

  std::vector<GradcheckResult> results;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto tensor = inputs[i].tensor;
    auto values = tensor.mutable_values();
    GradcheckResult r{prefix + inputs[i].name, 0.0, 0, 0, true};
    const auto order = visit_order(values.size(), rng);
    for (std::size_t o = 0; o < order.size() && r.checked < options.max_entries; ++o) {
      const auto j = order[o];
      const double saved = values[j];
      const auto centre = traced().second;
      double f[4];
      bool smooth = true;
      const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
      for (int s = 0; s < 4; ++s) {
        values[j] = saved + offsets[s] * options.eps;
        const auto [value, signature] = traced();
        f[s] = value;
        smooth = smooth && signature == centre;
      }
      values[j] = saved;
      if (!smooth) {
        // The stencil straddles a kink or a change of selected region.
        ++r.skipped;
        continue;
      }
      const double numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * options.eps);
      double err = relative_error(analytic[i][j], numeric, options.floor);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i][j])) err = INFINITY;
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.checked;
    }
    r.passed = r.checked > 0 && r.max_rel_error <= options.tolerance;
    results.push_back(std::move(r));
  }
  for (const auto& in : inputs) {
    auto t = in.tensor;
    t.zero_grad();
  }
  return results;
}

bool GradcheckReport::passed() const {
  return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

std::string GradcheckReport::to_text() const {
  std::string out;
  char line[160];
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-34s max_rel_err %.3e  entries %3zu  skipped %2zu  %s\n",
                  r.component.c_str(), r.max_rel_error, r.checked, r.skipped, r.passed ? "ok" : "FAIL");
    out += line;
    if (!r.passed) ++failed;
  }
  std::snprintf(line, sizeof line, "%zu components, %zu over tolerance %.1e\n", results.size(), failed, tolerance);
  out += line;
  return out;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  FaultScope fault(options.fault_op);
  Suite s(options);
  primitive_ops(s);
  layer(s);
  losses(s);
  end_to_end(s, options.seed);
  return s.finish();
}

}  // namespace corefine
