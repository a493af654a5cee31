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

#include "corefine/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace corefine {

template <typename T>
AdamState<T> AdamState<T>::for_params(const std::vector<Tensor<T>>& params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), T{0});
    state.v.emplace_back(p.numel(), T{0});
  }
  return state;
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamSettings& settings) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not match the parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(settings.beta1);
  const T b2 = static_cast<T>(settings.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(settings.beta1, t));
  const T correction2 = static_cast<T>(1.0 - std::pow(settings.beta2, t));
  const T step_size = static_cast<T>(lr);
  const T eps = static_cast<T>(settings.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel() || v.size() != p.numel()) {
      throw std::invalid_argument("optimizer state shape mismatch for parameter " + std::to_string(i));
    }
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto values = p.mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const T m_hat = m[j] / correction1;
      const T v_hat = v[j] / correction2;
      values[j] -= step_size * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) return lr0;
  const double ratio = static_cast<double>(step) / static_cast<double>(total);
  return lr0 * (1.0 + std::cos(std::numbers::pi * ratio)) / 2.0;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::vector<Tensor<float>>&, AdamState<float>&, double, const AdamSettings&);
template void adam_step(std::vector<Tensor<double>>&, AdamState<double>&, double, const AdamSettings&);

}  // namespace corefine
