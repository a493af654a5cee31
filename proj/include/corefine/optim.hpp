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
#include <vector>

#include "corefine/tensor.hpp"

namespace corefine {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates, one pair of buffers per parameter.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState for_params(const std::vector<Tensor<T>>& params);
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamSettings& settings = {});

/// lr0 * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total, double lr0);

}  // namespace corefine
