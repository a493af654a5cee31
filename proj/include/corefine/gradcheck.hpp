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

// Central finite differences against the tape's adjoints, in double precision.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "corefine/random.hpp"
#include "corefine/tensor.hpp"

namespace corefine {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double eps = 1e-4;         // step of the five-point central difference
  double tolerance = 1e-4;   // max relative error
  // Entries below this magnitude are compared in absolute terms: the
  // denominator of the relative error is max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  std::size_t max_entries = 32;  // per array; larger arrays are sampled
  std::optional<std::string> fault_op;  // scale this op's adjoint (negative control)
};

struct GradcheckResult {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // entries whose stencil crossed a branch
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;
  double tolerance = 0.0;

  bool passed() const;
  /// One line per component, then a summary line.
  std::string to_text() const;
};

struct GradInput {
  std::string name;
  Tensor<double> tensor;
};

double relative_error(double analytic, double numeric, double floor);

/// Checks d loss / d input for every input; one result per input, named
/// prefix + input name. Entries whose stencil changes a relu mask or a top-k
/// selection are skipped and replaced by others. `loss` must build its graph
/// from the inputs afresh on every call.
std::vector<GradcheckResult> check_gradients(const std::function<Tensor<double>()>& loss,
                                             const std::vector<GradInput>& inputs, const GradcheckOptions& options,
                                             SplitMix64& rng, const std::string& prefix = "");

/// Primitive ops, the layer, every loss and the full weighted objective of
/// a small model on a 2 x 3 x 16 x 16 batch with 3 categories.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace corefine
