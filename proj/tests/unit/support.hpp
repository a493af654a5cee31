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

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>

#include "corefine/random.hpp"
#include "corefine/tensor.hpp"

namespace testing_support {

using corefine::Shape;
using corefine::SplitMix64;
using D = corefine::Tensor<double>;

inline D random_tensor(const Shape& shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<double> v(corefine::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D(shape, std::move(v), grad);
}

// Plain two-point central difference of a scalar function of one tensor's
// entries, written independently of the library's own checker.
inline std::vector<double> numeric_grad(const std::function<double()>& f, D& x, double h = 1e-6) {
  std::vector<double> g(x.numel());
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double up = f();
    v[i] = saved - h;
    const double down = f();
    v[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline void expect_close(const std::vector<double>& a, const std::vector<double>& b, double rel,
                         double abs_floor = 1e-8) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), abs_floor});
    EXPECT_LE(std::abs(a[i] - b[i]) / scale, rel) << "entry " << i << ": " << a[i] << " vs " << b[i];
  }
}

inline std::vector<double> to_vec(const D& t) { return {t.values().begin(), t.values().end()}; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("corefine_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
