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

namespace corefine::detail {

// C[m x n] += op(A) * op(B), all row-major. op(A) is m x k, op(B) is k x n.
// With trans_a, A is stored k x m; with trans_b, B is stored n x k.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = a[i * k + p];
        if (aip == T{0}) continue;
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* ap = a + p * m;
      const T* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T api = ap[i];
        if (api == T{0}) continue;
        T* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

}  // namespace corefine::detail
