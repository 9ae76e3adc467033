/*
 * Copyright (c) 2026 The lpcd authors. All Rights Reserved.
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

#include "lpcd/matrix.hpp"

#include <functional>

namespace lpcd {

/// Central-difference gradient, entry by entry.
inline Matrix finite_diff_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at,
                                   double epsilon = 1e-4) {
  require(epsilon > 0.0, "finite_diff_gradient: epsilon must be positive");
  Matrix g(at.rows(), at.cols());
  Matrix probe = at;
  for (Index j = 0; j < at.cols(); ++j) {
    for (Index i = 0; i < at.rows(); ++i) {
      double saved = probe(i, j);
      probe(i, j) = saved + epsilon;
      double fp = f(probe);
      probe(i, j) = saved - epsilon;
      double fm = f(probe);
      probe(i, j) = saved;
      g(i, j) = (fp - fm) / (2.0 * epsilon);
    }
  }
  return g;
}

}  // namespace lpcd
