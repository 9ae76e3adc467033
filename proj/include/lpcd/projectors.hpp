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

#include "lpcd/grid.hpp"
#include "lpcd/linalg.hpp"

#include <atomic>

namespace lpcd {

namespace detail {
/// Counts Hessian constructions; lets tests assert that a layer's Hessian is
/// built once and reused across all of its columns.
inline std::atomic<long>& hessian_build_count() {
  static std::atomic<long> count{0};
  return count;
}
}  // namespace detail

/// Damped Gram matrix of a calibration activation batch.
struct Hessian {
  Matrix m;             // X^T X + damping * I, exactly symmetric
  double damping = 0.0;
  Index source_tokens = 0;
  bool singular_flag = false;  // zero diagonal survives the damping
};

inline Hessian build_hessian(const Matrix& x, double damping_fraction) {
  require(x.rows() >= 1, "build_hessian: need at least one token row");
  require(damping_fraction >= 0.0, "build_hessian: damping_fraction must be >= 0");
  detail::hessian_build_count().fetch_add(1, std::memory_order_relaxed);
  Hessian h;
  Matrix g = x.transpose() * x;
  g = 0.5 * (g + g.transpose()).eval();
  double lambda = damping_fraction * g.diagonal().mean();
  h.m = g + lambda * Matrix::Identity(g.rows(), g.cols());
  h.damping = lambda;
  h.source_tokens = x.rows();
  h.singular_flag = h.m.diagonal().minCoeff() <= 0.0;
  return h;
}

inline Hessian hessian_from_matrix(Matrix m, double damping = 0.0, Index source_tokens = 0) {
  Hessian h;
  h.m = 0.5 * (m + m.transpose()).eval();
  h.damping = damping;
  h.source_tokens = source_tokens;
  h.singular_flag = h.m.diagonal().minCoeff() <= 0.0;
  return h;
}

/// Quadratic reconstruction loss tr((W_hat - W)^T H (W_hat - W)); equals
/// ||X(W_hat - W)||_F^2 when H = X^T X.
inline double hessian_loss(const Matrix& w_hat, const Matrix& w, const Hessian& h) {
  Matrix d = w_hat - w;
  return (d.transpose() * h.m * d).trace();
}

/// Activation-aware projection: columns are quantized input-row by input-row
/// in natural order, spreading each row's rounding error over the rows that
/// are still unquantized, weighted by the Cholesky factor of H^{-1}.
inline QuantizedMatrix project_activation_aware(const Matrix& w_target, const Hessian& h,
                                                const GridParams& params) {
  require(h.m.rows() == w_target.rows(), "project_activation_aware: Hessian/weight shape mismatch");
  const Index n = w_target.rows();
  const Index m = w_target.cols();

  Eigen::LLT<Matrix> llt(h.m);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(
        "project_activation_aware: Hessian is singular; set damping_fraction > 0");
  Matrix h_inv = llt.solve(Matrix::Identity(n, n));
  h_inv = 0.5 * (h_inv + h_inv.transpose()).eval();
  Eigen::LLT<Matrix> llt_inv(h_inv);
  if (llt_inv.info() != Eigen::Success)
    throw std::runtime_error(
        "project_activation_aware: inverse Hessian not positive definite; increase damping_fraction");
  // u upper-triangular with H^{-1} = u^T u; u(i,i) scales row i's error and
  // u(i, j>i) carries it into the not-yet-quantized rows.
  Matrix u = Matrix(llt_inv.matrixL()).transpose();

  QuantizedMatrix q;
  q.bits = params.scheme.bits;
  q.scales = params.scales;
  q.zero_points = params.zero_points;
  q.codes.resize(n, m);

  Matrix work = w_target;
  const int levels = params.scheme.levels();
  for (Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd err(m);
    for (Index c = 0; c < m; ++c) {
      int32_t code = detail::nearest_code(work(i, c), params.scales(c), params.zero_points(c), levels);
      q.codes(i, c) = code;
      double v = params.scales(c) * (code - params.zero_points(c));
      err(c) = (work(i, c) - v) / u(i, i);
    }
    if (i + 1 < n) work.bottomRows(n - i - 1).noalias() -= u.row(i).tail(n - i - 1).transpose() * err;
  }
  return q;
}

inline QuantizedMatrix project_activation_aware(const Matrix& w_target, const Hessian& h,
                                                const QuantScheme& scheme) {
  return project_activation_aware(w_target, h, fit_scheme(w_target, scheme));
}

/// Exact minimizer of tr((W_hat - W)^T H (W_hat - W)) over the grid, by
/// exhaustive enumeration. The objective separates over output columns, so
/// the enumeration runs column by column; the budget guard applies to the
/// per-column assignment count levels^N. Ties keep the lexicographically
/// smallest code vector (first entry most significant).
inline QuantizedMatrix project_oracle(const Matrix& w_target, const Hessian& h,
                                      const GridParams& params) {
  require(h.m.rows() == w_target.rows(), "project_oracle: Hessian/weight shape mismatch");
  const Index n = w_target.rows();
  const Index m = w_target.cols();
  const int levels = params.scheme.levels();
  double assignments = std::pow(static_cast<double>(levels), static_cast<double>(n));
  if (assignments > static_cast<double>(1 << 20))
    throw std::invalid_argument("project_oracle: instance too large (levels^rows exceeds 2^20)");

  QuantizedMatrix q;
  q.bits = params.scheme.bits;
  q.scales = params.scales;
  q.zero_points = params.zero_points;
  q.codes.resize(n, m);

  std::vector<int32_t> codes(static_cast<size_t>(n), 0);
  for (Index c = 0; c < m; ++c) {
    auto grid = channel_grid(params, c);
    // Start at all-zero codes; g = H d and loss = d^T g are updated
    // incrementally as the odometer counts through code vectors in
    // lexicographic order (last entry fastest).
    std::fill(codes.begin(), codes.end(), 0);
    Vector d(n);
    for (Index i = 0; i < n; ++i) d(i) = grid[0] - w_target(i, c);
    Vector g = h.m * d;
    double loss = d.dot(g);

    double best_loss = loss;
    std::vector<int32_t> best = codes;
    while (true) {
      // advance odometer
      Index k = n - 1;
      while (k >= 0 && codes[static_cast<size_t>(k)] == levels - 1) {
        int32_t old_code = codes[static_cast<size_t>(k)];
        codes[static_cast<size_t>(k)] = 0;
        double delta = grid[0] - grid[static_cast<size_t>(old_code)];
        loss += delta * (2.0 * g(k) + delta * h.m(k, k));
        g += delta * h.m.col(k);
        d(k) += delta;
        --k;
      }
      if (k < 0) break;
      int32_t old_code = codes[static_cast<size_t>(k)]++;
      double delta = grid[static_cast<size_t>(old_code) + 1] - grid[static_cast<size_t>(old_code)];
      loss += delta * (2.0 * g(k) + delta * h.m(k, k));
      g += delta * h.m.col(k);
      d(k) += delta;
      if (loss < best_loss) {
        best_loss = loss;
        best = codes;
      }
    }
    for (Index i = 0; i < n; ++i) q.codes(i, c) = best[static_cast<size_t>(i)];
  }
  return q;
}

inline QuantizedMatrix project_oracle(const Matrix& w_target, const Hessian& h,
                                      const QuantScheme& scheme) {
  return project_oracle(w_target, h, fit_scheme(w_target, scheme));
}

}  // namespace lpcd
