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
#include <vector>

namespace lpcd {

struct GradientOptions {
  double lr = 1e-5;
  int epochs = 40;
  int batch = 8;        // token rows per step; >= row count means full batch
  double tol = 1e-4;    // stop when ||g|| <= tol * (1 + ||g_0||)
  bool cosine = true;   // cosine decay of the step size to zero
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;    // minibatch shuffling
  // Accelerated first-order path for relaxations whose gradient is affine in
  // the variable (every fixed-co-block least squares here): matrix-free
  // conjugate gradients on the normal equations. Ill-conditioned systems that
  // stall plain Adam are solved to machine precision this way.
  bool conjugate = false;
};

struct GradientReport {
  bool converged = false;
  double initial_grad_norm = 0.0;
  double final_grad_norm = 0.0;
  int steps = 0;
};

using FullGradFn = std::function<Matrix(const Matrix&)>;
using BatchGradFn = std::function<Matrix(const Matrix&, const std::vector<Index>&)>;

/// Minimizes a convex quadratic given only its (affine) gradient oracle:
/// conjugate gradients on K u = rhs with K v = (grad(v) - grad(0))/2 and
/// rhs = -grad(0)/2. Returns after `max_iters` steps or once the normal
/// residual drops below `tol` relative to the right-hand side.
inline Matrix conjugate_gradient_quadratic(const Matrix& u0, const FullGradFn& grad,
                                           int max_iters = 0, double tol = 1e-12) {
  Matrix g0 = grad(Matrix::Zero(u0.rows(), u0.cols()));
  auto apply = [&](const Matrix& v) { return ((grad(v) - g0) * 0.5).eval(); };
  Matrix rhs = -0.5 * g0;
  Matrix u = u0;
  Matrix r = rhs - apply(u);
  Matrix p = r;
  double rs = r.squaredNorm();
  double tol2 = tol * tol * std::max(rhs.squaredNorm(), 1e-300);
  if (max_iters <= 0) max_iters = static_cast<int>(10 * u0.size()) + 20;
  for (int it = 0; it < max_iters && rs > tol2; ++it) {
    Matrix kp = apply(p);
    double denom = p.cwiseProduct(kp).sum();
    if (denom <= 0.0) break;  // semidefinite direction, nothing more to gain
    double step = rs / denom;
    u += step * p;
    r -= step * kp;
    double rs_new = r.squaredNorm();
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  return u;
}

/// Adaptive-moment minimization warm-started at `u0`. When `batch_grad` is
/// provided and the batch is smaller than `batch_rows`, each epoch walks a
/// seeded shuffle of the rows in minibatches; otherwise every step uses the
/// full gradient. Convergence is checked against the full gradient once per
/// epoch.
inline Matrix adam_minimize(const Matrix& u0, const FullGradFn& full_grad,
                            const GradientOptions& opt, GradientReport* report = nullptr,
                            Index batch_rows = 0, const BatchGradFn& batch_grad = nullptr) {
  require(opt.lr > 0.0, "adam_minimize: lr must be positive");
  require(opt.epochs >= 0, "adam_minimize: epochs must be >= 0");
  Matrix u = u0;
  Matrix m = Matrix::Zero(u.rows(), u.cols());
  Matrix v = Matrix::Zero(u.rows(), u.cols());

  const bool minibatch = batch_grad && batch_rows > 0 && opt.batch > 0 &&
                         static_cast<Index>(opt.batch) < batch_rows;
  const Index steps_per_epoch =
      minibatch ? (batch_rows + opt.batch - 1) / static_cast<Index>(opt.batch) : 1;
  const long total_steps = static_cast<long>(opt.epochs) * steps_per_epoch;

  GradientReport rep;
  Matrix g0 = full_grad(u);
  rep.initial_grad_norm = g0.norm();
  rep.final_grad_norm = rep.initial_grad_norm;
  const double stop_norm = opt.tol * (1.0 + rep.initial_grad_norm);

  std::vector<Index> perm(static_cast<size_t>(batch_rows));
  for (Index i = 0; i < batch_rows; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(opt.seed ^ 0x9d2c5680u);

  long step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Matrix g_full = epoch == 0 ? g0 : full_grad(u);
    rep.final_grad_norm = g_full.norm();
    if (rep.final_grad_norm <= stop_norm) {
      rep.converged = true;
      break;
    }
    if (minibatch) {
      for (size_t i = perm.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_u64() % i);
        std::swap(perm[i - 1], perm[j]);
      }
    }
    for (Index s = 0; s < steps_per_epoch; ++s) {
      Matrix g;
      if (minibatch) {
        std::vector<Index> rows;
        for (Index k = s * opt.batch; k < std::min<Index>((s + 1) * opt.batch, batch_rows); ++k)
          rows.push_back(perm[static_cast<size_t>(k)]);
        g = batch_grad(u, rows);
      } else {
        g = g_full;  // single step per epoch in full-batch mode
      }
      ++step;
      double lr_t = opt.cosine && total_steps > 0
                        ? opt.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step - 1) /
                                                         static_cast<double>(total_steps)))
                        : opt.lr;
      m = opt.beta1 * m + (1.0 - opt.beta1) * g;
      v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
      double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      Matrix m_hat = m / bc1;
      Matrix v_hat = v / bc2;
      u.array() -= lr_t * m_hat.array() / (v_hat.array().sqrt() + opt.eps);
    }
    rep.steps = static_cast<int>(step);
  }
  if (!rep.converged) {
    Matrix g_final = full_grad(u);
    rep.final_grad_norm = g_final.norm();
    rep.converged = rep.final_grad_norm <= stop_norm;
  }
  rep.steps = static_cast<int>(step);
  if (report) *report = rep;
  return u;
}

}  // namespace lpcd
