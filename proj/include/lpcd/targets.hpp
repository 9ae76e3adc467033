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

#include "lpcd/projectors.hpp"

#include <optional>

namespace lpcd {

/// Calibration streams of one layer: the full-precision and quantized-path
/// inputs, optionally the residual streams around the layer's submodule, and
/// the derived error-propagation quantities.
struct PropagationState {
  Matrix x;      // T x N full-precision input
  Matrix x_hat;  // T x N quantized-path input
  std::optional<Matrix> r;      // T x M residual stream entering the add
  std::optional<Matrix> r_hat;  // quantized-path residual stream
  Hessian h_hat;                // Gram matrix of x_hat, damped
  Matrix c;                     // x_hat^T (x - x_hat)
  std::optional<Matrix> gamma;  // x_hat^T (r - r_hat)
  double damping_fraction = 0.0;
};

inline PropagationState make_state(const Matrix& x, const Matrix& x_hat, double damping_fraction) {
  require(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(),
          "make_state: x and x_hat must share shape");
  PropagationState s;
  s.x = x;
  s.x_hat = x_hat;
  s.h_hat = build_hessian(x_hat, damping_fraction);
  s.c = x_hat.transpose() * (x - x_hat);
  s.damping_fraction = damping_fraction;
  return s;
}

inline PropagationState make_state(const Matrix& x, const Matrix& x_hat, const Matrix& r,
                                   const Matrix& r_hat, double damping_fraction) {
  require(r.rows() == r_hat.rows() && r.cols() == r_hat.cols(),
          "make_state: r and r_hat must share shape");
  require(r.rows() == x.rows(), "make_state: residual/activation token counts differ");
  PropagationState s = make_state(x, x_hat, damping_fraction);
  s.r = r;
  s.r_hat = r_hat;
  s.gamma = x_hat.transpose() * (r - r_hat);
  return s;
}

/// Corrected target (I + alpha H_hat^{-1} C) W. alpha = 0 returns W itself.
inline Matrix qep_target(const Matrix& w, const PropagationState& state, double alpha) {
  require(w.rows() == state.c.rows(), "qep_target: weight/state shape mismatch");
  if (alpha == 0.0) return w;
  return w + alpha * solve_spd(state.h_hat.m, state.c * w, "qep_target");
}

/// Two-term corrected target (I + alpha H_hat^{-1} C) W + beta H_hat^{-1} Gamma.
inline Matrix loaq_target(const Matrix& w, const PropagationState& state, double alpha,
                          double beta) {
  require(state.r && state.r_hat && state.gamma, "loaq_target: state has no residual streams");
  require(state.gamma->cols() == w.cols(), "loaq_target: residual/weight output dims differ");
  if (beta == 0.0) return qep_target(w, state, alpha);
  return qep_target(w, state, alpha) + beta * solve_spd(state.h_hat.m, *state.gamma, "loaq_target");
}

/// LoaQ target under a frozen per-token normalization: the four streams are
/// row-scaled by the frozen scales and the plain target is formed from the
/// rescaled state. The per-feature norm weight drops out of the per-channel
/// argmin, so only row scales enter.
inline Matrix loaq_normalized_target(const Matrix& w, const PropagationState& state,
                                     const Vector& frozen_norm_scales, double alpha, double beta) {
  require(state.r && state.r_hat, "loaq_normalized_target: state has no residual streams");
  require(frozen_norm_scales.size() == state.x.rows(),
          "loaq_normalized_target: need one scale per token row");
  for (Index i = 0; i < frozen_norm_scales.size(); ++i)
    require(frozen_norm_scales(i) > 0.0, "loaq_normalized_target: scales must be positive");
  auto scaled = [&](const Matrix& m) { return (frozen_norm_scales.asDiagonal() * m).eval(); };
  PropagationState s = make_state(scaled(state.x), scaled(state.x_hat), scaled(*state.r),
                                  scaled(*state.r_hat), state.damping_fraction);
  return loaq_target(w, s, alpha, beta);
}

}  // namespace lpcd
