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
#include "lpcd/projectors.hpp"

namespace lpcd {

// ---------------------------------------------------------------------------
// Activation-side error compensation
// ---------------------------------------------------------------------------

/// Minimum-norm least-squares solution of || U W_hat - X W ||_F^2: the
/// corrected activations that best reproduce the full-precision layer output
/// through the already-quantized weights.
inline Matrix qep_activation_relax(const Matrix& x, const Matrix& w, const Matrix& w_hat) {
  require(x.cols() == w.rows(), "qep_activation_relax: x/w shape mismatch");
  require(w.rows() == w_hat.rows() && w.cols() == w_hat.cols(),
          "qep_activation_relax: w/w_hat shape mismatch");
  return (x * w) * pinv(w_hat);
}

// ---------------------------------------------------------------------------
// KV-cache updates
// ---------------------------------------------------------------------------

/// Relaxed key cache K (I + alpha_K H_Q^{-1} C_Q)^T aligning the pre-softmax
/// scores Q_hat K^T with Q K^T. alpha_K = 0 returns K unchanged.
inline Matrix kv_key_relax(const Matrix& k, const Matrix& q, const Matrix& q_hat, double alpha_k,
                           double damping_fraction = 0.0) {
  require(q.rows() == q_hat.rows() && q.cols() == q_hat.cols(),
          "kv_key_relax: q/q_hat shape mismatch");
  require(k.cols() == q.cols(), "kv_key_relax: key/query head dims differ");
  if (alpha_k == 0.0) return k;
  Hessian h = build_hessian(q_hat, damping_fraction);
  Matrix c = q_hat.transpose() * (q - q_hat);
  Matrix m = solve_spd(h.m, c, "kv_key_relax");  // H_Q^{-1} C_Q
  return k + alpha_k * k * m.transpose();
}

/// Relaxed value cache (I + alpha_V H_A^{-1} C_A) V aligning the post-softmax
/// outputs A_hat V with A V. alpha_V = 0 returns V unchanged.
inline Matrix kv_value_relax(const Matrix& v, const Matrix& a, const Matrix& a_hat, double alpha_v,
                             double damping_fraction = 0.0) {
  require(a.rows() == a_hat.rows() && a.cols() == a_hat.cols(),
          "kv_value_relax: a/a_hat shape mismatch");
  require(a.cols() == v.rows(), "kv_value_relax: attention/value shape mismatch");
  if (alpha_v == 0.0) return v;
  Hessian h = build_hessian(a_hat, damping_fraction);
  Matrix c = a_hat.transpose() * (a - a_hat);
  return v + alpha_v * solve_spd(h.m, c * v, "kv_value_relax");
}

enum class KvAxis { per_channel, per_token };

// Default granularities: keys quantize best per channel, values per token.
inline constexpr KvAxis kKeyCacheAxis = KvAxis::per_channel;
inline constexpr KvAxis kValueCacheAxis = KvAxis::per_token;

/// Direct projection of a KV cache. Per-token granularity is per-channel on
/// the transposed cache; the returned codes are stored transposed in that
/// case and kv_dequantize undoes it.
inline QuantizedMatrix kv_project(const Matrix& cache, KvAxis axis, const QuantScheme& scheme) {
  QuantScheme s = scheme;
  s.granularity = Granularity::per_channel;
  if (axis == KvAxis::per_token) {
    Matrix t = cache.transpose();
    return project_direct(t, fit_scheme(t, s));
  }
  return project_direct(cache, fit_scheme(cache, s));
}

inline Matrix kv_dequantize(const QuantizedMatrix& q, KvAxis axis) {
  Matrix m = dequantize(q);
  if (axis == KvAxis::per_token) return m.transpose();
  return m;
}

// ---------------------------------------------------------------------------
// Orthogonal rotation block
// ---------------------------------------------------------------------------

/// Rotation block state: the balance weights and the normal-equation pair
/// H_R = lambda_a X^T X + lambda_w W W^T, B_R = lambda_a X^T X_hat + lambda_w W W_hat^T.
struct RotationBlock {
  Matrix r;
  double lambda_a = 1.0;
  double lambda_w = 1.0;
  Matrix h_r;
  Matrix b_r;
};

inline double rotation_loss(const Matrix& r, const Matrix& x, const Matrix& x_hat, const Matrix& w,
                            const Matrix& w_hat, double lambda_a, double lambda_w) {
  return lambda_a * (x * r - x_hat).squaredNorm() +
         lambda_w * (r.transpose() * w - w_hat).squaredNorm();
}

inline Matrix rotation_grad(const Matrix& r, const Matrix& x, const Matrix& x_hat, const Matrix& w,
                            const Matrix& w_hat, double lambda_a, double lambda_w) {
  return 2.0 * lambda_a * x.transpose() * (x * r - x_hat) +
         2.0 * lambda_w * (w * w.transpose() * r - w * w_hat.transpose());
}

/// Solves the rotation normal equations H_R R = B_R.
inline Matrix rotation_relax(const Matrix& x, const Matrix& x_hat, const Matrix& w,
                             const Matrix& w_hat, double lambda_a, double lambda_w,
                             double damping_fraction = 0.0) {
  require(lambda_a >= 0.0 && lambda_w >= 0.0, "rotation_relax: lambdas must be nonnegative");
  Matrix h_r = lambda_a * (x.transpose() * x) + lambda_w * (w * w.transpose());
  h_r = 0.5 * (h_r + h_r.transpose()).eval();
  double lambda = damping_fraction * h_r.diagonal().mean();
  h_r += lambda * Matrix::Identity(h_r.rows(), h_r.cols());
  Matrix b_r = lambda_a * (x.transpose() * x_hat) + lambda_w * (w * w_hat.transpose());
  return solve_spd(h_r, b_r, "rotation_relax");
}

/// Nearest orthogonal matrix U V^T from the SVD of the relaxed rotation.
/// When `proper` is set, the sign of U's last column is flipped as needed so
/// det(R) = +1.
inline Matrix rotation_project(const Matrix& r_bar, bool proper = false) {
  require(r_bar.rows() == r_bar.cols(), "rotation_project: rotation must be square");
  Eigen::JacobiSVD<Matrix> svd(r_bar, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix u = svd.matrixU();
  Matrix v = svd.matrixV();
  if (proper && (u * v.transpose()).determinant() < 0.0) u.col(u.cols() - 1) *= -1.0;
  return u * v.transpose();
}

// ---------------------------------------------------------------------------
// Low-rank error compensation
// ---------------------------------------------------------------------------

struct LoraBlock {
  Matrix w0_hat;  // base quantized weight
  Index rank = 0;
  Matrix b;  // N x r
  Matrix a;  // r x M
  Matrix e;  // b * a

  Matrix corrected() const { return w0_hat + e; }
};

/// Minimum-norm minimizer of || X_hat U - (X W - X_hat W0_hat) ||_F^2.
inline Matrix lora_relax(const Matrix& w0_hat, const Matrix& x, const Matrix& x_hat,
                         const Matrix& w) {
  require(x.cols() == w.rows(), "lora_relax: x/w shape mismatch");
  Matrix residual = x * w - x_hat * w0_hat;
  return pinv(x_hat) * residual;
}

struct LoraFactors {
  Matrix e;
  Matrix b;
  Matrix a;
};

/// Best rank-r approximation of E_bar in the H_hat-weighted norm
/// tr(E^T H_hat E): truncated SVD of H_hat^{1/2} E_bar mapped back through
/// H_hat^{-1/2}, with the B/A factorization splitting the singular values.
inline LoraFactors lora_project(const Matrix& e_bar, const Hessian& h_hat, Index rank) {
  require(rank >= 1, "lora_project: rank must be >= 1");
  require(h_hat.m.rows() == e_bar.rows(), "lora_project: Hessian/E shape mismatch");
  SymmetricRoots roots = sym_sqrt_pair(h_hat.m, h_hat.damping);
  Matrix f = roots.sqrt * e_bar;
  Eigen::JacobiSVD<Matrix> svd(f, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  double tol = kPinvCutoff * (sv.size() > 0 ? sv(0) : 0.0);
  Index keep = 0;
  for (Index i = 0; i < std::min<Index>(rank, sv.size()); ++i)
    if (sv(i) > tol) ++keep;
  LoraFactors out;
  if (keep == 0) {
    out.e = Matrix::Zero(e_bar.rows(), e_bar.cols());
    out.b = Matrix::Zero(e_bar.rows(), 1);
    out.a = Matrix::Zero(1, e_bar.cols());
    return out;
  }
  Matrix u_r = svd.matrixU().leftCols(keep);
  Matrix v_r = svd.matrixV().leftCols(keep);
  Vector s_r = sv.head(keep);
  Vector s_sqrt = s_r.array().sqrt();
  out.b = roots.inv_sqrt * u_r * s_sqrt.asDiagonal();
  out.a = s_sqrt.asDiagonal() * v_r.transpose();
  out.e = roots.inv_sqrt * u_r * s_r.asDiagonal() * v_r.transpose();
  return out;
}

}  // namespace lpcd
