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

#include "lpcd/gradient.hpp"
#include "lpcd/linalg.hpp"

#include <vector>

namespace lpcd {

enum class MaskOrientation { causal_lower, causal_upper };

/// Dimensions and wiring of one toy attention/MLP stack. Queries have
/// `heads` heads; one key and one value projection is shared by each run of
/// `group_size` consecutive heads.
struct SubmoduleSpec {
  Index d_model = 16;
  Index heads = 4;
  Index group_size = 2;  // query heads per shared key/value
  Index d_k = 4;
  Index d_v = 4;
  Index d_up = 32;
  double rope_base = 10000.0;
  MaskOrientation mask_orientation = MaskOrientation::causal_lower;

  Index kv_groups() const { return heads / group_size; }
  Index group_of(Index head) const { return head / group_size; }

  void validate() const {
    require(d_model >= 1 && heads >= 1 && group_size >= 1 && d_k >= 1 && d_v >= 1 && d_up >= 1,
            "SubmoduleSpec: dimensions must be positive");
    require(heads % group_size == 0, "SubmoduleSpec: heads must be divisible by group_size");
    require(d_model == heads * d_k, "SubmoduleSpec: toy wiring requires d_model == heads * d_k");
    require(d_k % 2 == 0, "SubmoduleSpec: rotary embedding needs even d_k");
  }
};

/// Binary causal mask, mask(i, j) = 1 iff key j is visible to query i.
inline Matrix causal_mask(Index tokens, MaskOrientation orientation) {
  Matrix m = Matrix::Zero(tokens, tokens);
  for (Index i = 0; i < tokens; ++i)
    for (Index j = 0; j <= i; ++j) m(i, j) = 1.0;
  if (orientation == MaskOrientation::causal_upper) return m.transpose();
  return m;
}

// ---------------------------------------------------------------------------
// Rotary positional encoding
// ---------------------------------------------------------------------------

namespace detail {
/// Rotates row i of z as the token at position positions[i] (or i itself
/// when positions is null).
inline Matrix rope_transform(const Matrix& z, double base, double sign,
                             const std::vector<Index>* positions = nullptr) {
  require(z.cols() % 2 == 0, "rope_apply: feature dimension must be even");
  const Index rows = z.rows();
  const Index pairs = z.cols() / 2;
  Matrix out(z.rows(), z.cols());
  for (Index p = 0; p < pairs; ++p) {
    double theta = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(z.cols()));
    for (Index i = 0; i < rows; ++i) {
      Index t = positions ? (*positions)[static_cast<size_t>(i)] : i;
      double angle = sign * static_cast<double>(t) * theta;
      double c = std::cos(angle);
      double s = std::sin(angle);
      double x = z(i, 2 * p);
      double y = z(i, 2 * p + 1);
      out(i, 2 * p) = c * x - s * y;
      out(i, 2 * p + 1) = s * x + c * y;
    }
  }
  return out;
}

inline Matrix select_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}
}  // namespace detail

/// Rotates each feature pair (2i, 2i+1) of token row m by m * base^{-2i/d}.
inline Matrix rope_apply(const Matrix& z, double base) {
  return detail::rope_transform(z, base, 1.0);
}

/// Adjoint (= inverse) of rope_apply; rotations are orthogonal row by row.
inline Matrix rope_adjoint(const Matrix& z, double base) {
  return detail::rope_transform(z, base, -1.0);
}

/// Dense matrix P with vec(rope_apply(Z)) = P vec(Z) (column-major vec).
/// Only used by the design-matrix oracles on tiny instances.
inline Matrix rope_vec_operator(Index tokens, Index d, double base) {
  require(d % 2 == 0, "rope_vec_operator: feature dimension must be even");
  Matrix p = Matrix::Zero(tokens * d, tokens * d);
  for (Index pair = 0; pair < d / 2; ++pair) {
    double theta = std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(d));
    for (Index t = 0; t < tokens; ++t) {
      double angle = static_cast<double>(t) * theta;
      double c = std::cos(angle);
      double s = std::sin(angle);
      Index ix = 2 * pair * tokens + t;
      Index iy = (2 * pair + 1) * tokens + t;
      p(ix, ix) = c;
      p(ix, iy) = -s;
      p(iy, ix) = s;
      p(iy, iy) = c;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Norms, activations, attention forward
// ---------------------------------------------------------------------------

/// Per-row z / sqrt(mean(z^2) + eps), scaled per feature by `weight`.
inline Matrix rmsnorm(const Matrix& z, const Vector& weight, double eps = 1e-6) {
  require(eps > 0.0, "rmsnorm: eps must be positive");
  require(weight.size() == z.cols(), "rmsnorm: one weight per feature");
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    double ms = z.row(i).squaredNorm() / static_cast<double>(z.cols());
    out.row(i) = z.row(i) / std::sqrt(ms + eps);
  }
  return out * weight.asDiagonal();
}

/// Multipliers 1/sqrt(mean(z^2) + eps) per token row; the frozen per-token
/// scales used by the normalized residual objective.
inline Vector rms_scales(const Matrix& z, double eps = 1e-6) {
  Vector s(z.rows());
  for (Index i = 0; i < z.rows(); ++i) {
    double ms = z.row(i).squaredNorm() / static_cast<double>(z.cols());
    s(i) = 1.0 / std::sqrt(ms + eps);
  }
  return s;
}

inline Matrix silu(const Matrix& z) {
  return z.array() / (1.0 + (-z.array()).exp());
}

/// Row-wise softmax over unmasked entries; masked entries are exactly zero.
/// A fully masked row yields a zero row.
inline Matrix masked_softmax(const Matrix& scores, const Matrix& mask) {
  require(scores.rows() == mask.rows() && scores.cols() == mask.cols(),
          "masked_softmax: mask shape mismatch");
  Matrix out = Matrix::Zero(scores.rows(), scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < scores.cols(); ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, scores(i, j));
    if (!std::isfinite(mx)) continue;
    double denom = 0.0;
    for (Index j = 0; j < scores.cols(); ++j)
      if (mask(i, j) != 0.0) denom += std::exp(scores(i, j) - mx);
    for (Index j = 0; j < scores.cols(); ++j)
      if (mask(i, j) != 0.0) out(i, j) = std::exp(scores(i, j) - mx) / denom;
  }
  return out;
}

/// One attention evaluation: scores, softmax weights, group value
/// projections, the concatenated head features, and the output projection.
struct AttentionPath {
  std::vector<Matrix> scores;   // per head, scaled pre-softmax (unmasked values)
  std::vector<Matrix> weights;  // per head, masked softmax
  std::vector<Matrix> values;   // per kv group, T x d_v
  Matrix concat;                // T x (heads * d_v)
  Matrix out;                   // T x d_model
};

/// Softmaxed attention weights per head, without the value/output stages.
inline std::vector<Matrix> attention_weights(const Matrix& x, const Matrix& w_q,
                                             const Matrix& w_k, const SubmoduleSpec& spec,
                                             const Matrix& mask) {
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(spec.d_k));
  std::vector<Matrix> weights;
  weights.reserve(static_cast<size_t>(spec.heads));
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    Matrix qf = rope_apply(x * w_q.middleCols(h * spec.d_k, spec.d_k), spec.rope_base) * inv_sqrt_dk;
    Matrix kf = rope_apply(x * w_k.middleCols(g * spec.d_k, spec.d_k), spec.rope_base);
    weights.push_back(masked_softmax(qf * kf.transpose(), mask));
  }
  return weights;
}

inline AttentionPath attention_forward(const Matrix& x, const Matrix& w_q, const Matrix& w_k,
                                       const Matrix& w_v, const Matrix& w_o,
                                       const SubmoduleSpec& spec, const Matrix& mask) {
  spec.validate();
  const Index t = x.rows();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(spec.d_k));
  AttentionPath path;
  path.values.reserve(static_cast<size_t>(spec.kv_groups()));
  for (Index g = 0; g < spec.kv_groups(); ++g)
    path.values.push_back(x * w_v.middleCols(g * spec.d_v, spec.d_v));
  path.concat.resize(t, spec.heads * spec.d_v);
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    Matrix qf = rope_apply(x * w_q.middleCols(h * spec.d_k, spec.d_k), spec.rope_base) * inv_sqrt_dk;
    Matrix kf = rope_apply(x * w_k.middleCols(g * spec.d_k, spec.d_k), spec.rope_base);
    Matrix s = qf * kf.transpose();
    path.scores.push_back(s);
    path.weights.push_back(masked_softmax(s, mask));
    path.concat.middleCols(h * spec.d_v, spec.d_v) = path.weights.back() * path.values[static_cast<size_t>(g)];
  }
  path.out = path.concat * w_o;
  return path;
}

// ---------------------------------------------------------------------------
// Relax solver selection shared by the submodule relax steps
// ---------------------------------------------------------------------------

struct RelaxOptions {
  enum class Mode { gradient, design_matrix_oracle };
  Mode mode = Mode::gradient;
  GradientOptions grad;
};

namespace detail {
inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Eigen::Map<const Vector> as_vec(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix from_vec(const Vector& v, Index rows, Index cols) {
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// QK submodule: masked rotary score matching
// ---------------------------------------------------------------------------

/// Fixed data of the QK objective: the quantized-path input and the masked
/// full-precision reference scores per head. The 1/sqrt(d_k) score scaling is
/// folded into the query features.
struct QkProblem {
  SubmoduleSpec spec;
  Matrix mask;                          // T x T binary
  Matrix x_hat;                         // T x d_model
  std::vector<Matrix> reference_masked; // per head: mask ⊙ reference scores

  double inv_sqrt_dk() const { return 1.0 / std::sqrt(static_cast<double>(spec.d_k)); }
};

/// Masked reference scores of the full-precision path.
inline std::vector<Matrix> masked_reference_scores(const Matrix& x, const Matrix& w_q,
                                                   const Matrix& w_k, const SubmoduleSpec& spec,
                                                   const Matrix& mask) {
  const double c = 1.0 / std::sqrt(static_cast<double>(spec.d_k));
  std::vector<Matrix> refs;
  refs.reserve(static_cast<size_t>(spec.heads));
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    Matrix qf = rope_apply(x * w_q.middleCols(h * spec.d_k, spec.d_k), spec.rope_base) * c;
    Matrix kf = rope_apply(x * w_k.middleCols(g * spec.d_k, spec.d_k), spec.rope_base);
    refs.push_back(mask.cwiseProduct(qf * kf.transpose()));
  }
  return refs;
}

inline QkProblem make_qk_problem(const SubmoduleSpec& spec, const Matrix& mask, const Matrix& x,
                                 const Matrix& x_hat, const Matrix& w_q, const Matrix& w_k) {
  spec.validate();
  QkProblem p;
  p.spec = spec;
  p.mask = mask;
  p.x_hat = x_hat;
  p.reference_masked = masked_reference_scores(x, w_q, w_k, spec, mask);
  return p;
}

enum class QkSide { query, key };

namespace detail {
inline Matrix qk_qfeat(const QkProblem& p, const Matrix& w_q, Index h) {
  return rope_apply(p.x_hat * w_q.middleCols(h * p.spec.d_k, p.spec.d_k), p.spec.rope_base) *
         p.inv_sqrt_dk();
}
inline Matrix qk_kfeat(const QkProblem& p, const Matrix& w_k, Index g) {
  return rope_apply(p.x_hat * w_k.middleCols(g * p.spec.d_k, p.spec.d_k), p.spec.rope_base);
}
}  // namespace detail

/// sum_h || mask ⊙ (S_hat^(h) - S_ref^(h)) ||_F^2
inline double qk_loss(const QkProblem& p, const Matrix& w_q_hat, const Matrix& w_k_hat) {
  double loss = 0.0;
  for (Index h = 0; h < p.spec.heads; ++h) {
    Matrix s = detail::qk_qfeat(p, w_q_hat, h) *
               detail::qk_kfeat(p, w_k_hat, p.spec.group_of(h)).transpose();
    loss += (p.mask.cwiseProduct(s) - p.reference_masked[static_cast<size_t>(h)]).squaredNorm();
  }
  return loss;
}

/// Analytic gradient with respect to the chosen side. `query_rows`, when
/// given, restricts the loss to those query rows (minibatching); only the
/// selected score rows are formed.
inline Matrix qk_grad(const QkProblem& p, QkSide side, const Matrix& w_q_hat,
                      const Matrix& w_k_hat, const std::vector<Index>* query_rows = nullptr) {
  const SubmoduleSpec& spec = p.spec;
  Matrix grad = Matrix::Zero(spec.d_model, side == QkSide::query ? spec.heads * spec.d_k
                                                                 : spec.kv_groups() * spec.d_k);
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    Matrix kf = detail::qk_kfeat(p, w_k_hat, g);
    if (!query_rows) {
      Matrix qf = detail::qk_qfeat(p, w_q_hat, h);
      Matrix d = 2.0 * (p.mask.cwiseProduct(qf * kf.transpose()) -
                        p.reference_masked[static_cast<size_t>(h)]);
      if (side == QkSide::query) {
        Matrix g_feat = rope_adjoint(d * kf, spec.rope_base) * p.inv_sqrt_dk();
        grad.middleCols(h * spec.d_k, spec.d_k) += p.x_hat.transpose() * g_feat;
      } else {
        Matrix g_feat = rope_adjoint(d.transpose() * qf, spec.rope_base);
        grad.middleCols(g * spec.d_k, spec.d_k) += p.x_hat.transpose() * g_feat;
      }
      continue;
    }
    const std::vector<Index>& rows = *query_rows;
    Matrix x_rows = detail::select_rows(p.x_hat, rows);
    Matrix qf_rows = detail::rope_transform(x_rows * w_q_hat.middleCols(h * spec.d_k, spec.d_k),
                                            spec.rope_base, 1.0, &rows) *
                     p.inv_sqrt_dk();
    Matrix mask_rows = detail::select_rows(p.mask, rows);
    Matrix ref_rows = detail::select_rows(p.reference_masked[static_cast<size_t>(h)], rows);
    Matrix d_rows = 2.0 * (mask_rows.cwiseProduct(qf_rows * kf.transpose()) - ref_rows);
    if (side == QkSide::query) {
      Matrix g_feat =
          detail::rope_transform(d_rows * kf, spec.rope_base, -1.0, &rows) * p.inv_sqrt_dk();
      grad.middleCols(h * spec.d_k, spec.d_k) += x_rows.transpose() * g_feat;
    } else {
      Matrix g_feat = rope_adjoint(d_rows.transpose() * qf_rows, spec.rope_base);
      grad.middleCols(g * spec.d_k, spec.d_k) += p.x_hat.transpose() * g_feat;
    }
  }
  return grad;
}

/// Exact least-squares solve of the masked score objective through the
/// vectorized design matrices. Practical only on tiny instances; refuses
/// anything larger.
inline Matrix qk_relax_oracle(const QkProblem& p, QkSide side, const Matrix& w_q_hat,
                              const Matrix& w_k_hat) {
  const SubmoduleSpec& spec = p.spec;
  const Index t = p.x_hat.rows();
  if (static_cast<double>(t) * t * spec.d_model * spec.d_k > static_cast<double>(1 << 22))
    throw std::invalid_argument("qk_relax_oracle: instance too large for the design matrix");
  Matrix r_theta = rope_vec_operator(t, spec.d_k, spec.rope_base);
  Matrix lift = detail::kron(Matrix::Identity(spec.d_k, spec.d_k), p.x_hat);  // vec(W) -> vec(X_hat W)

  if (side == QkSide::query) {
    // Per-head independent solves: vec(M ⊙ S) = D_M (K_feat ⊗ I_T) R_theta lift vec(W_q_h)
    Matrix out(spec.d_model, spec.heads * spec.d_k);
    for (Index h = 0; h < spec.heads; ++h) {
      Matrix kf = detail::qk_kfeat(p, w_k_hat, spec.group_of(h));
      Matrix z = detail::kron(kf, Matrix::Identity(t, t)) * r_theta * lift * p.inv_sqrt_dk();
      Vector target = detail::as_vec(p.reference_masked[static_cast<size_t>(h)]);
      Vector m_diag = detail::as_vec(p.mask);
      for (Index row = 0; row < z.rows(); ++row)
        if (m_diag(row) == 0.0) z.row(row).setZero();
      Vector w = pinv(z) * target;
      out.middleCols(h * spec.d_k, spec.d_k) = detail::from_vec(w, spec.d_model, spec.d_k);
    }
    return out;
  }
  // Key side: the group's weights serve every head in the group, so the
  // per-head systems are stacked. Transposed score matrices turn the head's
  // objective into a least squares in vec(W_k_g):
  //   || M^T ⊙ (S_hat^T - S_ref^T) || with vec(S_hat^T) = (Q_feat ⊗ I_T) R_theta lift vec(W_k_g)
  Matrix out(spec.d_model, spec.kv_groups() * spec.d_k);
  Matrix mask_t = p.mask.transpose();
  Vector m_diag = detail::as_vec(mask_t);
  for (Index g = 0; g < spec.kv_groups(); ++g) {
    Matrix z_stack(t * t * spec.group_size, spec.d_model * spec.d_k);
    Vector target_stack(t * t * spec.group_size);
    Index at = 0;
    for (Index h = g * spec.group_size; h < (g + 1) * spec.group_size; ++h) {
      Matrix qf = detail::qk_qfeat(p, w_q_hat, h);
      Matrix z = detail::kron(qf, Matrix::Identity(t, t)) * r_theta * lift;
      Matrix ref_t = p.reference_masked[static_cast<size_t>(h)].transpose();
      Vector target = detail::as_vec(ref_t);
      for (Index row = 0; row < z.rows(); ++row)
        if (m_diag(row) == 0.0) z.row(row).setZero();
      z_stack.middleRows(at, t * t) = z;
      target_stack.segment(at, t * t) = target;
      at += t * t;
    }
    Vector w = pinv(z_stack) * target_stack;
    out.middleCols(g * spec.d_k, spec.d_k) = detail::from_vec(w, spec.d_model, spec.d_k);
  }
  return out;
}

/// Continuous relaxation of one QK side with the other fixed.
inline Matrix qk_relax(const QkProblem& p, QkSide side, const Matrix& w_q_hat,
                       const Matrix& w_k_hat, const RelaxOptions& opt,
                       GradientReport* report = nullptr) {
  if (opt.mode == RelaxOptions::Mode::design_matrix_oracle)
    return qk_relax_oracle(p, side, w_q_hat, w_k_hat);
  const Matrix& start = side == QkSide::query ? w_q_hat : w_k_hat;
  FullGradFn grad = [&](const Matrix& u) {
    return side == QkSide::query ? qk_grad(p, side, u, w_k_hat) : qk_grad(p, side, w_q_hat, u);
  };
  if (opt.grad.conjugate) return conjugate_gradient_quadratic(start, grad);
  BatchGradFn batch = [&](const Matrix& u, const std::vector<Index>& rows) {
    return side == QkSide::query ? qk_grad(p, side, u, w_k_hat, &rows)
                                 : qk_grad(p, side, w_q_hat, u, &rows);
  };
  return adam_minimize(start, grad, opt.grad, report, p.x_hat.rows(), batch);
}

// ---------------------------------------------------------------------------
// VO submodule: attention aggregation with residual matching
// ---------------------------------------------------------------------------

/// Fixed data of the VO objective. The softmaxed attention weights of both
/// paths are constants here (the quantized-path weights come from the
/// already-quantized QK stage).
struct VoProblem {
  SubmoduleSpec spec;
  std::vector<Matrix> weights_full;  // per head, T x T
  std::vector<Matrix> weights_hat;   // per head, T x T
  Matrix x, x_hat;                   // T x d_model inputs of the value projection
  Matrix r, r_hat;                   // residual streams, T x d_model
  Matrix w_v, w_o;                   // full-precision weights
  Matrix target;                     // Y = Omega + R
};

/// Concat_h(S^(h) (X W_V^{(g(h))})) for a given set of attention weights.
inline Matrix vo_concat(const SubmoduleSpec& spec, const std::vector<Matrix>& weights,
                        const Matrix& x, const Matrix& w_v) {
  Matrix concat(x.rows(), spec.heads * spec.d_v);
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    concat.middleCols(h * spec.d_v, spec.d_v) =
        weights[static_cast<size_t>(h)] * (x * w_v.middleCols(g * spec.d_v, spec.d_v));
  }
  return concat;
}

inline VoProblem make_vo_problem(const SubmoduleSpec& spec, std::vector<Matrix> weights_full,
                                 std::vector<Matrix> weights_hat, const Matrix& x,
                                 const Matrix& x_hat, const Matrix& r, const Matrix& r_hat,
                                 const Matrix& w_v, const Matrix& w_o) {
  spec.validate();
  VoProblem p;
  p.spec = spec;
  p.weights_full = std::move(weights_full);
  p.weights_hat = std::move(weights_hat);
  p.x = x;
  p.x_hat = x_hat;
  p.r = r;
  p.r_hat = r_hat;
  p.w_v = w_v;
  p.w_o = w_o;
  p.target = vo_concat(spec, p.weights_full, x, w_v) * w_o + r;
  return p;
}

inline double vo_loss(const VoProblem& p, const Matrix& w_v_hat, const Matrix& w_o_hat) {
  Matrix y_hat = vo_concat(p.spec, p.weights_hat, p.x_hat, w_v_hat) * w_o_hat + p.r_hat;
  return (y_hat - p.target).squaredNorm();
}

namespace detail {
/// Concat of the selected output rows only; attention still reads every key.
inline Matrix vo_concat_rows(const SubmoduleSpec& spec, const std::vector<Matrix>& weights,
                             const Matrix& x, const Matrix& w_v, const std::vector<Index>& rows) {
  Matrix concat(static_cast<Index>(rows.size()), spec.heads * spec.d_v);
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    concat.middleCols(h * spec.d_v, spec.d_v) =
        select_rows(weights[static_cast<size_t>(h)], rows) *
        (x * w_v.middleCols(g * spec.d_v, spec.d_v));
  }
  return concat;
}
}  // namespace detail

/// Gradient of the VO loss with respect to the full value weight matrix.
inline Matrix vo_grad_value(const VoProblem& p, const Matrix& w_v_hat, const Matrix& w_o_hat,
                            const std::vector<Index>* token_rows = nullptr) {
  const SubmoduleSpec& spec = p.spec;
  Matrix grad = Matrix::Zero(spec.d_model, spec.kv_groups() * spec.d_v);
  if (!token_rows) {
    Matrix d =
        2.0 * (vo_concat(spec, p.weights_hat, p.x_hat, w_v_hat) * w_o_hat + p.r_hat - p.target);
    for (Index h = 0; h < spec.heads; ++h) {
      Index g = spec.group_of(h);
      Matrix w_o_h = w_o_hat.middleRows(h * spec.d_v, spec.d_v);
      grad.middleCols(g * spec.d_v, spec.d_v) +=
          p.x_hat.transpose() * p.weights_hat[static_cast<size_t>(h)].transpose() * d *
          w_o_h.transpose();
    }
    return grad;
  }
  const std::vector<Index>& rows = *token_rows;
  Matrix d_rows = 2.0 * (detail::vo_concat_rows(spec, p.weights_hat, p.x_hat, w_v_hat, rows) *
                             w_o_hat +
                         detail::select_rows(p.r_hat, rows) - detail::select_rows(p.target, rows));
  for (Index h = 0; h < spec.heads; ++h) {
    Index g = spec.group_of(h);
    Matrix w_o_h = w_o_hat.middleRows(h * spec.d_v, spec.d_v);
    Matrix s_rows = detail::select_rows(p.weights_hat[static_cast<size_t>(h)], rows);
    grad.middleCols(g * spec.d_v, spec.d_v) +=
        p.x_hat.transpose() * s_rows.transpose() * d_rows * w_o_h.transpose();
  }
  return grad;
}

inline Matrix vo_grad_output(const VoProblem& p, const Matrix& w_v_hat, const Matrix& w_o_hat,
                             const std::vector<Index>* token_rows = nullptr) {
  if (!token_rows) {
    Matrix concat_hat = vo_concat(p.spec, p.weights_hat, p.x_hat, w_v_hat);
    Matrix d = 2.0 * (concat_hat * w_o_hat + p.r_hat - p.target);
    return concat_hat.transpose() * d;
  }
  const std::vector<Index>& rows = *token_rows;
  Matrix concat_rows = detail::vo_concat_rows(p.spec, p.weights_hat, p.x_hat, w_v_hat, rows);
  Matrix d_rows = 2.0 * (concat_rows * w_o_hat + detail::select_rows(p.r_hat, rows) -
                         detail::select_rows(p.target, rows));
  return concat_rows.transpose() * d_rows;
}

/// Exact O-step: least squares of concat_hat * W_O against Y - R_hat, with a
/// pseudoinverse fallback when the head features are rank deficient.
inline Matrix vo_relax_output(const VoProblem& p, const Matrix& w_v_hat) {
  Matrix concat_hat = vo_concat(p.spec, p.weights_hat, p.x_hat, w_v_hat);
  return lstsq(concat_hat, p.target - p.r_hat);
}

/// Design-matrix solve for one group's value weights, all else fixed.
inline Matrix vo_relax_value_oracle(const VoProblem& p, Index group, const Matrix& w_v_hat,
                                    const Matrix& w_o_hat) {
  const SubmoduleSpec& spec = p.spec;
  const Index t = p.x_hat.rows();
  if (static_cast<double>(t) * spec.d_model * spec.d_model * spec.d_v >
      static_cast<double>(1 << 22))
    throw std::invalid_argument("vo_relax_value_oracle: instance too large for the design matrix");
  // Y_hat without group g's contribution
  Matrix y_rest = p.r_hat;
  for (Index h = 0; h < spec.heads; ++h) {
    if (spec.group_of(h) == group) continue;
    Index g = spec.group_of(h);
    y_rest += p.weights_hat[static_cast<size_t>(h)] *
              (p.x_hat * w_v_hat.middleCols(g * spec.d_v, spec.d_v)) *
              w_o_hat.middleRows(h * spec.d_v, spec.d_v);
  }
  Matrix z = Matrix::Zero(t * spec.d_model, spec.d_model * spec.d_v);
  for (Index h = group * spec.group_size; h < (group + 1) * spec.group_size; ++h) {
    Matrix w_o_h = w_o_hat.middleRows(h * spec.d_v, spec.d_v);
    z += detail::kron(w_o_h.transpose(), p.weights_hat[static_cast<size_t>(h)] * p.x_hat);
  }
  Matrix residual = p.target - y_rest;
  Vector w = pinv(z) * detail::as_vec(residual);
  return detail::from_vec(w, spec.d_model, spec.d_v);
}

/// Continuous relaxation of one group's value weights.
inline Matrix vo_relax_value(const VoProblem& p, Index group, const Matrix& w_v_hat,
                             const Matrix& w_o_hat, const RelaxOptions& opt,
                             GradientReport* report = nullptr) {
  if (opt.mode == RelaxOptions::Mode::design_matrix_oracle)
    return vo_relax_value_oracle(p, group, w_v_hat, w_o_hat);
  const SubmoduleSpec& spec = p.spec;
  auto with_slice = [&](const Matrix& u) {
    Matrix w = w_v_hat;
    w.middleCols(group * spec.d_v, spec.d_v) = u;
    return w;
  };
  FullGradFn grad = [&](const Matrix& u) {
    return vo_grad_value(p, with_slice(u), w_o_hat).middleCols(group * spec.d_v, spec.d_v).eval();
  };
  Matrix start = w_v_hat.middleCols(group * spec.d_v, spec.d_v);
  if (opt.grad.conjugate) return conjugate_gradient_quadratic(start, grad);
  BatchGradFn batch = [&](const Matrix& u, const std::vector<Index>& rows) {
    return vo_grad_value(p, with_slice(u), w_o_hat, &rows)
        .middleCols(group * spec.d_v, spec.d_v)
        .eval();
  };
  return adam_minimize(start, grad, opt.grad, report, p.x_hat.rows(), batch);
}

// ---------------------------------------------------------------------------
// Up-Down submodule: gated MLP with residual matching, gate frozen
// ---------------------------------------------------------------------------

struct UpDownProblem {
  SubmoduleSpec spec;
  Matrix x, x_hat;         // T x d_model
  Matrix phi, phi_hat;     // SiLU(X W_G), SiLU(X_hat W_G_hat); gate held fixed
  Matrix w_u, w_d;         // full-precision weights
  Matrix r, r_hat;
  Matrix y_mlp;            // F + R - R_hat
};

inline UpDownProblem make_updown_problem(const SubmoduleSpec& spec, const Matrix& x,
                                         const Matrix& x_hat, const Matrix& w_g,
                                         const Matrix& w_g_hat, const Matrix& w_u,
                                         const Matrix& w_d, const Matrix& r, const Matrix& r_hat) {
  UpDownProblem p;
  p.spec = spec;
  p.x = x;
  p.x_hat = x_hat;
  p.phi = silu(x * w_g);
  p.phi_hat = silu(x_hat * w_g_hat);
  p.w_u = w_u;
  p.w_d = w_d;
  p.r = r;
  p.r_hat = r_hat;
  Matrix f = p.phi.cwiseProduct(x * w_u) * w_d;
  p.y_mlp = f + r - r_hat;
  return p;
}

inline Matrix updown_zd_hat(const UpDownProblem& p, const Matrix& w_u_hat) {
  return p.phi_hat.cwiseProduct(p.x_hat * w_u_hat);
}

inline double updown_loss(const UpDownProblem& p, const Matrix& w_u_hat, const Matrix& w_d_hat) {
  return (updown_zd_hat(p, w_u_hat) * w_d_hat - p.y_mlp).squaredNorm();
}

inline Matrix updown_grad_up(const UpDownProblem& p, const Matrix& w_u_hat, const Matrix& w_d_hat,
                             const std::vector<Index>* token_rows = nullptr) {
  if (!token_rows) {
    Matrix d = 2.0 * (updown_zd_hat(p, w_u_hat) * w_d_hat - p.y_mlp);
    return p.x_hat.transpose() * p.phi_hat.cwiseProduct(d * w_d_hat.transpose());
  }
  const std::vector<Index>& rows = *token_rows;
  Matrix x_rows = detail::select_rows(p.x_hat, rows);
  Matrix phi_rows = detail::select_rows(p.phi_hat, rows);
  Matrix zd_rows = phi_rows.cwiseProduct(x_rows * w_u_hat);
  Matrix d_rows = 2.0 * (zd_rows * w_d_hat - detail::select_rows(p.y_mlp, rows));
  return x_rows.transpose() * phi_rows.cwiseProduct(d_rows * w_d_hat.transpose());
}

inline Matrix updown_grad_down(const UpDownProblem& p, const Matrix& w_u_hat,
                               const Matrix& w_d_hat,
                               const std::vector<Index>* token_rows = nullptr) {
  if (!token_rows) {
    Matrix zd = updown_zd_hat(p, w_u_hat);
    Matrix d = 2.0 * (zd * w_d_hat - p.y_mlp);
    return zd.transpose() * d;
  }
  const std::vector<Index>& rows = *token_rows;
  Matrix zd_rows =
      detail::select_rows(p.phi_hat, rows).cwiseProduct(detail::select_rows(p.x_hat, rows) * w_u_hat);
  Matrix d_rows = 2.0 * (zd_rows * w_d_hat - detail::select_rows(p.y_mlp, rows));
  return zd_rows.transpose() * d_rows;
}

/// Exact Down-step: least squares of (Phi_hat ⊙ X_hat W_U) W_D against Y_mlp.
inline Matrix updown_relax_down(const UpDownProblem& p, const Matrix& w_u_hat) {
  return lstsq(updown_zd_hat(p, w_u_hat), p.y_mlp);
}

inline Matrix updown_relax_up_oracle(const UpDownProblem& p, const Matrix& w_d_hat) {
  const SubmoduleSpec& spec = p.spec;
  const Index t = p.x_hat.rows();
  if (static_cast<double>(t) * spec.d_model * spec.d_model * spec.d_up >
      static_cast<double>(1 << 22))
    throw std::invalid_argument("updown_relax_up_oracle: instance too large for the design matrix");
  Matrix z = detail::kron(w_d_hat.transpose(), Matrix::Identity(t, t));
  Vector phi_diag = detail::as_vec(p.phi_hat);
  Matrix lift = detail::kron(Matrix::Identity(spec.d_up, spec.d_up), p.x_hat);
  Matrix design = z * phi_diag.asDiagonal() * lift;
  Vector w = pinv(design) * detail::as_vec(p.y_mlp);
  return detail::from_vec(w, spec.d_model, spec.d_up);
}

inline Matrix updown_relax_up(const UpDownProblem& p, const Matrix& w_u_hat,
                              const Matrix& w_d_hat, const RelaxOptions& opt,
                              GradientReport* report = nullptr) {
  if (opt.mode == RelaxOptions::Mode::design_matrix_oracle)
    return updown_relax_up_oracle(p, w_d_hat);
  FullGradFn grad = [&](const Matrix& u) { return updown_grad_up(p, u, w_d_hat); };
  if (opt.grad.conjugate) return conjugate_gradient_quadratic(w_u_hat, grad);
  BatchGradFn batch = [&](const Matrix& u, const std::vector<Index>& rows) {
    return updown_grad_up(p, u, w_d_hat, &rows);
  };
  return adam_minimize(w_u_hat, grad, opt.grad, report, p.x_hat.rows(), batch);
}

}  // namespace lpcd
