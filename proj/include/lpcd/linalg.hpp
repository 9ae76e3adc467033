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

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

namespace lpcd {

// Singular values below cutoff * sigma_max are treated as zero, so rank
// decisions are the same on every platform.
inline constexpr double kPinvCutoff = 1e-10;

/// Moore-Penrose pseudoinverse via SVD.
inline Matrix pinv(const Matrix& a, double cutoff = kPinvCutoff) {
  if (a.rows() == 0 || a.cols() == 0) return Matrix(a.cols(), a.rows());
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  double tol = cutoff * (sv.size() > 0 ? sv(0) : 0.0);
  Vector inv_sv = Vector::Zero(sv.size());
  for (Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) inv_sv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose();
}

/// Minimum-norm least-squares solution of A X = B.
inline Matrix lstsq(const Matrix& a, const Matrix& b) { return pinv(a) * b; }

inline Index svd_rank(const Matrix& a, double cutoff = kPinvCutoff) {
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& sv = svd.singularValues();
  double tol = cutoff * (sv.size() > 0 ? sv(0) : 0.0);
  Index r = 0;
  for (Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++r;
  return r;
}

/// Solves S X = B for symmetric positive definite S. Throws when S is not
/// numerically positive definite; callers surface that as a damping hint.
inline Matrix solve_spd(const Matrix& s, const Matrix& b, const char* what) {
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(std::string(what) +
                             ": matrix is singular or indefinite; use damping_fraction > 0");
  return llt.solve(b);
}

struct SymmetricRoots {
  Matrix sqrt;      // S^{1/2}
  Matrix inv_sqrt;  // S^{-1/2}
};

/// Symmetric square root and inverse square root via eigendecomposition.
/// Eigenvalues are floored at `eig_floor` before the root is taken.
inline SymmetricRoots sym_sqrt_pair(const Matrix& s, double eig_floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  if (es.info() != Eigen::Success) throw std::runtime_error("sym_sqrt_pair: eigendecomposition failed");
  Vector ev = es.eigenvalues();
  double min_ev = ev.minCoeff();
  if (min_ev <= 0.0 && eig_floor <= 0.0)
    throw std::runtime_error("sym_sqrt_pair: matrix not positive definite; use damping_fraction > 0");
  Vector root(ev.size()), inv_root(ev.size());
  for (Index i = 0; i < ev.size(); ++i) {
    double v = std::max(ev(i), eig_floor);
    root(i) = std::sqrt(v);
    inv_root(i) = 1.0 / root(i);
  }
  const Matrix& u = es.eigenvectors();
  return {u * root.asDiagonal() * u.transpose(), u * inv_root.asDiagonal() * u.transpose()};
}

}  // namespace lpcd
