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

#include <cstdint>
#include <vector>

namespace lpcd {

enum class Granularity { per_tensor, per_channel };
enum class QuantMode { symmetric, asymmetric };

struct QuantScheme {
  int bits = 4;
  Granularity granularity = Granularity::per_channel;
  QuantMode mode = QuantMode::asymmetric;

  int levels() const { return 1 << bits; }
};

/// Fitted dequantization parameters, one (scale, zero_point) pair per output
/// channel (column). Zero points are integral in asymmetric mode; symmetric
/// mode pins them to the grid midpoint (levels-1)/2, which is a half-integer,
/// so they are stored as doubles.
struct GridParams {
  QuantScheme scheme;
  Vector scales;
  Vector zero_points;
  std::vector<uint8_t> degenerate;  // per channel: constant input, scale forced to 1

  Index channels() const { return scales.size(); }
  bool any_degenerate() const {
    for (uint8_t d : degenerate)
      if (d) return true;
    return false;
  }
};

struct QuantizedMatrix {
  IntMatrix codes;
  Vector scales;
  Vector zero_points;
  int bits = 0;

  Index rows() const { return codes.rows(); }
  Index cols() const { return codes.cols(); }
};

namespace detail {

struct ChannelFit {
  double scale;
  double zero_point;
  bool degenerate;
};

inline ChannelFit fit_channel(double lo, double hi, const QuantScheme& scheme) {
  const int max_code = scheme.levels() - 1;
  if (scheme.mode == QuantMode::symmetric) {
    const double mid = 0.5 * max_code;
    double absmax = std::max(std::abs(lo), std::abs(hi));
    if (absmax == 0.0) return {1.0, mid, true};
    return {2.0 * absmax / max_code, mid, false};
  }
  if (hi == lo) {
    // Constant channel: scale 1, zero point placed so the constant lands on
    // (or as close as possible to) a valid code.
    double zp = std::clamp(std::round(-lo), 0.0, static_cast<double>(max_code));
    return {1.0, zp, true};
  }
  // Min-max extended to include zero, so the integral zero point stays inside
  // [0, max_code]. After the zero point rounds, the scale is re-derived from
  // the wider side, which keeps every input representable (for 1-bit grids a
  // zero-straddling channel necessarily clamps one extreme).
  double range_lo = std::min(lo, 0.0);
  double range_hi = std::max(hi, 0.0);
  double s0 = (range_hi - range_lo) / max_code;
  double zp = std::round(-range_lo / s0);
  if (range_lo < 0.0 && max_code >= 2) zp = std::max(zp, 1.0);
  if (range_hi > 0.0 && max_code >= 2) zp = std::min(zp, static_cast<double>(max_code - 1));
  zp = std::clamp(zp, 0.0, static_cast<double>(max_code));
  double scale = 0.0;
  if (zp > 0.0) scale = std::max(scale, -range_lo / zp);
  if (zp < max_code) scale = std::max(scale, range_hi / (max_code - zp));
  if (scale <= 0.0) scale = 1.0;
  return {scale, zp, false};
}

/// Nearest code for one value. Exact ties round half away from zero in value
/// space; a residual tie (grids symmetric about zero) takes the larger code.
inline int32_t nearest_code(double w, double scale, double zp, int levels) {
  const int32_t max_code = levels - 1;
  double t = w / scale + zp;
  double fl = std::floor(t);
  int32_t c_lo = static_cast<int32_t>(std::clamp(fl, 0.0, static_cast<double>(max_code)));
  int32_t c_hi = static_cast<int32_t>(std::clamp(fl + 1.0, 0.0, static_cast<double>(max_code)));
  double v_lo = scale * (c_lo - zp);
  double v_hi = scale * (c_hi - zp);
  double d_lo = std::abs(w - v_lo);
  double d_hi = std::abs(w - v_hi);
  if (d_lo < d_hi) return c_lo;
  if (d_hi < d_lo) return c_hi;
  if (std::abs(v_hi) != std::abs(v_lo)) return std::abs(v_hi) > std::abs(v_lo) ? c_hi : c_lo;
  return std::max(c_lo, c_hi);
}

}  // namespace detail

/// Min-max calibration of (scale, zero_point) per output channel of `w`
/// (per_tensor fits one pair from the whole matrix and replicates it).
inline GridParams fit_scheme(const Matrix& w, const QuantScheme& scheme) {
  require(w.rows() > 0 && w.cols() > 0, "fit_scheme: empty matrix");
  require(scheme.bits >= 1 && scheme.bits <= 24, "fit_scheme: bits out of range");
  GridParams p;
  p.scheme = scheme;
  p.scales.resize(w.cols());
  p.zero_points.resize(w.cols());
  p.degenerate.assign(static_cast<size_t>(w.cols()), 0);
  if (scheme.granularity == Granularity::per_tensor) {
    auto fit = detail::fit_channel(w.minCoeff(), w.maxCoeff(), scheme);
    p.scales.setConstant(fit.scale);
    p.zero_points.setConstant(fit.zero_point);
    if (fit.degenerate) p.degenerate.assign(static_cast<size_t>(w.cols()), 1);
    return p;
  }
  for (Index c = 0; c < w.cols(); ++c) {
    auto fit = detail::fit_channel(w.col(c).minCoeff(), w.col(c).maxCoeff(), scheme);
    p.scales(c) = fit.scale;
    p.zero_points(c) = fit.zero_point;
    p.degenerate[static_cast<size_t>(c)] = fit.degenerate ? 1 : 0;
  }
  return p;
}

/// Entrywise-nearest projection onto the grid (RTN).
inline QuantizedMatrix project_direct(const Matrix& w, const GridParams& p) {
  require(w.cols() == p.channels(), "project_direct: params/matrix shape mismatch");
  QuantizedMatrix q;
  q.bits = p.scheme.bits;
  q.scales = p.scales;
  q.zero_points = p.zero_points;
  q.codes.resize(w.rows(), w.cols());
  const int levels = p.scheme.levels();
  for (Index c = 0; c < w.cols(); ++c)
    for (Index r = 0; r < w.rows(); ++r)
      q.codes(r, c) = detail::nearest_code(w(r, c), p.scales(c), p.zero_points(c), levels);
  return q;
}

inline QuantizedMatrix project_direct(const Matrix& w, const QuantScheme& scheme) {
  return project_direct(w, fit_scheme(w, scheme));
}

inline Matrix dequantize(const QuantizedMatrix& q) {
  Matrix m(q.rows(), q.cols());
  for (Index c = 0; c < q.cols(); ++c)
    for (Index r = 0; r < q.rows(); ++r)
      m(r, c) = q.scales(c) * (q.codes(r, c) - q.zero_points(c));
  return m;
}

/// Grid of one channel, lowest code first. Test and oracle helper.
inline std::vector<double> channel_grid(const GridParams& p, Index channel) {
  std::vector<double> g(static_cast<size_t>(p.scheme.levels()));
  for (int code = 0; code < p.scheme.levels(); ++code)
    g[static_cast<size_t>(code)] = p.scales(channel) * (code - p.zero_points(channel));
  return g;
}

}  // namespace lpcd
