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

#include "lpcd/submodules.hpp"

#include <vector>

namespace lpcd {

struct ToyDims {
  Index d_model = 16;
  Index heads = 4;
  Index group_size = 2;
  Index d_k = 4;
  Index d_v = 4;
  Index d_up = 32;
  Index blocks = 4;

  SubmoduleSpec submodule_spec(double rope_base, MaskOrientation mask) const {
    SubmoduleSpec s;
    s.d_model = d_model;
    s.heads = heads;
    s.group_size = group_size;
    s.d_k = d_k;
    s.d_v = d_v;
    s.d_up = d_up;
    s.rope_base = rope_base;
    s.mask_orientation = mask;
    return s;
  }
};

struct BlockWeights {
  Matrix w_q;  // d_model x (heads * d_k)
  Matrix w_k;  // d_model x (kv_groups * d_k)
  Matrix w_v;  // d_model x (kv_groups * d_v)
  Matrix w_o;  // (heads * d_v) x d_model
  Matrix w_g;  // d_model x d_up
  Matrix w_u;  // d_model x d_up
  Matrix w_d;  // d_up x d_model
  Vector attn_norm;  // d_model
  Vector mlp_norm;   // d_model
};

/// Stand-in model: pre-norm residual blocks (norm -> attention -> add;
/// norm -> gated MLP -> add). Fully determined by (seed, dims, init_scale).
struct ToyModel {
  ToyDims dims;
  uint64_t seed = 0;
  double init_scale = 1.0;
  double rope_base = 10000.0;
  std::vector<BlockWeights> blocks;

  SubmoduleSpec submodule_spec(MaskOrientation mask = MaskOrientation::causal_lower) const {
    return dims.submodule_spec(rope_base, mask);
  }
};

namespace detail {
// Gaussian fan-in init rounded through float32 so tensor archives round-trip
// bit exactly.
inline Matrix init_weight(Rng& rng, Index rows, Index cols, double scale) {
  Matrix m(rows, cols);
  double s = scale / std::sqrt(static_cast<double>(rows));
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      m(i, j) = static_cast<double>(static_cast<float>(s * rng.next_normal_f32()));
  return m;
}

inline Vector init_norm_weight(Rng& rng, Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i)
    v(i) = static_cast<double>(static_cast<float>(1.0 + 0.05 * rng.next_normal_f32()));
  return v;
}
}  // namespace detail

inline ToyModel gen_toy_model(uint64_t seed, const ToyDims& dims, double init_scale = 1.0) {
  SubmoduleSpec check = dims.submodule_spec(10000.0, MaskOrientation::causal_lower);
  check.validate();
  require(dims.blocks >= 1, "gen_toy_model: need at least one block");

  ToyModel model;
  model.dims = dims;
  model.seed = seed;
  model.init_scale = init_scale;
  Rng rng(seed);
  const Index groups = dims.heads / dims.group_size;
  for (Index b = 0; b < dims.blocks; ++b) {
    BlockWeights w;
    w.w_q = detail::init_weight(rng, dims.d_model, dims.heads * dims.d_k, init_scale);
    w.w_k = detail::init_weight(rng, dims.d_model, groups * dims.d_k, init_scale);
    w.w_v = detail::init_weight(rng, dims.d_model, groups * dims.d_v, init_scale);
    w.w_o = detail::init_weight(rng, dims.heads * dims.d_v, dims.d_model, init_scale);
    w.w_g = detail::init_weight(rng, dims.d_model, dims.d_up, init_scale);
    w.w_u = detail::init_weight(rng, dims.d_model, dims.d_up, init_scale);
    w.w_d = detail::init_weight(rng, dims.d_up, dims.d_model, init_scale);
    w.attn_norm = detail::init_norm_weight(rng, dims.d_model);
    w.mlp_norm = detail::init_norm_weight(rng, dims.d_model);
    model.blocks.push_back(std::move(w));
  }
  return model;
}

/// Seeded standard-normal token activations (stand-in for embeddings).
inline Matrix gen_tokens(uint64_t seed, Index tokens, Index d_model) {
  Rng rng(seed);
  return random_matrix(rng, tokens, d_model);
}

/// Intermediate activations of one block evaluation.
struct BlockTrace {
  Matrix attn_in;       // rmsnorm output feeding Q/K/V
  AttentionPath attn;
  Matrix resid_mid;     // residual stream after the attention add
  Matrix mlp_in;        // rmsnorm output feeding the MLP
  Matrix zd;            // SiLU(gate) ⊙ up, the down projection's input
  Matrix mlp_out;
  Matrix resid_out;     // block output (post-residual, pre-next-norm)
};

inline BlockTrace block_forward(const BlockWeights& w, const Matrix& resid_in,
                                const SubmoduleSpec& spec, const Matrix& mask) {
  BlockTrace t;
  t.attn_in = rmsnorm(resid_in, w.attn_norm);
  t.attn = attention_forward(t.attn_in, w.w_q, w.w_k, w.w_v, w.w_o, spec, mask);
  t.resid_mid = resid_in + t.attn.out;
  t.mlp_in = rmsnorm(t.resid_mid, w.mlp_norm);
  t.zd = silu(t.mlp_in * w.w_g).cwiseProduct(t.mlp_in * w.w_u);
  t.mlp_out = t.zd * w.w_d;
  t.resid_out = t.resid_mid + t.mlp_out;
  return t;
}

/// Block outputs (post-residual) for every block of the model.
inline std::vector<Matrix> model_forward(const std::vector<BlockWeights>& blocks,
                                         const Matrix& tokens, const SubmoduleSpec& spec) {
  Matrix mask = causal_mask(tokens.rows(), spec.mask_orientation);
  std::vector<Matrix> outs;
  Matrix resid = tokens;
  for (const auto& w : blocks) {
    BlockTrace t = block_forward(w, resid, spec, mask);
    resid = t.resid_out;
    outs.push_back(resid);
  }
  return outs;
}

}  // namespace lpcd
