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

#include "lpcd/lpcd.hpp"
#include "lpcd/targets.hpp"
#include "lpcd/toy_model.hpp"

#include <chrono>
#include <string>

namespace lpcd {

enum class BaseQuantizer { rtn, gptq };
enum class TargetMethod { none, qep, loaq, lpcd };

struct OptimizerConfig {
  double lr = 1e-5;
  int epochs = 40;
  int batch = 8;
  double tol = 1e-4;
};

struct PipelineConfig {
  int bits = 4;
  BaseQuantizer base = BaseQuantizer::gptq;
  TargetMethod target = TargetMethod::lpcd;
  double alpha = 1.0;
  double beta = 0.5;
  int sweeps = 3;  // LPCD sweeps after the init pass; 0 = init only
  double damping_fraction = 0.01;
  OptimizerConfig optimizer;
  RelaxSolver relax_solver = RelaxSolver::gradient;  // gradient = trust-region-like small steps
  uint64_t seed = 0;
  Index calib_tokens = 256;
  Index eval_tokens = 256;
  MaskOrientation mask_orientation = MaskOrientation::causal_lower;
  int skip_last = 0;            // leave the last K blocks unquantized
  int sweep_groups = 7;         // ablation mask: bit0 QK, bit1 VO, bit2 Up-Down
  bool normalized_loaq = false; // frozen per-token norm scaling in residual targets
  bool no_quant = false;        // testing hook: projections pass through unchanged
};

inline std::string method_label(BaseQuantizer base, TargetMethod target) {
  std::string b = base == BaseQuantizer::rtn ? "rtn" : "gptq";
  switch (target) {
    case TargetMethod::none: return b + "+none";
    case TargetMethod::qep: return b + "+qep";
    case TargetMethod::loaq: return b + "+loaq";
    case TargetMethod::lpcd: return b + "+lpcd";
  }
  return b;
}

/// Parses "gptq+lpcd" style method labels. A bare base name means no error
/// compensation; a bare target name defaults the base to gptq.
inline std::pair<BaseQuantizer, TargetMethod> parse_method(const std::string& label) {
  BaseQuantizer base = BaseQuantizer::gptq;
  TargetMethod target = TargetMethod::none;
  bool saw_base = false, saw_target = false;
  size_t start = 0;
  while (start <= label.size()) {
    size_t plus = label.find('+', start);
    std::string tok = label.substr(start, plus == std::string::npos ? plus : plus - start);
    if (tok == "rtn") { base = BaseQuantizer::rtn; saw_base = true; }
    else if (tok == "gptq") { base = BaseQuantizer::gptq; saw_base = true; }
    else if (tok == "none") { target = TargetMethod::none; saw_target = true; }
    else if (tok == "qep") { target = TargetMethod::qep; saw_target = true; }
    else if (tok == "loaq") { target = TargetMethod::loaq; saw_target = true; }
    else if (tok == "lpcd") { target = TargetMethod::lpcd; saw_target = true; }
    else throw std::invalid_argument("unknown method token: " + tok);
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  if (!saw_base && !saw_target) throw std::invalid_argument("empty method label");
  return {base, target};
}

struct RunReport {
  std::string method;
  int bits = 0;
  uint64_t seed = 0;
  // Per-block output MSE on the calibration batch (identical across methods
  // for a given seed; the quantity the corrected targets optimize).
  std::vector<double> block_mse;
  // Same measurement on a disjoint evaluation batch; diverging values expose
  // overfitting to the calibration set.
  std::vector<double> eval_block_mse;
  std::vector<SweepRecord> sweep_trace;    // LPCD objective log, global block ids
  std::vector<std::string> block_labels;   // global block id -> label
  int non_converged_relax_steps = 0;
  double wall_clock_ms = 0.0;
};

struct QuantizedModel {
  std::vector<BlockWeights> blocks;
};

namespace detail {

struct LayerStreams {
  const Matrix& x;      // full-precision layer input
  const Matrix& x_hat;  // quantized-path layer input
};

/// Projects a target through the configured base quantizer onto a grid
/// fitted on the target itself.
inline Matrix project_base(const Matrix& target, const Matrix& x_hat_input,
                           const PipelineConfig& cfg, const GridParams& params) {
  if (cfg.no_quant) return target;
  if (cfg.base == BaseQuantizer::rtn) return dequantize(project_direct(target, params));
  Hessian h = build_hessian(x_hat_input, cfg.damping_fraction);
  return dequantize(project_activation_aware(target, h, params));
}

/// In-sweep weight projection. The relax-project sweeps use the direct
/// projector on the block's fixed grid: candidates move by fractions of a
/// grid step from the current feasible value, so only boundary-crossing
/// entries change codes and the projection cannot undo the relaxation gain.
inline Matrix project_sweep(const Matrix& candidate, const PipelineConfig& cfg,
                            const GridParams& params) {
  if (cfg.no_quant) return candidate;
  return dequantize(project_direct(candidate, params));
}

/// Target + projection of one interior layer (no residual term).
inline Matrix quant_interior(const Matrix& w, const LayerStreams& s, const PipelineConfig& cfg,
                             GridParams* params_out = nullptr) {
  Matrix target = w;
  if (cfg.target != TargetMethod::none) {
    PropagationState state = make_state(s.x, s.x_hat, cfg.damping_fraction);
    target = qep_target(w, state, cfg.alpha);
  }
  QuantScheme scheme;
  scheme.bits = cfg.bits;
  GridParams params = fit_scheme(target, scheme);
  if (params_out) *params_out = params;
  return project_base(target, s.x_hat, cfg, params);
}

/// Target + projection of a residual-facing layer (the submodule output goes
/// through a residual add that the corrected target matches).
inline Matrix quant_residual(const Matrix& w, const LayerStreams& s, const Matrix& r,
                             const Matrix& r_hat, const PipelineConfig& cfg,
                             GridParams* params_out = nullptr) {
  Matrix target = w;
  if (cfg.target == TargetMethod::qep) {
    PropagationState state = make_state(s.x, s.x_hat, cfg.damping_fraction);
    target = qep_target(w, state, cfg.alpha);
  } else if (cfg.target == TargetMethod::loaq || cfg.target == TargetMethod::lpcd) {
    PropagationState state = make_state(s.x, s.x_hat, r, r_hat, cfg.damping_fraction);
    if (cfg.normalized_loaq) {
      Vector scales = rms_scales(r + s.x * w);
      target = loaq_normalized_target(w, state, scales, cfg.alpha, cfg.beta);
    } else {
      target = loaq_target(w, state, cfg.alpha, cfg.beta);
    }
  }
  QuantScheme scheme;
  scheme.bits = cfg.bits;
  GridParams params = fit_scheme(target, scheme);
  if (params_out) *params_out = params;
  return project_base(target, s.x_hat, cfg, params);
}

}  // namespace detail

/// MSE of block outputs (post-residual) between the full-precision and the
/// quantized model on a shared batch.
inline std::vector<double> evaluate_block_mse(const ToyModel& model, const QuantizedModel& qm,
                                              const Matrix& tokens,
                                              MaskOrientation mask_orientation) {
  SubmoduleSpec spec = model.submodule_spec(mask_orientation);
  std::vector<Matrix> full_outs = model_forward(model.blocks, tokens, spec);
  std::vector<Matrix> hat_outs = model_forward(qm.blocks, tokens, spec);
  require(full_outs.size() == hat_outs.size(), "evaluate_block_mse: block count mismatch");
  std::vector<double> mse;
  for (size_t i = 0; i < full_outs.size(); ++i)
    mse.push_back((full_outs[i] - hat_outs[i]).squaredNorm() /
                  static_cast<double>(full_outs[i].size()));
  return mse;
}

/// Quantizes the model block by block in forward order, propagating the
/// quantized-path activations into every downstream target and Hessian.
/// In lpcd mode each submodule group (QK, VO, Up-Down) is initialized with
/// the loaq pass and then refined by `sweeps` relax-project sweeps.
inline std::pair<QuantizedModel, RunReport> quantize_pipeline(const ToyModel& model,
                                                              const PipelineConfig& cfg) {
  auto t_start = std::chrono::steady_clock::now();
  require(cfg.bits >= 1 && cfg.bits <= 24, "quantize_pipeline: bits out of range");
  require(cfg.sweeps >= 0, "quantize_pipeline: sweeps must be >= 0");
  require(cfg.skip_last >= 0, "quantize_pipeline: skip_last must be >= 0");

  const SubmoduleSpec spec = model.submodule_spec(cfg.mask_orientation);
  const Matrix tokens = gen_tokens(cfg.seed * 0x10001ULL + 0xCA11B, cfg.calib_tokens, spec.d_model);
  const Matrix mask = causal_mask(tokens.rows(), spec.mask_orientation);
  const bool run_lpcd = cfg.target == TargetMethod::lpcd && cfg.sweeps > 0 && !cfg.no_quant;

  GradientOptions gopt;
  gopt.lr = cfg.optimizer.lr;
  gopt.epochs = cfg.optimizer.epochs;
  gopt.batch = cfg.optimizer.batch;
  gopt.tol = cfg.optimizer.tol;
  gopt.seed = cfg.seed;

  SweepConfig sweep_cfg;
  sweep_cfg.sweeps = std::max(cfg.sweeps, 1);
  sweep_cfg.solver = cfg.relax_solver;
  sweep_cfg.grad = gopt;

  QuantizedModel qm;
  RunReport report;
  report.method = method_label(cfg.base, cfg.target);
  report.bits = cfg.bits;
  report.seed = cfg.seed;

  QuantScheme scheme;
  scheme.bits = cfg.bits;

  Matrix resid = tokens;
  Matrix resid_hat = tokens;
  int next_block_id = 0;

  for (Index b = 0; b < static_cast<Index>(model.blocks.size()); ++b) {
    const BlockWeights& w = model.blocks[static_cast<size_t>(b)];
    const bool skip = b >= static_cast<Index>(model.blocks.size()) - cfg.skip_last;
    BlockWeights qw = w;  // norm weights stay full precision

    if (skip) {
      BlockTrace tf = block_forward(w, resid, spec, mask);
      BlockTrace th = block_forward(w, resid_hat, spec, mask);
      resid = tf.resid_out;
      resid_hat = th.resid_out;
      qm.blocks.push_back(std::move(qw));
      next_block_id += 6;
      for (const char* n : {"w_q", "w_k", "w_v", "w_o", "w_u", "w_d"})
        report.block_labels.push_back("block" + std::to_string(b) + "." + n + " (skipped)");
      continue;
    }

    // ---- attention: interior Q/K/V ----
    Matrix xa = rmsnorm(resid, w.attn_norm);
    Matrix xha = rmsnorm(resid_hat, w.attn_norm);
    detail::LayerStreams attn_in{xa, xha};
    GridParams pq, pk, pv;
    qw.w_q = detail::quant_interior(w.w_q, attn_in, cfg, &pq);
    qw.w_k = detail::quant_interior(w.w_k, attn_in, cfg, &pk);
    qw.w_v = detail::quant_interior(w.w_v, attn_in, cfg, &pv);

    const int id_q = next_block_id++, id_k = next_block_id++, id_v = next_block_id++;
    const int id_o = next_block_id++, id_u = next_block_id++, id_d = next_block_id++;
    for (const char* n : {"w_q", "w_k", "w_v", "w_o", "w_u", "w_d"})
      report.block_labels.push_back("block" + std::to_string(b) + "." + n);

    if (run_lpcd && (cfg.sweep_groups & 1)) {
      QkProblem qkp = make_qk_problem(spec, mask, xa, xha, w.w_q, w.w_k);
      BlockList blocks(2);
      blocks[0].id = id_q;
      blocks[0].kind = BlockKind::weight;
      blocks[0].label = "w_q";
      blocks[0].value = qw.w_q;
      blocks[0].relax.loss = [&](const Matrix& u, const BlockList& bl) {
        return qk_loss(qkp, u, bl[1].value);
      };
      blocks[0].relax.grad = [&](const Matrix& u, const BlockList& bl) {
        return qk_grad(qkp, QkSide::query, u, bl[1].value);
      };
      blocks[0].relax.batch_grad = [&](const Matrix& u, const BlockList& bl,
                                       const std::vector<Index>& rows) {
        return qk_grad(qkp, QkSide::query, u, bl[1].value, &rows);
      };
      blocks[0].relax.batch_rows = xha.rows();
      blocks[0].relax.grad_start = w.w_q;
      blocks[0].project = [&, pq](const Matrix& cand, const BlockList&) {
        return detail::project_sweep(cand, cfg, pq);
      };
      blocks[1].id = id_k;
      blocks[1].kind = BlockKind::weight;
      blocks[1].label = "w_k";
      blocks[1].value = qw.w_k;
      blocks[1].relax.loss = [&](const Matrix& u, const BlockList& bl) {
        return qk_loss(qkp, bl[0].value, u);
      };
      blocks[1].relax.grad = [&](const Matrix& u, const BlockList& bl) {
        return qk_grad(qkp, QkSide::key, bl[0].value, u);
      };
      blocks[1].relax.batch_grad = [&](const Matrix& u, const BlockList& bl,
                                       const std::vector<Index>& rows) {
        return qk_grad(qkp, QkSide::key, bl[0].value, u, &rows);
      };
      blocks[1].relax.batch_rows = xha.rows();
      blocks[1].relax.grad_start = w.w_k;
      blocks[1].project = [&, pk](const Matrix& cand, const BlockList&) {
        return detail::project_sweep(cand, cfg, pk);
      };
      auto objective = [&](const BlockList& bl) { return qk_loss(qkp, bl[0].value, bl[1].value); };
      SweepResult res = run_sweeps(blocks, objective, sweep_cfg);
      for (const auto& rec : res.objective_log) report.sweep_trace.push_back(rec);
      for (const auto& ri : res.relax_log)
        if (!ri.converged) ++report.non_converged_relax_steps;
      qw.w_q = blocks[0].value;
      qw.w_k = blocks[1].value;
    }

    // ---- attention: residual-facing O, with VO sweeps ----
    AttentionPath att_full = attention_forward(xa, w.w_q, w.w_k, w.w_v, w.w_o, spec, mask);
    std::vector<Matrix> weights_hat = attention_weights(xha, qw.w_q, qw.w_k, spec, mask);
    Matrix concat_full = att_full.concat;
    Matrix concat_hat = vo_concat(spec, weights_hat, xha, qw.w_v);
    detail::LayerStreams o_in{concat_full, concat_hat};
    GridParams po;
    qw.w_o = detail::quant_residual(w.w_o, o_in, resid, resid_hat, cfg, &po);

    if (run_lpcd && (cfg.sweep_groups & 2)) {
      VoProblem vop = make_vo_problem(spec, att_full.weights, weights_hat, xa, xha, resid,
                                      resid_hat, w.w_v, w.w_o);
      BlockList blocks(2);
      blocks[0].id = id_v;
      blocks[0].kind = BlockKind::weight;
      blocks[0].label = "w_v";
      blocks[0].value = qw.w_v;
      blocks[0].relax.loss = [&](const Matrix& u, const BlockList& bl) {
        return vo_loss(vop, u, bl[1].value);
      };
      blocks[0].relax.grad = [&](const Matrix& u, const BlockList& bl) {
        return vo_grad_value(vop, u, bl[1].value);
      };
      blocks[0].relax.batch_grad = [&](const Matrix& u, const BlockList& bl,
                                       const std::vector<Index>& rows) {
        return vo_grad_value(vop, u, bl[1].value, &rows);
      };
      blocks[0].relax.batch_rows = xha.rows();
      blocks[0].relax.grad_start = w.w_v;
      blocks[0].project = [&, pv](const Matrix& cand, const BlockList&) {
        return detail::project_sweep(cand, cfg, pv);
      };
      blocks[1].id = id_o;
      blocks[1].kind = BlockKind::weight;
      blocks[1].label = "w_o";
      blocks[1].value = qw.w_o;
      blocks[1].relax.closed_form = [&](const BlockList& bl) {
        return vo_relax_output(vop, bl[0].value);
      };
      blocks[1].relax.loss = [&](const Matrix& u, const BlockList& bl) {
        return vo_loss(vop, bl[0].value, u);
      };
      blocks[1].relax.grad = [&](const Matrix& u, const BlockList& bl) {
        return vo_grad_output(vop, bl[0].value, u);
      };
      blocks[1].relax.batch_rows = xha.rows();
      blocks[1].relax.grad_start = w.w_o;
      blocks[1].project = [&, po](const Matrix& cand, const BlockList&) {
        return detail::project_sweep(cand, cfg, po);
      };
      auto objective = [&](const BlockList& bl) { return vo_loss(vop, bl[0].value, bl[1].value); };
      SweepResult res = run_sweeps(blocks, objective, sweep_cfg);
      for (const auto& rec : res.objective_log) report.sweep_trace.push_back(rec);
      for (const auto& ri : res.relax_log)
        if (!ri.converged) ++report.non_converged_relax_steps;
      qw.w_v = blocks[0].value;
      qw.w_o = blocks[1].value;
      concat_hat = vo_concat(spec, weights_hat, xha, qw.w_v);
    }

    resid = resid + att_full.out;
    resid_hat = resid_hat + concat_hat * qw.w_o;

    // ---- MLP: interior gate/up, residual-facing down, Up-Down sweeps ----
    Matrix xm = rmsnorm(resid, w.mlp_norm);
    Matrix xhm = rmsnorm(resid_hat, w.mlp_norm);
    detail::LayerStreams mlp_in{xm, xhm};
    GridParams pg, pu, pd;
    qw.w_g = detail::quant_interior(w.w_g, mlp_in, cfg, &pg);  // frozen from here on
    qw.w_u = detail::quant_interior(w.w_u, mlp_in, cfg, &pu);

    Matrix zd_full = silu(xm * w.w_g).cwiseProduct(xm * w.w_u);
    Matrix phi_hat = silu(xhm * qw.w_g);
    Matrix zd_hat = phi_hat.cwiseProduct(xhm * qw.w_u);
    detail::LayerStreams d_in{zd_full, zd_hat};
    qw.w_d = detail::quant_residual(w.w_d, d_in, resid, resid_hat, cfg, &pd);

    if (run_lpcd && (cfg.sweep_groups & 4)) {
      UpDownProblem udp =
          make_updown_problem(spec, xm, xhm, w.w_g, qw.w_g, w.w_u, w.w_d, resid, resid_hat);
      BlockList blocks(2);
      blocks[0].id = id_u;
      blocks[0].kind = BlockKind::weight;
      blocks[0].label = "w_u";
      blocks[0].value = qw.w_u;
      blocks[0].relax.loss = [&](const Matrix& u, const BlockList& bl) {
        return updown_loss(udp, u, bl[1].value);
      };
      blocks[0].relax.grad = [&](const Matrix& u, const BlockList& bl) {
        return updown_grad_up(udp, u, bl[1].value);
      };
      blocks[0].relax.batch_grad = [&](const Matrix& u, const BlockList& bl,
                                       const std::vector<Index>& rows) {
        return updown_grad_up(udp, u, bl[1].value, &rows);
      };
      blocks[0].relax.batch_rows = xhm.rows();
      blocks[0].relax.grad_start = w.w_u;
      blocks[0].project = [&, pu](const Matrix& cand, const BlockList&) {
        return detail::project_sweep(cand, cfg, pu);
      };
      blocks[1].id = id_d;
      blocks[1].kind = BlockKind::weight;
      blocks[1].label = "w_d";
      blocks[1].value = qw.w_d;
      blocks[1].relax.closed_form = [&](const BlockList& bl) {
        return updown_relax_down(udp, bl[0].value);
      };
      blocks[1].relax.loss = [&](const Matrix& u, const BlockList& bl) {
        return updown_loss(udp, bl[0].value, u);
      };
      blocks[1].relax.grad = [&](const Matrix& u, const BlockList& bl) {
        return updown_grad_down(udp, bl[0].value, u);
      };
      blocks[1].relax.batch_rows = xhm.rows();
      blocks[1].relax.grad_start = w.w_d;
      blocks[1].project = [&, pd](const Matrix& cand, const BlockList&) {
        return detail::project_sweep(cand, cfg, pd);
      };
      auto objective = [&](const BlockList& bl) {
        return updown_loss(udp, bl[0].value, bl[1].value);
      };
      SweepResult res = run_sweeps(blocks, objective, sweep_cfg);
      for (const auto& rec : res.objective_log) report.sweep_trace.push_back(rec);
      for (const auto& ri : res.relax_log)
        if (!ri.converged) ++report.non_converged_relax_steps;
      qw.w_u = blocks[0].value;
      qw.w_d = blocks[1].value;
      zd_hat = phi_hat.cwiseProduct(xhm * qw.w_u);
    }

    resid = resid + zd_full * w.w_d;
    resid_hat = resid_hat + zd_hat * qw.w_d;
    qm.blocks.push_back(std::move(qw));
  }

  // Output MSE per block: on the calibration batch (the optimized quantity)
  // and on a disjoint evaluation batch (the overfitting check).
  const Matrix eval_tokens =
      gen_tokens(cfg.seed * 0x10001ULL + 0xE7A1, cfg.eval_tokens, spec.d_model);
  report.block_mse = evaluate_block_mse(model, qm, tokens, cfg.mask_orientation);
  report.eval_block_mse = evaluate_block_mse(model, qm, eval_tokens, cfg.mask_orientation);

  report.wall_clock_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - t_start)
                             .count();
  return {std::move(qm), std::move(report)};
}

}  // namespace lpcd
