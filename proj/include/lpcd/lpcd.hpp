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

#include <cstdio>
#include <string>
#include <vector>

namespace lpcd {

enum class BlockKind { weight, activation, rotation, low_rank };
enum class RelaxSolver { closed_form, gradient };

struct BlockVar;
using BlockList = std::vector<BlockVar>;

/// How one block is relaxed with the other blocks held fixed. `closed_form`
/// is optional; blocks without one fall back to the gradient path, which
/// needs `loss`/`grad` in the relaxed variable. `batch_grad` enables
/// token-row minibatching and may be left empty.
struct RelaxBinding {
  std::function<Matrix(const BlockList&)> closed_form;
  std::function<double(const Matrix&, const BlockList&)> loss;
  std::function<Matrix(const Matrix&, const BlockList&)> grad;
  std::function<Matrix(const Matrix&, const BlockList&, const std::vector<Index>&)> batch_grad;
  Index batch_rows = 0;
  // Gradient-mode start point. Empty: warm-start from the current feasible
  // value. A fixed start (the full-precision weights, say) makes repeated
  // sweeps re-derive the candidate instead of drifting off the previous
  // projection.
  Matrix grad_start;
};

/// One coordinate block: its kind, current feasible value, relaxation
/// binding, and the projector that restores feasibility for its kind.
struct BlockVar {
  int id = 0;
  BlockKind kind = BlockKind::weight;
  std::string label;
  Matrix value;
  RelaxBinding relax;
  std::function<Matrix(const Matrix& candidate, const BlockList&)> project;
};

struct SweepConfig {
  int sweeps = 1;
  std::vector<int> order;  // permutation of block ids; empty = registration order
  RelaxSolver solver = RelaxSolver::gradient;
  GradientOptions grad;
};

struct SweepRecord {
  int sweep = 0;
  int block_id = 0;
  double loss = 0.0;
};

struct RelaxInfo {
  int sweep = 0;
  int block_id = 0;
  bool used_closed_form = false;
  bool converged = true;
  double initial_grad_norm = 0.0;
  double final_grad_norm = 0.0;
};

struct SweepResult {
  std::vector<SweepRecord> objective_log;  // global loss after every projection
  std::vector<RelaxInfo> relax_log;        // one entry per relaxation step
  bool all_converged() const {
    for (const auto& r : relax_log)
      if (!r.converged) return false;
    return true;
  }
};

/// Continuous candidate for one block, other blocks fixed at their current
/// values. Closed-form relaxers are used when the config asks for them and
/// the block provides one; otherwise the gradient path runs, warm-started
/// from the current feasible value. Non-convergence is reported, never
/// silently dropped.
inline Matrix relax_block(const BlockVar& block, const BlockList& blocks, const SweepConfig& config,
                          RelaxInfo* info = nullptr) {
  RelaxInfo ri;
  ri.block_id = block.id;
  if (config.solver == RelaxSolver::closed_form && block.relax.closed_form) {
    ri.used_closed_form = true;
    if (info) *info = ri;
    return block.relax.closed_form(blocks);
  }
  require(static_cast<bool>(block.relax.grad), "relax_block: block has no gradient binding");
  FullGradFn full = [&](const Matrix& u) { return block.relax.grad(u, blocks); };
  BatchGradFn batched;
  if (block.relax.batch_grad)
    batched = [&](const Matrix& u, const std::vector<Index>& rows) {
      return block.relax.batch_grad(u, blocks, rows);
    };
  GradientReport rep;
  const Matrix& start = block.relax.grad_start.size() > 0 ? block.relax.grad_start : block.value;
  Matrix out = adam_minimize(start, full, config.grad, &rep, block.relax.batch_rows, batched);
  ri.converged = rep.converged;
  ri.initial_grad_norm = rep.initial_grad_norm;
  ri.final_grad_norm = rep.final_grad_norm;
  if (info) *info = ri;
  return out;
}

/// Projects a candidate through the block's projector and returns the
/// feasible value. Kept as a named step so sweeps read as relax-then-project.
inline Matrix project_block(const BlockVar& block, const Matrix& candidate,
                            const BlockList& blocks) {
  require(candidate.rows() == block.value.rows() && candidate.cols() == block.value.cols(),
          "project_block: candidate shape mismatch");
  require(static_cast<bool>(block.project), "project_block: block has no projector");
  return block.project(candidate, blocks);
}

/// Cyclic sweeps over the registered blocks. Block r sees blocks s < r at
/// their current-sweep values and blocks s > r at the previous sweep's
/// values, matching in-place sequential updates. The objective is logged
/// after every projection.
inline SweepResult run_sweeps(BlockList& blocks,
                              const std::function<double(const BlockList&)>& objective,
                              const SweepConfig& config) {
  require(config.sweeps >= 1, "run_sweeps: sweeps must be >= 1");
  std::vector<int> order = config.order;
  if (order.empty())
    for (const auto& b : blocks) order.push_back(b.id);
  require(order.size() == blocks.size(), "run_sweeps: order must cover every block");

  auto find = [&](int id) -> BlockVar& {
    for (auto& b : blocks)
      if (b.id == id) return b;
    throw std::invalid_argument("run_sweeps: order names an unregistered block id");
  };

  SweepResult result;
  for (int t = 0; t < config.sweeps; ++t) {
    for (int id : order) {
      BlockVar& block = find(id);
      RelaxInfo info;
      Matrix candidate = relax_block(block, blocks, config, &info);
      info.sweep = t;
      block.value = project_block(block, candidate, blocks);
      result.relax_log.push_back(info);
      result.objective_log.push_back({t, id, objective(blocks)});
    }
  }
  return result;
}

/// objective_log rows as CSV text, one "(sweep, block_id, loss)" row each.
inline std::string objective_log_csv(const std::vector<SweepRecord>& log) {
  std::string out = "sweep,block_id,loss\n";
  char buf[96];
  for (const auto& rec : log) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", rec.sweep, rec.block_id, rec.loss);
    out += buf;
  }
  return out;
}

}  // namespace lpcd
