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

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "lpcd/archive.hpp"
#include "lpcd/pipeline.hpp"

using json = nlohmann::json;
using namespace lpcd;

namespace {

// exit codes: 0 ok, 1 internal, 2 usage/config, 3 invalid dims or values,
// 4 archive i/o
constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInvalid = 3;
constexpr int kExitArchive = 4;

int fail(int code, const std::string& kind, const std::string& message) {
  json err = {{"error", {{"code", code}, {"kind", kind}, {"message", message}}}};
  std::cerr << err.dump() << "\n";
  return code;
}

struct CliSettings {
  ToyDims dims;
  std::string method = "gptq+lpcd";
  int bits = 4;
  double alpha = 1.0;
  double beta = 0.5;
  int sweeps = 3;
  double damping_fraction = 0.01;
  double lr = 1e-5;
  int epochs = 40;
  int batch = 8;
  uint64_t seed = 0;
  long calib_tokens = 256;
  long eval_tokens = 256;
  std::string mask_orientation = "causal_lower";
  std::string relax_solver = "gradient";
  int skip_last = 0;
  double init_scale = 1.0;

  PipelineConfig pipeline() const {
    PipelineConfig cfg;
    auto [base, target] = parse_method(method);
    cfg.base = base;
    cfg.target = target;
    cfg.bits = bits;
    cfg.alpha = alpha;
    cfg.beta = beta;
    cfg.sweeps = sweeps;
    cfg.damping_fraction = damping_fraction;
    cfg.optimizer.lr = lr;
    cfg.optimizer.epochs = epochs;
    cfg.optimizer.batch = batch;
    cfg.seed = seed;
    cfg.calib_tokens = calib_tokens;
    cfg.eval_tokens = eval_tokens;
    cfg.skip_last = skip_last;
    if (relax_solver == "gradient")
      cfg.relax_solver = RelaxSolver::gradient;
    else if (relax_solver == "closed_form")
      cfg.relax_solver = RelaxSolver::closed_form;
    else
      throw std::invalid_argument("relax_solver must be gradient or closed_form");
    if (mask_orientation == "causal_lower")
      cfg.mask_orientation = MaskOrientation::causal_lower;
    else if (mask_orientation == "causal_upper")
      cfg.mask_orientation = MaskOrientation::causal_upper;
    else
      throw std::invalid_argument("mask_orientation must be causal_lower or causal_upper");
    return cfg;
  }

  json echo() const {
    return json{{"dims",
                 {{"d_model", dims.d_model},
                  {"heads", dims.heads},
                  {"group_size", dims.group_size},
                  {"d_k", dims.d_k},
                  {"d_v", dims.d_v},
                  {"d_up", dims.d_up},
                  {"blocks", dims.blocks}}},
                {"method", method},
                {"bits", bits},
                {"alpha", alpha},
                {"beta", beta},
                {"sweeps", sweeps},
                {"damping_fraction", damping_fraction},
                {"optimizer", {{"lr", lr}, {"epochs", epochs}, {"batch", batch}}},
                {"seed", seed},
                {"calib_tokens", calib_tokens},
                {"eval_tokens", eval_tokens},
                {"mask_orientation", mask_orientation},
                {"relax_solver", relax_solver},
                {"skip_last", skip_last},
                {"init_scale", init_scale}};
  }
};

void load_config_file(const std::string& path, CliSettings& s) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  json j;
  in >> j;
  if (j.contains("dims")) {
    const auto& d = j["dims"];
    if (d.contains("d_model")) s.dims.d_model = d["d_model"].get<long>();
    if (d.contains("heads")) s.dims.heads = d["heads"].get<long>();
    if (d.contains("group_size")) s.dims.group_size = d["group_size"].get<long>();
    if (d.contains("d_k")) s.dims.d_k = d["d_k"].get<long>();
    if (d.contains("d_v")) s.dims.d_v = d["d_v"].get<long>();
    if (d.contains("d_up")) s.dims.d_up = d["d_up"].get<long>();
    if (d.contains("blocks")) s.dims.blocks = d["blocks"].get<long>();
  }
  if (j.contains("method")) s.method = j["method"].get<std::string>();
  if (j.contains("bits")) s.bits = j["bits"].get<int>();
  if (j.contains("alpha")) s.alpha = j["alpha"].get<double>();
  if (j.contains("beta")) s.beta = j["beta"].get<double>();
  if (j.contains("sweeps")) s.sweeps = j["sweeps"].get<int>();
  if (j.contains("damping_fraction")) s.damping_fraction = j["damping_fraction"].get<double>();
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    if (o.contains("lr")) s.lr = o["lr"].get<double>();
    if (o.contains("epochs")) s.epochs = o["epochs"].get<int>();
    if (o.contains("batch")) s.batch = o["batch"].get<int>();
  }
  if (j.contains("seed")) s.seed = j["seed"].get<uint64_t>();
  if (j.contains("calib_tokens")) s.calib_tokens = j["calib_tokens"].get<long>();
  if (j.contains("eval_tokens")) s.eval_tokens = j["eval_tokens"].get<long>();
  if (j.contains("mask_orientation")) s.mask_orientation = j["mask_orientation"].get<std::string>();
  if (j.contains("relax_solver")) s.relax_solver = j["relax_solver"].get<std::string>();
  if (j.contains("skip_last")) s.skip_last = j["skip_last"].get<int>();
  if (j.contains("init_scale")) s.init_scale = j["init_scale"].get<double>();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  out << text;
}

std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string block_csv(const RunReport& r) {
  std::string out = "block,method,bits,seed,mse\n";
  for (size_t b = 0; b < r.block_mse.size(); ++b)
    out += std::to_string(b) + "," + r.method + "," + std::to_string(r.bits) + "," +
           std::to_string(r.seed) + "," + csv_double(r.block_mse[b]) + "\n";
  return out;
}

json report_json(const RunReport& r, const CliSettings& s, bool timing) {
  json trace = json::array();
  for (const auto& rec : r.sweep_trace)
    trace.push_back({{"sweep", rec.sweep}, {"block_id", rec.block_id}, {"loss", rec.loss}});
  json out = {{"method", r.method},
              {"bits", r.bits},
              {"seed", r.seed},
              {"config", s.echo()},
              {"block_mse", r.block_mse},
              {"eval_block_mse", r.eval_block_mse},
              {"block_labels", r.block_labels},
              {"sweep_trace", trace},
              {"non_converged_relax_steps", r.non_converged_relax_steps}};
  if (timing) out["wall_clock_ms"] = r.wall_clock_ms;
  return out;
}

ToyModel resolve_model(const CliSettings& s, const std::string& model_path) {
  if (!model_path.empty()) return read_model_archive(model_path);
  return gen_toy_model(s.seed, s.dims, s.init_scale);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relax-and-project post-training quantization of toy transformer submodules"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  CliSettings s;
  std::string config_path, model_path, out_path, csv_path;
  bool timing = false;

  // Config file values are applied first; explicit flags override them.
  app.set_config();  // disable CLI11's own config handling
  app.add_option("--config", config_path, "JSON config file")->expected(1);

  auto add_common = [&](CLI::App* cmd) {
    cmd->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--method", s.method, "base+target, e.g. gptq+lpcd, rtn+qep, loaq");
    cmd->add_option("--bits", s.bits, "weight bit-width");
    cmd->add_option("--alpha", s.alpha, "propagation correction strength");
    cmd->add_option("--beta", s.beta, "residual correction strength");
    cmd->add_option("--sweeps", s.sweeps, "relax-project sweeps (0 = init only)");
    cmd->add_option("--damping", s.damping_fraction, "Hessian damping fraction");
    cmd->add_option("--lr", s.lr, "gradient relaxer learning rate");
    cmd->add_option("--epochs", s.epochs, "gradient relaxer epochs");
    cmd->add_option("--batch", s.batch, "gradient relaxer token batch size");
    cmd->add_option("--seed", s.seed, "master seed");
    cmd->add_option("--tokens", s.calib_tokens, "calibration token count");
    cmd->add_option("--eval-tokens", s.eval_tokens, "evaluation token count");
    cmd->add_option("--mask-orientation", s.mask_orientation, "causal_lower | causal_upper");
    cmd->add_option("--relax-solver", s.relax_solver, "gradient | closed_form");
    cmd->add_option("--skip-last", s.skip_last, "leave the last K blocks unquantized");
    cmd->add_option("--model", model_path, "tensor archive to quantize (default: generated)");
    cmd->add_flag("--timing", timing, "include wall-clock in the report");
  };
  auto add_dims = [&](CLI::App* cmd) {
    cmd->add_option("--d-model", s.dims.d_model);
    cmd->add_option("--heads", s.dims.heads);
    cmd->add_option("--group-size", s.dims.group_size);
    cmd->add_option("--d-k", s.dims.d_k);
    cmd->add_option("--d-v", s.dims.d_v);
    cmd->add_option("--d-up", s.dims.d_up);
    cmd->add_option("--blocks", s.dims.blocks);
    cmd->add_option("--init-scale", s.init_scale);
  };

  CLI::App* quantize = app.add_subcommand("quantize", "quantize one model, write a JSON report");
  add_common(quantize);
  add_dims(quantize);
  quantize->add_option("-o,--out", out_path, "report JSON path (default: stdout)");
  quantize->add_option("--csv", csv_path, "also write a per-block CSV");

  CLI::App* compare = app.add_subcommand("compare", "run a method matrix, write a combined CSV");
  add_common(compare);
  add_dims(compare);
  int n_seeds = 1;
  std::string methods_arg;
  compare->add_option("--seeds", n_seeds, "number of seeds (seed, seed+1, ...)");
  compare->add_option("--methods", methods_arg, "comma-separated methods (default: full matrix)");
  compare->add_option("-o,--out", out_path, "CSV path (default: stdout)");

  CLI::App* sweep_trace = app.add_subcommand("sweep-trace", "dump the relax-project objective log");
  add_common(sweep_trace);
  add_dims(sweep_trace);
  sweep_trace->add_option("-o,--out", out_path, "CSV path (default: stdout)");

  CLI::App* gen_model = app.add_subcommand("gen-model", "generate a toy model archive");
  gen_model->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  gen_model->add_option("--config", config_path, "JSON config file");
  gen_model->add_option("--seed", s.seed, "generator seed");
  add_dims(gen_model);
  std::string gen_out;
  gen_model->add_option("-o,--out", gen_out, "archive path")->required();

  // first pass: pick up --config before the real parse so flags can override
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      try {
        load_config_file(argv[i + 1], s);
      } catch (const std::exception& e) {
        return fail(kExitUsage, "config", e.what());
      }
      break;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail(kExitUsage, "usage", e.what());
  }

  try {
    if (*gen_model) {
      ToyModel model = gen_toy_model(s.seed, s.dims, s.init_scale);
      write_model_archive(gen_out, model);
      return kExitOk;
    }
    if (*quantize) {
      ToyModel model = resolve_model(s, model_path);
      auto [qm, report] = quantize_pipeline(model, s.pipeline());
      write_text(out_path, report_json(report, s, timing).dump(2) + "\n");
      if (!csv_path.empty()) write_text(csv_path, block_csv(report));
      return kExitOk;
    }
    if (*compare) {
      std::vector<std::string> methods;
      if (methods_arg.empty()) {
        for (const char* b : {"rtn", "gptq"})
          for (const char* t : {"none", "qep", "loaq", "lpcd"})
            methods.push_back(std::string(b) + "+" + t);
      } else {
        size_t start = 0;
        while (start <= methods_arg.size()) {
          size_t comma = methods_arg.find(',', start);
          methods.push_back(methods_arg.substr(
              start, comma == std::string::npos ? comma : comma - start));
          if (comma == std::string::npos) break;
          start = comma + 1;
        }
      }
      std::string csv = "block,method,bits,seed,mse\n";
      for (int k = 0; k < n_seeds; ++k) {
        CliSettings cell = s;
        cell.seed = s.seed + static_cast<uint64_t>(k);
        ToyModel model = resolve_model(cell, model_path);
        for (const auto& m : methods) {
          cell.method = m;
          auto [qm, report] = quantize_pipeline(model, cell.pipeline());
          for (size_t b = 0; b < report.block_mse.size(); ++b)
            csv += std::to_string(b) + "," + m + "," + std::to_string(cell.bits) + "," +
                   std::to_string(cell.seed) + "," + csv_double(report.block_mse[b]) + "\n";
        }
      }
      write_text(out_path, csv);
      return kExitOk;
    }
    if (*sweep_trace) {
      ToyModel model = resolve_model(s, model_path);
      auto [qm, report] = quantize_pipeline(model, s.pipeline());
      write_text(out_path, objective_log_csv(report.sweep_trace));
      return kExitOk;
    }
  } catch (const ArchiveException& e) {
    return fail(kExitArchive, std::string("archive_") + archive_error_name(e.code), e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kExitInvalid, "invalid", e.what());
  } catch (const std::exception& e) {
    return fail(kExitInternal, "internal", e.what());
  }
  return kExitOk;
}
