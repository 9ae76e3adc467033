#include "lpcd/pipeline.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "lpcd/archive.hpp"
#include "oracles.hpp"

using namespace lpcd;

namespace {

ToyDims small_dims() {
  ToyDims d;
  d.d_model = 8;
  d.heads = 2;
  d.group_size = 2;
  d.d_k = 4;
  d.d_v = 4;
  d.d_up = 12;
  d.blocks = 2;
  return d;
}

PipelineConfig fast_config() {
  PipelineConfig cfg;
  cfg.bits = 3;
  cfg.calib_tokens = 16;
  cfg.eval_tokens = 16;
  cfg.optimizer.lr = 5e-3;
  cfg.optimizer.epochs = 30;
  cfg.optimizer.batch = 1 << 20;
  cfg.sweeps = 1;
  return cfg;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name)
      : path((std::filesystem::temp_directory_path() / name).string()) {}
  ~TempFile() { std::error_code ec; std::filesystem::remove(path, ec); }
};

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("model generation is seed-deterministic with the contracted shapes") {
  ToyDims dims;  // defaults: d_model 16, 4 heads, groups of 2, d_k 4, d_up 32
  ToyModel a = gen_toy_model(42, dims);
  ToyModel b = gen_toy_model(42, dims);
  REQUIRE(a.blocks.size() == 4);
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    CHECK((a.blocks[i].w_q - b.blocks[i].w_q).norm() == 0.0);
    CHECK((a.blocks[i].w_d - b.blocks[i].w_d).norm() == 0.0);
    CHECK((a.blocks[i].attn_norm - b.blocks[i].attn_norm).norm() == 0.0);
  }
  CHECK(a.blocks[0].w_q.rows() == 16);
  CHECK(a.blocks[0].w_q.cols() == 16);   // heads * d_k
  CHECK(a.blocks[0].w_k.cols() == 8);    // kv_groups * d_k
  CHECK(a.blocks[0].w_v.cols() == 8);
  CHECK(a.blocks[0].w_o.rows() == 16);   // heads * d_v
  CHECK(a.blocks[0].w_u.cols() == 32);
  CHECK(a.blocks[0].w_d.rows() == 32);

  ToyModel c = gen_toy_model(43, dims);
  CHECK((a.blocks[0].w_q - c.blocks[0].w_q).norm() > 0.0);

  ToyDims bad = dims;
  bad.d_model = 15;
  CHECK_THROWS_AS(gen_toy_model(1, bad), std::invalid_argument);
}

TEST_CASE("plain RTN pipeline is per-layer direct projection") {
  ToyModel model = gen_toy_model(7, small_dims());
  PipelineConfig cfg = fast_config();
  cfg.base = BaseQuantizer::rtn;
  cfg.target = TargetMethod::none;
  auto [qm, report] = quantize_pipeline(model, cfg);
  QuantScheme scheme{cfg.bits, Granularity::per_channel, QuantMode::asymmetric};
  for (size_t b = 0; b < model.blocks.size(); ++b) {
    auto direct = [&](const Matrix& w) { return dequantize(project_direct(w, fit_scheme(w, scheme))); };
    CHECK((qm.blocks[b].w_q - direct(model.blocks[b].w_q)).norm() == 0.0);
    CHECK((qm.blocks[b].w_k - direct(model.blocks[b].w_k)).norm() == 0.0);
    CHECK((qm.blocks[b].w_v - direct(model.blocks[b].w_v)).norm() == 0.0);
    CHECK((qm.blocks[b].w_o - direct(model.blocks[b].w_o)).norm() == 0.0);
    CHECK((qm.blocks[b].w_g - direct(model.blocks[b].w_g)).norm() == 0.0);
    CHECK((qm.blocks[b].w_u - direct(model.blocks[b].w_u)).norm() == 0.0);
    CHECK((qm.blocks[b].w_d - direct(model.blocks[b].w_d)).norm() == 0.0);
  }
  CHECK(report.sweep_trace.empty());
}

TEST_CASE("a fine enough grid makes every method near-lossless") {
  ToyModel model = gen_toy_model(11, small_dims());
  for (auto target : {TargetMethod::none, TargetMethod::loaq}) {
    PipelineConfig cfg = fast_config();
    cfg.bits = 16;
    cfg.target = target;
    cfg.base = target == TargetMethod::none ? BaseQuantizer::rtn : BaseQuantizer::gptq;
    auto [qm, report] = quantize_pipeline(model, cfg);
    for (double mse : report.block_mse) CHECK(mse <= 1e-6);
  }
}

TEST_CASE("with projections stubbed out, the quantized path tracks the full path") {
  ToyModel model = gen_toy_model(13, small_dims());
  PipelineConfig cfg = fast_config();
  cfg.target = TargetMethod::loaq;
  cfg.no_quant = true;
  auto [qm, report] = quantize_pipeline(model, cfg);
  for (size_t b = 0; b < model.blocks.size(); ++b)
    CHECK((qm.blocks[b].w_q - model.blocks[b].w_q).norm() <= 1e-12);
  for (double mse : report.block_mse) CHECK(mse <= 1e-20);
}

TEST_CASE("zero sweeps reproduce the initialization method exactly") {
  ToyModel model = gen_toy_model(17, small_dims());
  PipelineConfig lpcd_cfg = fast_config();
  lpcd_cfg.target = TargetMethod::lpcd;
  lpcd_cfg.sweeps = 0;
  PipelineConfig loaq_cfg = lpcd_cfg;
  loaq_cfg.target = TargetMethod::loaq;
  auto [qa, ra] = quantize_pipeline(model, lpcd_cfg);
  auto [qb, rb] = quantize_pipeline(model, loaq_cfg);
  REQUIRE(ra.block_mse.size() == rb.block_mse.size());
  for (size_t i = 0; i < ra.block_mse.size(); ++i)
    CHECK(std::abs(ra.block_mse[i] - rb.block_mse[i]) <= 1e-9);
  for (size_t b = 0; b < qa.blocks.size(); ++b)
    CHECK((qa.blocks[b].w_d - qb.blocks[b].w_d).norm() == 0.0);
}

TEST_CASE("sweep traces cover every registered block each sweep") {
  ToyModel model = gen_toy_model(19, small_dims());
  PipelineConfig cfg = fast_config();
  cfg.target = TargetMethod::lpcd;
  cfg.sweeps = 2;
  auto [qm, report] = quantize_pipeline(model, cfg);
  // 2 model blocks x 3 submodules x 2 members x 2 sweeps
  CHECK(report.sweep_trace.size() == 24);
  CHECK(report.block_labels.size() == 12);
  for (const auto& rec : report.sweep_trace) {
    CHECK(rec.loss >= 0.0);
    CHECK(rec.sweep < 2);
  }
}

TEST_CASE("identical seed and config give identical reports") {
  ToyModel model = gen_toy_model(23, small_dims());
  PipelineConfig cfg = fast_config();
  cfg.target = TargetMethod::lpcd;
  cfg.optimizer.batch = 4;  // exercise the seeded minibatch path
  auto [qa, ra] = quantize_pipeline(model, cfg);
  auto [qb, rb] = quantize_pipeline(model, cfg);
  REQUIRE(ra.block_mse.size() == rb.block_mse.size());
  for (size_t i = 0; i < ra.block_mse.size(); ++i) CHECK(ra.block_mse[i] == rb.block_mse[i]);
  REQUIRE(ra.sweep_trace.size() == rb.sweep_trace.size());
  for (size_t i = 0; i < ra.sweep_trace.size(); ++i)
    CHECK(ra.sweep_trace[i].loss == rb.sweep_trace[i].loss);
}

TEST_CASE("skip-last leaves the tail blocks untouched") {
  ToyModel model = gen_toy_model(29, small_dims());
  PipelineConfig cfg = fast_config();
  cfg.target = TargetMethod::qep;
  cfg.skip_last = 1;
  auto [qm, report] = quantize_pipeline(model, cfg);
  CHECK((qm.blocks[1].w_q - model.blocks[1].w_q).norm() == 0.0);
  CHECK((qm.blocks[0].w_q - model.blocks[0].w_q).norm() > 0.0);
}

TEST_CASE("block MSE evaluation: zeros on identical models, mean semantics") {
  ToyModel model = gen_toy_model(31, small_dims());
  QuantizedModel same{model.blocks};
  Matrix tokens = gen_tokens(5, 12, model.dims.d_model);
  auto mse = evaluate_block_mse(model, same, tokens, MaskOrientation::causal_lower);
  for (double v : mse) CHECK(v == 0.0);

  PipelineConfig cfg = fast_config();
  cfg.target = TargetMethod::none;
  cfg.base = BaseQuantizer::rtn;
  auto [qm, report] = quantize_pipeline(model, cfg);
  auto mse2 = evaluate_block_mse(model, qm, tokens, MaskOrientation::causal_lower);

  // single-block direct computation and stacking invariance of the mean
  SubmoduleSpec spec = model.submodule_spec(MaskOrientation::causal_lower);
  auto full = model_forward(model.blocks, tokens, spec);
  auto hat = model_forward(qm.blocks, tokens, spec);
  for (size_t b = 0; b < full.size(); ++b) {
    Matrix diff = full[b] - hat[b];
    double direct = diff.squaredNorm() / static_cast<double>(diff.size());
    CHECK(mse2[b] == doctest::Approx(direct).epsilon(1e-15));
    Matrix stacked(diff.rows() * 2, diff.cols());
    stacked << diff, diff;
    CHECK(stacked.squaredNorm() / static_cast<double>(stacked.size()) ==
          doctest::Approx(direct).epsilon(1e-15));
  }
}

TEST_CASE("method labels parse and print consistently") {
  auto [b1, t1] = parse_method("gptq+lpcd");
  CHECK(b1 == BaseQuantizer::gptq);
  CHECK(t1 == TargetMethod::lpcd);
  auto [b2, t2] = parse_method("rtn");
  CHECK(b2 == BaseQuantizer::rtn);
  CHECK(t2 == TargetMethod::none);
  auto [b3, t3] = parse_method("loaq");
  CHECK(b3 == BaseQuantizer::gptq);  // documented default base
  CHECK(t3 == TargetMethod::loaq);
  CHECK(method_label(b1, t1) == "gptq+lpcd");
  CHECK_THROWS_AS(parse_method("awq"), std::invalid_argument);
}

TEST_CASE("tensor archives round-trip bit exactly") {
  ToyModel model = gen_toy_model(37, small_dims(), 1.25);
  TempFile tmp("lpcd_model_roundtrip.bin");
  write_model_archive(tmp.path, model);
  ToyModel back = read_model_archive(tmp.path);
  CHECK(back.seed == model.seed);
  CHECK(back.init_scale == model.init_scale);
  CHECK(back.dims.d_up == model.dims.d_up);
  REQUIRE(back.blocks.size() == model.blocks.size());
  for (size_t b = 0; b < model.blocks.size(); ++b) {
    CHECK((back.blocks[b].w_q - model.blocks[b].w_q).norm() == 0.0);
    CHECK((back.blocks[b].w_o - model.blocks[b].w_o).norm() == 0.0);
    CHECK((back.blocks[b].w_d - model.blocks[b].w_d).norm() == 0.0);
    CHECK((back.blocks[b].mlp_norm - model.blocks[b].mlp_norm).norm() == 0.0);
  }
}

TEST_CASE("archive error paths carry distinct codes") {
  ToyModel model = gen_toy_model(41, small_dims());
  TempFile tmp("lpcd_model_errors.bin");
  write_model_archive(tmp.path, model);

  auto slurp = [&](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  auto spit = [&](const std::string& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };
  std::string good = slurp(tmp.path);

  TempFile trunc("lpcd_model_trunc.bin");
  spit(trunc.path, good.substr(0, good.size() - 10));
  try {
    read_tensor_archive(trunc.path);
    FAIL("expected truncation error");
  } catch (const ArchiveException& e) {
    CHECK(e.code == ArchiveError::truncated);
  }

  TempFile magic("lpcd_model_magic.bin");
  spit(magic.path, "something else\n" + good);
  try {
    read_tensor_archive(magic.path);
    FAIL("expected magic error");
  } catch (const ArchiveException& e) {
    CHECK(e.code == ArchiveError::bad_magic);
  }

  TempFile dtype("lpcd_model_dtype.bin");
  std::string mutated = good;
  mutated.replace(mutated.find(" f32 "), 5, " f64 ");
  spit(dtype.path, mutated);
  try {
    read_tensor_archive(dtype.path);
    FAIL("expected dtype error");
  } catch (const ArchiveException& e) {
    CHECK(e.code == ArchiveError::unknown_dtype);
  }

  TempFile empty("lpcd_model_empty.bin");
  TensorSet none;
  none.meta.present = true;
  none.meta.dims = small_dims();
  write_tensor_archive(empty.path, none);
  try {
    read_model_archive(empty.path);
    FAIL("expected empty error");
  } catch (const ArchiveException& e) {
    CHECK(e.code == ArchiveError::empty);
  }

  CHECK_THROWS_AS(read_tensor_archive("/nonexistent/lpcd.bin"), ArchiveException);

  // manifest pointing past the blob end
  TempFile mismatch("lpcd_model_mismatch.bin");
  size_t tensor_at = good.find("tensor block0.w_q");
  size_t off_at = good.rfind(' ', good.find('\n', tensor_at));
  std::string bad_offset = good.substr(0, off_at + 1) + "99999999" +
                           good.substr(good.find('\n', tensor_at));
  spit(mismatch.path, bad_offset);
  try {
    read_tensor_archive(mismatch.path);
    FAIL("expected blob mismatch error");
  } catch (const ArchiveException& e) {
    CHECK(e.code == ArchiveError::blob_mismatch);
  }
}

TEST_CASE("generic tensor sets preserve offsets and shapes") {
  Rng rng(43);
  TensorSet set;
  set.tensors.emplace_back("a", random_matrix(rng, 3, 2));
  set.tensors.emplace_back("b", random_matrix(rng, 1, 5));
  // float32 storage: push the doubles through float precision first
  for (auto& [name, m] : set.tensors)
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<double>(static_cast<float>(m(i, j)));
  TempFile tmp("lpcd_tensorset.bin");
  write_tensor_archive(tmp.path, set);
  TensorSet back = read_tensor_archive(tmp.path);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "a");
  CHECK((back.tensors[0].second - set.tensors[0].second).norm() == 0.0);
  CHECK((back.tensors[1].second - set.tensors[1].second).norm() == 0.0);
}

}  // TEST_SUITE
