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

#include "lpcd/toy_model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace lpcd {

// Archive layout: a text manifest followed by one raw blob of little-endian
// float32 values, row-major per tensor.
//
//   lpcd-tensors v1
//   meta <d_model> <heads> <group_size> <d_k> <d_v> <d_up> <blocks> <seed> <init_scale>
//   tensor <name> <rows> <cols> f32 <byte offset into blob>
//   ...
//   blob <byte count>
//   <raw bytes>
//
// The meta line is optional for plain tensor sets.

enum class ArchiveError {
  io,             // file cannot be opened / written
  bad_magic,      // wrong header line
  bad_manifest,   // malformed manifest entry
  unknown_dtype,  // dtype other than f32
  blob_mismatch,  // manifest offsets/sizes disagree with the blob
  truncated,      // blob shorter than declared
  empty,          // archive holds no tensors where a model was expected
};

struct ArchiveException : std::runtime_error {
  ArchiveError code;
  ArchiveException(ArchiveError c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

inline const char* archive_error_name(ArchiveError e) {
  switch (e) {
    case ArchiveError::io: return "io";
    case ArchiveError::bad_magic: return "bad_magic";
    case ArchiveError::bad_manifest: return "bad_manifest";
    case ArchiveError::unknown_dtype: return "unknown_dtype";
    case ArchiveError::blob_mismatch: return "blob_mismatch";
    case ArchiveError::truncated: return "truncated";
    case ArchiveError::empty: return "empty";
  }
  return "unknown";
}

namespace detail {

inline void append_f32_le(std::string& blob, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  blob.push_back(static_cast<char>(bits & 0xff));
  blob.push_back(static_cast<char>((bits >> 8) & 0xff));
  blob.push_back(static_cast<char>((bits >> 16) & 0xff));
  blob.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const char* p) {
  uint32_t bits = (static_cast<uint32_t>(static_cast<unsigned char>(p[0]))) |
                  (static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
                  (static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
                  (static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24);
  float v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

struct ArchiveMeta {
  bool present = false;
  ToyDims dims;
  uint64_t seed = 0;
  double init_scale = 1.0;
};

struct TensorSet {
  std::vector<std::pair<std::string, Matrix>> tensors;  // insertion order preserved
  ArchiveMeta meta;

  const Matrix* find(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return &m;
    return nullptr;
  }
};

inline void write_tensor_archive(const std::string& path, const TensorSet& set) {
  std::string blob;
  std::ostringstream manifest;
  manifest << "lpcd-tensors v1\n";
  if (set.meta.present) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", set.meta.init_scale);
    manifest << "meta " << set.meta.dims.d_model << ' ' << set.meta.dims.heads << ' '
             << set.meta.dims.group_size << ' ' << set.meta.dims.d_k << ' ' << set.meta.dims.d_v
             << ' ' << set.meta.dims.d_up << ' ' << set.meta.dims.blocks << ' ' << set.meta.seed
             << ' ' << buf << '\n';
  }
  for (const auto& [name, m] : set.tensors) {
    manifest << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << " f32 " << blob.size()
             << '\n';
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        detail::append_f32_le(blob, static_cast<float>(m(i, j)));
  }
  manifest << "blob " << blob.size() << '\n';
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArchiveException(ArchiveError::io, "cannot open for writing: " + path);
  std::string header = manifest.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw ArchiveException(ArchiveError::io, "write failed: " + path);
}

inline TensorSet read_tensor_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveException(ArchiveError::io, "cannot open for reading: " + path);

  std::string line;
  if (!std::getline(in, line) || line != "lpcd-tensors v1")
    throw ArchiveException(ArchiveError::bad_magic, "not a tensor archive: " + path);

  struct Entry {
    std::string name;
    Index rows, cols;
    size_t offset;
  };
  std::vector<Entry> entries;
  TensorSet set;
  size_t blob_bytes = 0;
  bool saw_blob = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      ArchiveMeta& meta = set.meta;
      meta.present = true;
      long long dm, h, g, dk, dv, du, blocks;
      unsigned long long seed;
      double scale;
      if (!(ls >> dm >> h >> g >> dk >> dv >> du >> blocks >> seed >> scale))
        throw ArchiveException(ArchiveError::bad_manifest, "malformed meta line");
      meta.dims.d_model = static_cast<Index>(dm);
      meta.dims.heads = static_cast<Index>(h);
      meta.dims.group_size = static_cast<Index>(g);
      meta.dims.d_k = static_cast<Index>(dk);
      meta.dims.d_v = static_cast<Index>(dv);
      meta.dims.d_up = static_cast<Index>(du);
      meta.dims.blocks = static_cast<Index>(blocks);
      meta.seed = seed;
      meta.init_scale = scale;
    } else if (kind == "tensor") {
      Entry e;
      std::string dtype;
      long long rows, cols, offset;
      if (!(ls >> e.name >> rows >> cols >> dtype >> offset) || rows < 0 || cols < 0 || offset < 0)
        throw ArchiveException(ArchiveError::bad_manifest, "malformed tensor line: " + line);
      if (dtype != "f32")
        throw ArchiveException(ArchiveError::unknown_dtype, "unknown dtype: " + dtype);
      e.rows = rows;
      e.cols = cols;
      e.offset = static_cast<size_t>(offset);
      entries.push_back(std::move(e));
    } else if (kind == "blob") {
      long long n;
      if (!(ls >> n) || n < 0)
        throw ArchiveException(ArchiveError::bad_manifest, "malformed blob line");
      blob_bytes = static_cast<size_t>(n);
      saw_blob = true;
      break;
    } else if (kind.empty()) {
      continue;
    } else {
      throw ArchiveException(ArchiveError::bad_manifest, "unknown manifest line: " + line);
    }
  }
  if (!saw_blob) throw ArchiveException(ArchiveError::bad_manifest, "missing blob line");

  std::string blob(blob_bytes, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
  if (static_cast<size_t>(in.gcount()) != blob_bytes)
    throw ArchiveException(ArchiveError::truncated, "blob truncated");

  for (const auto& e : entries) {
    size_t bytes = static_cast<size_t>(e.rows) * static_cast<size_t>(e.cols) * 4;
    if (e.offset + bytes > blob.size())
      throw ArchiveException(ArchiveError::blob_mismatch,
                             "tensor extends past blob end: " + e.name);
    Matrix m(e.rows, e.cols);
    const char* p = blob.data() + e.offset;
    for (Index i = 0; i < e.rows; ++i)
      for (Index j = 0; j < e.cols; ++j) {
        m(i, j) = static_cast<double>(detail::read_f32_le(p));
        p += 4;
      }
    set.tensors.emplace_back(e.name, std::move(m));
  }
  return set;
}

inline void write_model_archive(const std::string& path, const ToyModel& model) {
  TensorSet set;
  set.meta.present = true;
  set.meta.dims = model.dims;
  set.meta.seed = model.seed;
  set.meta.init_scale = model.init_scale;
  for (size_t b = 0; b < model.blocks.size(); ++b) {
    const BlockWeights& w = model.blocks[b];
    std::string prefix = "block" + std::to_string(b) + ".";
    set.tensors.emplace_back(prefix + "w_q", w.w_q);
    set.tensors.emplace_back(prefix + "w_k", w.w_k);
    set.tensors.emplace_back(prefix + "w_v", w.w_v);
    set.tensors.emplace_back(prefix + "w_o", w.w_o);
    set.tensors.emplace_back(prefix + "w_g", w.w_g);
    set.tensors.emplace_back(prefix + "w_u", w.w_u);
    set.tensors.emplace_back(prefix + "w_d", w.w_d);
    set.tensors.emplace_back(prefix + "attn_norm", w.attn_norm.transpose());
    set.tensors.emplace_back(prefix + "mlp_norm", w.mlp_norm.transpose());
  }
  write_tensor_archive(path, set);
}

inline ToyModel read_model_archive(const std::string& path) {
  TensorSet set = read_tensor_archive(path);
  if (set.tensors.empty())
    throw ArchiveException(ArchiveError::empty, "archive holds no tensors: " + path);
  if (!set.meta.present)
    throw ArchiveException(ArchiveError::bad_manifest, "model archive lacks a meta line");
  ToyModel model;
  model.dims = set.meta.dims;
  model.seed = set.meta.seed;
  model.init_scale = set.meta.init_scale;
  auto need = [&](const std::string& name) -> const Matrix& {
    const Matrix* m = set.find(name);
    if (!m)
      throw ArchiveException(ArchiveError::bad_manifest, "model archive misses tensor: " + name);
    return *m;
  };
  for (Index b = 0; b < model.dims.blocks; ++b) {
    std::string prefix = "block" + std::to_string(b) + ".";
    BlockWeights w;
    w.w_q = need(prefix + "w_q");
    w.w_k = need(prefix + "w_k");
    w.w_v = need(prefix + "w_v");
    w.w_o = need(prefix + "w_o");
    w.w_g = need(prefix + "w_g");
    w.w_u = need(prefix + "w_u");
    w.w_d = need(prefix + "w_d");
    w.attn_norm = need(prefix + "attn_norm").transpose();
    w.mlp_norm = need(prefix + "mlp_norm").transpose();
    model.blocks.push_back(std::move(w));
  }
  return model;
}

}  // namespace lpcd
