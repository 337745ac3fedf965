#pragma once

// Flat checkpoint container mapping parameter-path strings to typed arrays.
//
// Byte layout (integers little-endian):
//   magic     8 bytes  "TSSCKPT1"
//   meta_len  u32
//   meta      meta_len bytes, UTF-8 JSON: at least
//             {"model": str, "config": object, "iteration": int, "seed": int}
//   count     u32      number of tensors
//   entries   count x (name_len u16, name bytes, dtype u8 (0=f32, 1=f64),
//                      rank u8, dims rank x i64, raw little-endian values)

#include <map>
#include <string>
#include <vector>

#include "tss/nn.hpp"
#include "tss/tensor.hpp"

namespace tss {

struct RawTensorEntry {
  std::string name;
  bool f64 = false;
  Shape dims;
  std::vector<double> data;
};

void save_checkpoint_raw(const std::string& path, const std::string& meta_json,
                         const std::vector<RawTensorEntry>& tensors);

// Returns the metadata JSON text and the tensor entries.
std::pair<std::string, std::vector<RawTensorEntry>> load_checkpoint_raw(
    const std::string& path);

template <typename Scalar>
void save_checkpoint(const std::string& path, const std::string& meta_json,
                     const ParamList<Scalar>& params) {
  std::vector<RawTensorEntry> entries;
  entries.reserve(params.size());
  for (const auto& p : params) {
    RawTensorEntry e;
    e.name = p.name;
    e.f64 = sizeof(Scalar) == 8;
    e.dims = p.tensor.shape();
    e.data.resize(static_cast<size_t>(p.tensor.numel()));
    for (Index i = 0; i < p.tensor.numel(); ++i)
      e.data[static_cast<size_t>(i)] = static_cast<double>(p.tensor.values()[i]);
    entries.push_back(std::move(e));
  }
  save_checkpoint_raw(path, meta_json, entries);
}

// Loads values into an existing parameter list by name. Every parameter must
// be present with a matching shape; dtype converts to the parameter's scalar.
template <typename Scalar>
std::string load_checkpoint(const std::string& path, ParamList<Scalar>& params) {
  auto [meta, entries] = load_checkpoint_raw(path);
  std::map<std::string, const RawTensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw DataError(path + ": checkpoint is missing parameter '" + p.name + "'");
    const RawTensorEntry& e = *it->second;
    if (e.dims != p.tensor.shape())
      throw DataError(path + ": parameter '" + p.name + "' has shape " +
                      shape_string(e.dims) + ", model expects " +
                      shape_string(p.tensor.shape()));
    for (Index i = 0; i < p.tensor.numel(); ++i)
      p.tensor.values()[i] = static_cast<Scalar>(e.data[static_cast<size_t>(i)]);
  }
  return meta;
}

}  // namespace tss
