#pragma once

// Flat binary tensor archive.
//
// Layout (all integers little-endian):
//   bytes [0, 8)    magic "KVPTARC1"
//   bytes [8, 16)   u64 header length N
//   bytes [16, 16+N) UTF-8 JSON header:
//       {"format_version": 1,
//        "metadata": {...},
//        "tensors": {"<name>": {"dtype": "f32", "shape": [..], "offset": <bytes>}}}
//   then the data section; each offset is relative to the start of the data section
//   and every tensor is stored as contiguous little-endian float32, row-major.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace kvprobe {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t numel() const;
  bool all_finite() const;
};

struct TensorArchive {
  std::map<std::string, Tensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();
};

TensorArchive read_archive(const std::filesystem::path& path);
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);

}  // namespace kvprobe
