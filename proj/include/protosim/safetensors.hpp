#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header describing each tensor, then the raw tensor bytes.
// Tensors are exposed as float32 regardless of the stored dtype.

#include "protosim/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace protosim {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::int64_t numel() const;
  /// Views the tensor as rows x cols, where cols is the product of all but the
  /// leading dimensions (leading dimensions of size 1 are folded away).
  Matrix as_matrix(std::int64_t rows, std::int64_t cols) const;
  static Tensor from_matrix(const Matrix& m, std::vector<std::int64_t> shape = {});
};

struct TensorArchive {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

TensorArchive parse_safetensors(const std::vector<std::uint8_t>& bytes);
TensorArchive read_safetensors(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_safetensors(const TensorArchive& archive);
void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive);

}  // namespace protosim
