#include "protosim/safetensors.hpp"

#include "protosim/io.hpp"

#include <json.hpp>

#include <cstring>
#include <numeric>

namespace protosim {

using nlohmann::json;

std::int64_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

Matrix Tensor::as_matrix(std::int64_t rows, std::int64_t cols) const {
  if (rows * cols != numel() || static_cast<std::int64_t>(values.size()) != numel())
    throw Error("tensor of " + std::to_string(numel()) + " elements cannot be viewed as " +
                shape_str(rows, cols));
  Matrix m(rows, cols);
  std::memcpy(m.data(), values.data(), values.size() * sizeof(float));
  return m;
}

Tensor Tensor::from_matrix(const Matrix& m, std::vector<std::int64_t> shape) {
  Tensor t;
  t.shape = shape.empty() ? std::vector<std::int64_t>{m.rows(), m.cols()} : std::move(shape);
  if (t.numel() != m.size()) throw ContractError("tensor shape does not match matrix size");
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

const Tensor& TensorArchive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("weight archive is missing tensor '" + name + "'");
  return it->second;
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F64") return 8;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw Error("unsupported tensor dtype '" + dtype + "'");
}

}  // namespace

TensorArchive parse_safetensors(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw Error("weight archive truncated: missing header length");
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes[static_cast<std::size_t>(i)];
  if (header_len > bytes.size() - 8) throw Error("weight archive truncated: header overruns file");
  const std::string header_text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw Error(std::string("weight archive header is not valid JSON: ") + e.what());
  }
  const std::size_t data_start = 8 + header_len;
  const std::size_t data_size = bytes.size() - data_start;

  TensorArchive archive;
  for (const auto& [name, desc] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : desc.items()) archive.metadata[k] = v.get<std::string>();
      continue;
    }
    Tensor t;
    const auto dtype = desc.at("dtype").get<std::string>();
    t.shape = desc.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = desc.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size)
      throw Error("weight archive: bad data offsets for tensor '" + name + "'");
    const std::size_t esize = dtype_size(dtype);
    const auto n = static_cast<std::size_t>(t.numel());
    if (offsets[1] - offsets[0] != n * esize)
      throw Error("weight archive: byte length of tensor '" + name + "' does not match its shape");
    const std::uint8_t* src = bytes.data() + data_start + offsets[0];
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t* p = src + i * esize;
      if (dtype == "F32") {
        std::memcpy(&t.values[i], p, 4);
      } else if (dtype == "F64") {
        double d;
        std::memcpy(&d, p, 8);
        t.values[i] = static_cast<float>(d);
      } else if (dtype == "F16") {
        t.values[i] = half_to_float(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
      } else {
        const std::uint32_t bits = static_cast<std::uint32_t>(p[0] | (p[1] << 8)) << 16;
        std::memcpy(&t.values[i], &bits, 4);
      }
    }
    archive.tensors.emplace(name, std::move(t));
  }
  return archive;
}

TensorArchive read_safetensors(const std::filesystem::path& path) {
  return parse_safetensors(read_file_bytes(path));
}

std::vector<std::uint8_t> serialize_safetensors(const TensorArchive& archive) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    const std::uint64_t len = static_cast<std::uint64_t>(t.values.size()) * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  }
  if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out(8 + text.size() + offset);
  const std::uint64_t hl = text.size();
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(hl >> (8 * i));
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::uint8_t* dst = out.data() + 8 + text.size();
  for (const auto& [name, t] : archive.tensors) {
    std::memcpy(dst, t.values.data(), t.values.size() * 4);
    dst += t.values.size() * 4;
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive) {
  write_file_atomic(path, serialize_safetensors(archive));
}

}  // namespace protosim
