#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace protosim {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = Mat<float>;
using MatrixD = Mat<double>;

/// Thrown when a caller violates a documented precondition (shapes, ranges).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Runtime failure: unreadable artifacts, non-finite numerics, I/O errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Uniform draw on the open interval (0, 1). Built from raw engine bits so the
/// stream is identical across standard library implementations.
inline double uniform_open(Rng& rng) {
  const std::uint64_t bits = rng() >> 11;  // 53 bits
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

/// Standard normal draw (Box-Muller, one value per call).
inline double standard_normal(Rng& rng) {
  const double u1 = uniform_open(rng);
  const double u2 = uniform_open(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      if (!std::isfinite(static_cast<double>(m(r, c)))) return false;
  return true;
}

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// 64-bit FNV-1a, used for parameter fingerprints and artifact hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  template <class S>
  void update(const Mat<S>& m) {
    const std::int64_t dims[2] = {m.rows(), m.cols()};
    update(dims, sizeof(dims));
    update(m.data(), sizeof(S) * static_cast<std::size_t>(m.size()));
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string Fnv1a::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  std::uint64_t v = state_;
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

}  // namespace protosim
