#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tsrl {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using Matd = Mat<double>;
using Vecd = Vec<double>;
using RowVecd = RowVec<double>;

/// Bad user input: malformed arguments, impossible requests.
struct ArgumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Structurally broken data: invariant violations, shape mismatches.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable container: missing keys, unparseable files.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint does not match the data or config it is used with.
struct CompatibilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values encountered during training; maps to exit code 2.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

template <class S>
std::uint64_t hash_matrix(const Mat<S>& m, std::uint64_t h = 0xcbf29ce484222325ull) {
  const std::int64_t dims[2] = {m.rows(), m.cols()};
  h = fnv1a64(dims, sizeof(dims), h);
  return fnv1a64(m.data(), sizeof(S) * static_cast<std::size_t>(m.size()), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace tsrl
