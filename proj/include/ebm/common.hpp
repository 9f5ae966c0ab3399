#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace ebm {

using Vector = Eigen::VectorXd;
// Batched quantities store one batch element per column.
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Raised when a caller breaks an operation's preconditions (shapes, ranges).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a simulation produces a non-finite value.
class NumericalDivergence : public std::runtime_error {
 public:
  NumericalDivergence(const std::string& what, int layer = -1)
      : std::runtime_error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

// Raised for malformed files (tensor records, configs, manifests).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

// FNV-1a over the raw bytes of the matrix entries (column-major).
std::uint64_t hash_matrix(const Matrix& m);
std::uint64_t hash_bytes(std::span<const std::byte> bytes,
                         std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace ebm
