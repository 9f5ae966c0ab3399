#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "ebm/common.hpp"

namespace ebm {

/// Reproducible random source identified by (seed, stream id).
///
/// Bits come from std::mt19937_64 seeded through std::seed_seq, both of which
/// are fully specified by the standard. Gaussian variates use the Marsaglia
/// polar method so no implementation-defined distribution object is involved.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  double gaussian();
  void fill_gaussian(Eigen::Ref<Vector> out);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Fill column c of `out` with standard normals drawn from
// streams[c % streams.size()], column by column.
void fill_gaussian_columns(std::span<RngStream> streams, Matrix& out);

// Deterministically derive a sub-seed for a named purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose);

}  // namespace ebm
