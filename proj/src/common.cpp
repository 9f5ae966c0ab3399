#include "ebm/common.hpp"

#include <cstring>

namespace ebm {

std::uint64_t hash_bytes(std::span<const std::byte> bytes, std::uint64_t h) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_matrix(const Matrix& m) {
  const std::int64_t dims[2] = {m.rows(), m.cols()};
  std::uint64_t h = hash_bytes(std::as_bytes(std::span(dims)));
  return hash_bytes(
      std::as_bytes(std::span(m.data(), static_cast<std::size_t>(m.size()))),
      h);
}

}  // namespace ebm
