#include "ebm/rng.hpp"

#include <array>
#include <cmath>

namespace ebm {

namespace {

std::seed_seq make_seq(std::uint64_t seed, std::uint64_t stream) {
  return std::seed_seq{static_cast<std::uint32_t>(seed),
                       static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(stream),
                       static_cast<std::uint32_t>(stream >> 32)};
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream) {
  auto seq = make_seq(seed, stream);
  engine_.seed(seq);
}

double RngStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  require(n > 0, "RngStream::below: n must be positive");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double RngStream::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double scale = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * scale;
  has_spare_ = true;
  return u * scale;
}

void RngStream::fill_gaussian(Eigen::Ref<Vector> out) {
  for (Index i = 0; i < out.size(); ++i) out[i] = gaussian();
}

void fill_gaussian_columns(std::span<RngStream> streams, Matrix& out) {
  const auto n = static_cast<Index>(streams.size());
  require(n > 0 && out.cols() % n == 0,
          "fill_gaussian_columns: column count must be a multiple of the "
          "stream count");
  for (Index b = 0; b < out.cols(); ++b) {
    auto& rng = streams[static_cast<std::size_t>(b % n)];
    double* col = out.col(b).data();
    for (Index i = 0; i < out.rows(); ++i) col[i] = rng.gaussian();
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) {
  auto seq = make_seq(seed, purpose);
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

}  // namespace ebm
