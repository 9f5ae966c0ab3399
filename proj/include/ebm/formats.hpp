#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ebm/envs.hpp"

namespace ebm {

// Binary PGM (P5, 1 channel) or PPM (P6, 3 channels), maxval 255, with
// byte = round(clamp(v, 0, 1) * 255).
std::vector<std::byte> encode_pnm(const Image& image);
Image decode_pnm(const std::vector<std::byte>& bytes, const std::string& origin = "<memory>");
void write_pnm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);
std::uint8_t to_byte(double v);

struct MetricsRow {
  int epoch = 0;
  long step = 0;
  double mse = 0.0;
  std::vector<double> losses;  // L^0 .. L^{L-1}
};

std::string metrics_header(std::size_t layers);
std::string format_metrics_csv(const std::vector<MetricsRow>& rows, std::size_t layers);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);

using Manifest = std::vector<std::pair<std::string, std::string>>;
std::string format_manifest(const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
const std::string& manifest_value(const Manifest& manifest, const std::string& key);

std::string read_text(const std::filesystem::path& path);

}  // namespace ebm
