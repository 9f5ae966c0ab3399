#include "ebm/formats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ebm/config.hpp"
#include "ebm/tensor_io.hpp"

namespace ebm {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::byte> encode_pnm(const Image& image) {
  require(image.channels == 1 || image.channels == 3, "encode_pnm: need 1 or 3 channels");
  const std::string header = std::string(image.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::byte> out;
  out.reserve(header.size() + static_cast<std::size_t>(image.data.size()));
  for (char c : header) out.push_back(static_cast<std::byte>(c));
  for (Index i = 0; i < image.data.size(); ++i) out.push_back(static_cast<std::byte>(to_byte(image.data[i])));
  return out;
}

Image decode_pnm(const std::vector<std::byte>& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<int>(bytes[pos]))) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<int>(bytes[pos]))) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError(origin + ": not a binary PGM/PPM");
  Index w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(origin + ": malformed header");
  }
  if (maxval != 255) throw FormatError(origin + ": only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  Image image(h, w, magic == "P5" ? 1 : 3);
  if (bytes.size() - std::min(pos, bytes.size()) != static_cast<std::size_t>(image.data.size())) {
    throw FormatError(origin + ": raster size mismatch");
  }
  for (Index i = 0; i < image.data.size(); ++i) {
    image.data[i] = static_cast<double>(static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i)])) / 255.0;
  }
  return image;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  write_file_atomic(path, encode_pnm(image));
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::transform(raw.begin(), raw.end(), bytes.begin(), [](char c) { return static_cast<std::byte>(c); });
  return decode_pnm(bytes, path.string());
}

std::string metrics_header(std::size_t layers) {
  std::string h = "epoch,step,mse";
  for (std::size_t l = 0; l < layers; ++l) h += ",loss_l" + std::to_string(l);
  return h;
}

std::string format_metrics_csv(const std::vector<MetricsRow>& rows, std::size_t layers) {
  std::string out = metrics_header(layers) + "\n";
  for (const auto& r : rows) {
    require(r.losses.size() == layers, "format_metrics_csv: row has the wrong number of losses");
    out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + format_double(r.mse);
    for (double l : r.losses) out += "," + format_double(l);
    out += "\n";
  }
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) throw FormatError("metrics: missing header");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 3 || line.rfind("epoch,step,mse", 0) != 0) throw FormatError("metrics: bad header");
  std::vector<MetricsRow> rows;
  int n = 1;
  while (std::getline(ss, line)) {
    ++n;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns) throw FormatError("metrics:" + std::to_string(n) + ": field count mismatch");
    MetricsRow r;
    r.epoch = std::stoi(cells[0]);
    r.step = std::stol(cells[1]);
    r.mse = std::stod(cells[2]);
    for (std::size_t i = 3; i < cells.size(); ++i) r.losses.push_back(std::stod(cells[i]));
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string format_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& [k, v] : manifest) out += k + " = " + v + "\n";
  return out;
}

Manifest read_manifest(const std::filesystem::path& path) {
  Manifest out;
  for (auto& e : read_key_values(path)) out.emplace_back(std::move(e.key), std::move(e.value));
  return out;
}

const std::string& manifest_value(const Manifest& manifest, const std::string& key) {
  for (const auto& [k, v] : manifest) {
    if (k == key) return v;
  }
  throw FormatError("manifest: missing key '" + key + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace ebm
