#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ebm/common.hpp"

namespace ebm {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// On-disk n-dimensional array.
///
/// Layout: "EBMT", version u8 (1), dtype u8, ndim u8, reserved u8 (0),
/// ndim x u32 dims (little endian), then the row-major little-endian payload.
/// Values are held as double in memory regardless of the stored dtype.
struct TensorRecord {
  std::vector<std::uint32_t> dims;
  DType dtype = DType::f32;
  std::vector<double> values;

  std::uint64_t element_count() const;
  void validate() const;
};

void write_tensor(const std::filesystem::path& path, const TensorRecord& record);
TensorRecord read_tensor(const std::filesystem::path& path);

std::vector<std::byte> encode_tensor(const TensorRecord& record);
TensorRecord decode_tensor(const std::vector<std::byte>& bytes, const std::string& origin = "<memory>");

// Matrix <-> record, row-major (rows x cols).
TensorRecord matrix_record(const Matrix& m, DType dtype = DType::f64);
Matrix record_matrix(const TensorRecord& record);

// Write bytes to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::byte>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ebm
