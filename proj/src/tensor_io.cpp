#include "ebm/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace ebm {

namespace {

constexpr char kMagic[4] = {'E', 'B', 'M', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8;

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>(bits & 0xff));
    bits >>= 8;
  }
}

template <typename T>
T get_le(const std::byte* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct Header {
  DType dtype;
  std::vector<std::uint32_t> dims;
  std::uint64_t payload_bytes;
};

// Validates the header and dims held in data[0, available) against a record
// of `size` total bytes. The payload itself is never touched.
Header parse_header(const std::byte* data, std::size_t available, std::uint64_t size,
                    const std::string& origin) {
  if (available < kHeaderBytes) {
    throw FormatError(origin + ": truncated header (" + std::to_string(size) + " bytes)");
  }
  if (std::memcmp(data, kMagic, 4) != 0) throw FormatError(origin + ": bad magic, not an EBMT tensor record");
  const auto version = static_cast<std::uint8_t>(data[4]);
  const auto dtype = static_cast<std::uint8_t>(data[5]);
  const auto ndim = static_cast<std::uint8_t>(data[6]);
  const auto reserved = static_cast<std::uint8_t>(data[7]);
  if (version != kVersion) throw FormatError(origin + ": unsupported version " + std::to_string(version));
  if (dtype > 1) throw FormatError(origin + ": unsupported dtype " + std::to_string(dtype));
  if (reserved != 0) throw FormatError(origin + ": reserved header byte must be 0");
  if (available < kHeaderBytes + 4u * ndim) throw FormatError(origin + ": truncated dims");
  Header h{static_cast<DType>(dtype), {}, dtype_size(static_cast<DType>(dtype))};
  for (std::uint8_t i = 0; i < ndim; ++i) {
    const auto d = get_le<std::uint32_t>(data + kHeaderBytes + 4u * i);
    h.dims.push_back(d);
    if (d != 0 && h.payload_bytes > std::numeric_limits<std::uint64_t>::max() / d) {
      throw FormatError(origin + ": declared size overflows");
    }
    h.payload_bytes *= d;
  }
  const std::uint64_t actual = size - kHeaderBytes - 4u * ndim;
  if (actual != h.payload_bytes) {
    throw FormatError(origin + ": payload has " + std::to_string(actual) + " bytes, expected " +
                      std::to_string(h.payload_bytes));
  }
  return h;
}

}  // namespace

std::uint64_t TensorRecord::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void TensorRecord::validate() const {
  if (dims.size() > 255) throw FormatError("tensor record: more than 255 dims");
  if (values.size() != element_count()) {
    throw FormatError("tensor record: " + std::to_string(values.size()) + " values for " +
                      std::to_string(element_count()) + " elements");
  }
}

std::vector<std::byte> encode_tensor(const TensorRecord& record) {
  record.validate();
  std::vector<std::byte> out;
  out.reserve(kHeaderBytes + 4 * record.dims.size() + dtype_size(record.dtype) * record.values.size());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(kVersion));
  out.push_back(static_cast<std::byte>(record.dtype));
  out.push_back(static_cast<std::byte>(record.dims.size()));
  out.push_back(std::byte{0});
  for (auto d : record.dims) put_le<std::uint32_t>(out, d);
  for (double v : record.values) {
    if (record.dtype == DType::f32) {
      put_le<float>(out, static_cast<float>(v));
    } else {
      put_le<double>(out, v);
    }
  }
  return out;
}

TensorRecord decode_tensor(const std::vector<std::byte>& bytes, const std::string& origin) {
  const Header h = parse_header(bytes.data(), bytes.size(), bytes.size(), origin);
  TensorRecord rec;
  rec.dtype = h.dtype;
  rec.dims = h.dims;
  const std::byte* p = bytes.data() + kHeaderBytes + 4 * h.dims.size();
  const std::size_t n = h.payload_bytes / dtype_size(h.dtype);
  rec.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    rec.values[i] = h.dtype == DType::f32 ? static_cast<double>(get_le<float>(p + 4 * i))
                                          : get_le<double>(p + 8 * i);
  }
  return rec;
}

void write_tensor(const std::filesystem::path& path, const TensorRecord& record) {
  write_file_atomic(path, encode_tensor(record));
}

TensorRecord read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError(path.string() + ": cannot stat");

  // Header and dims first, so a lying header is rejected before allocation.
  std::vector<std::byte> head(std::min<std::uintmax_t>(file_size, kHeaderBytes + 4 * 255));
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  parse_header(head.data(), head.size(), file_size, path.string());

  std::vector<std::byte> bytes(file_size);
  in.clear();
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(file_size));
  if (static_cast<std::uintmax_t>(in.gcount()) != file_size) throw FormatError(path.string() + ": short read");
  return decode_tensor(bytes, path.string());
}

TensorRecord matrix_record(const Matrix& m, DType dtype) {
  TensorRecord rec;
  rec.dtype = dtype;
  rec.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  rec.values.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) rec.values.push_back(m(r, c));
  }
  return rec;
}

Matrix record_matrix(const TensorRecord& record) {
  if (record.dims.size() != 2) throw FormatError("expected a 2-d tensor record");
  Matrix m(record.dims[0], record.dims[1]);
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = record.values[k++];
  }
  return m;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::byte>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(tmp.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto* p = reinterpret_cast<const std::byte*>(text.data());
  write_file_atomic(path, std::vector<std::byte>(p, p + text.size()));
}

}  // namespace ebm
