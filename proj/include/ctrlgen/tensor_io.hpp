#pragma once

// Little-endian binary tensor container shared by every checkpoint kind:
//
//   magic[4] | u32 version | u32 count |
//   count x ( u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 values[] )
//   | kind-specific trailer
//
// Tensors are written in lexicographic (byte-wise) name order.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctrlgen/numerics.hpp"

namespace ctrlgen {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file could not be opened or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  bool operator==(const Tensor&) const = default;
};

/// Mutable view of one named parameter tensor.
struct TensorRef {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::span<double> values;
};

TensorRef tensor_ref(std::string name, Matrix& m);
TensorRef tensor_ref(std::string name, Vector& v);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(std::string_view s);
  /// u32 length prefix followed by the bytes.
  void string32(std::string_view s);

  const std::vector<std::uint8_t>& data() const noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string bytes(std::size_t n);
  std::string string32();

  bool at_end() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

using TensorMap = std::map<std::string, Tensor>;

void write_container(ByteWriter& w, std::string_view magic, std::uint32_t version,
                     const TensorMap& tensors);
TensorMap read_container(ByteReader& r, std::string_view magic, std::uint32_t version);

/// Copies a set of parameter views into an ordered map.
TensorMap to_tensor_map(const std::vector<TensorRef>& refs);
/// Copies stored tensors back into parameter views; names and dims must match exactly.
void assign_from(const std::vector<TensorRef>& refs, const TensorMap& tensors);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

std::uint64_t content_hash(std::span<const std::uint8_t> bytes);

}  // namespace ctrlgen
