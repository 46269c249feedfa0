#include "ctrlgen/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace ctrlgen {

TensorRef tensor_ref(std::string name, Matrix& m) {
  return {std::move(name),
          {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
          m.flat()};
}

TensorRef tensor_ref(std::string name, Vector& v) {
  return {std::move(name), {static_cast<std::uint32_t>(v.size())}, v};
}

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

void ByteWriter::string32(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) throw FormatError("truncated checkpoint");
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint16_t ByteReader::u16() {
  need(2);
  std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::string ByteReader::string32() { return bytes(u32()); }

void write_container(ByteWriter& w, std::string_view magic, std::uint32_t version,
                     const TensorMap& tensors) {
  w.bytes(magic);
  w.u32(version);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (double v : t.values) w.f64(v);
  }
}

TensorMap read_container(ByteReader& r, std::string_view magic, std::uint32_t version) {
  if (r.bytes(magic.size()) != magic) {
    throw FormatError("bad magic, expected " + std::string(magic));
  }
  if (auto v = r.u32(); v != version) {
    throw FormatError("unsupported version " + std::to_string(v));
  }
  TensorMap out;
  const std::uint32_t count = r.u32();
  std::string prev;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u16());
    if (i > 0 && !(prev < name)) throw FormatError("tensors not in lexicographic order");
    Tensor t;
    const std::uint8_t ndim = r.u8();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    t.values.resize(n);
    for (double& v : t.values) v = r.f64();
    prev = name;
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

TensorMap to_tensor_map(const std::vector<TensorRef>& refs) {
  TensorMap out;
  for (const auto& ref : refs) {
    out.emplace(ref.name, Tensor{ref.dims, {ref.values.begin(), ref.values.end()}});
  }
  return out;
}

void assign_from(const std::vector<TensorRef>& refs, const TensorMap& tensors) {
  if (refs.size() != tensors.size()) throw FormatError("tensor count mismatch");
  for (const auto& ref : refs) {
    auto it = tensors.find(ref.name);
    if (it == tensors.end()) throw FormatError("missing tensor " + ref.name);
    if (it->second.dims != ref.dims) throw FormatError("dimension mismatch for " + ref.name);
    std::copy(it->second.values.begin(), it->second.values.end(), ref.values.begin());
  }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t content_hash(std::span<const std::uint8_t> bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

}  // namespace ctrlgen
