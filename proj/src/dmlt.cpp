#include "dml/dmlt.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dml {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

}  // namespace

std::string encode_dmlt(const Tensor& tensor) {
  std::string out = "DMLT";
  out.push_back(static_cast<char>(kDmltVersion));
  out.push_back(0);
  const auto& shape = tensor.shape();
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * tensor.numel());
  for (float f : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Tensor decode_dmlt(std::string_view bytes, const std::string& source) {
  auto fail = [&](const std::string& what) { return FormatError(source + ": " + what); };
  if (bytes.size() < 10) throw fail("truncated DMLT header");
  if (bytes.substr(0, 4) != "DMLT") throw fail("bad magic bytes, not a DMLT file");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kDmltVersion) {
    throw fail("unsupported DMLT version " + std::to_string(version));
  }
  if (bytes[5] != 0) throw fail("unsupported dtype code " + std::to_string(int(bytes[5])));
  const std::uint32_t rank = get_u32(bytes, 6);
  std::size_t offset = 10;
  if (rank == 0 || bytes.size() < offset + 4ull * rank) throw fail("truncated DMLT dims");
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(bytes, offset);
    offset += 4;
    if (d == 0) throw fail("zero-sized dimension");
  }
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != offset + 4 * n) {
    throw fail("payload holds " + std::to_string(bytes.size() - offset) + " bytes, expected " +
               std::to_string(4 * n));
  }
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i, offset += 4) values[i] = std::bit_cast<float>(get_u32(bytes, offset));
  return Tensor(std::move(shape), std::move(values));
}

void write_dmlt(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  const auto bytes = encode_dmlt(tensor);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(path.string() + ": write failed");
}

Tensor read_dmlt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dmlt(bytes, path.string());
}

}  // namespace dml
