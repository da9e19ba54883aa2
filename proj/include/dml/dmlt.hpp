#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "dml/tensor.hpp"

// "DMLT" tensor files: magic `DMLT`, u8 version (1), u8 dtype (0 = f32),
// u32 LE rank, rank x u32 LE dims, row-major LE f32 payload.
namespace dml {

class FormatError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::uint8_t kDmltVersion = 1;

std::string encode_dmlt(const Tensor& tensor);
// `source` names the origin in error messages (usually a file path).
Tensor decode_dmlt(std::string_view bytes, const std::string& source);

void write_dmlt(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_dmlt(const std::filesystem::path& path);

}  // namespace dml
