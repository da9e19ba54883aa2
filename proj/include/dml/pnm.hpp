#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dml/dmlt.hpp"
#include "dml/grid.hpp"
#include "dml/tensor.hpp"

// Binary netpbm: P6 (RGB) and P5 (gray), 8-bit, maxval 255.
namespace dml {

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

using GrayImage = Grid<std::uint8_t>;

std::string encode_pgm(const GrayImage& image);
GrayImage decode_pgm(std::string_view bytes, const std::string& source);
std::string encode_ppm(const RgbImage& image);
RgbImage decode_ppm(std::string_view bytes, const std::string& source);

void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// (3,H,W) tensor with values v/255.
Tensor to_tensor(const RgbImage& image);
/// Rounds clamp(v,0,1)*255.
RgbImage to_rgb(const Tensor& image);
/// round(255 * p) per pixel.
GrayImage to_gray(const ProbMap& map);

}  // namespace dml
