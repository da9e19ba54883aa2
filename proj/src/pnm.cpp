#include "dml/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace dml {

namespace {

struct Header {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t payload_offset = 0;
};

// Parses "Px <w> <h> <maxval>" with optional '#' comments, followed by
// exactly one whitespace byte before the raster.
Header parse_header(std::string_view bytes, std::string_view magic, const std::string& source) {
  auto fail = [&](const std::string& what) { return FormatError(source + ": " + what); };
  if (bytes.size() < 2 || bytes.substr(0, 2) != magic) {
    throw fail("expected magic " + std::string(magic));
  }
  std::size_t pos = 2;
  auto next_number = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw fail("malformed header");
    }
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + std::size_t(bytes[pos] - '0');
      if (value > (1u << 24)) throw fail("header value out of range");
      ++pos;
    }
    return value;
  };
  Header h;
  h.width = next_number();
  h.height = next_number();
  const std::size_t maxval = next_number();
  if (h.width == 0 || h.height == 0) throw fail("zero image dimension");
  if (maxval != 255) throw fail("only maxval 255 is supported, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw fail("missing whitespace after header");
  }
  h.payload_offset = pos + 1;
  return h;
}

std::string header(std::string_view magic, std::size_t width, std::size_t height) {
  return std::string(magic) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
}

}  // namespace

std::string encode_pgm(const GrayImage& image) {
  std::string out = header("P5", image.width, image.height);
  out.append(image.values.begin(), image.values.end());
  return out;
}

GrayImage decode_pgm(std::string_view bytes, const std::string& source) {
  const Header h = parse_header(bytes, "P5", source);
  if (bytes.size() - h.payload_offset != h.width * h.height) {
    throw FormatError(source + ": raster size does not match " + std::to_string(h.width) + "x" +
                      std::to_string(h.height));
  }
  GrayImage out(h.height, h.width);
  std::copy(bytes.begin() + long(h.payload_offset), bytes.end(), out.values.begin());
  return out;
}

std::string encode_ppm(const RgbImage& image) {
  std::string out = header("P6", image.width, image.height);
  out.append(image.rgb.begin(), image.rgb.end());
  return out;
}

RgbImage decode_ppm(std::string_view bytes, const std::string& source) {
  const Header h = parse_header(bytes, "P6", source);
  if (bytes.size() - h.payload_offset != 3 * h.width * h.height) {
    throw FormatError(source + ": raster size does not match " + std::to_string(h.width) + "x" +
                      std::to_string(h.height));
  }
  RgbImage out{h.height, h.width, std::vector<std::uint8_t>(bytes.begin() + long(h.payload_offset), bytes.end())};
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open for reading");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(path.string() + ": write failed");
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) { write_file(path, encode_pgm(image)); }
GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path), path.string()); }
void write_ppm(const std::filesystem::path& path, const RgbImage& image) { write_file(path, encode_ppm(image)); }
RgbImage read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }

Tensor to_tensor(const RgbImage& image) {
  const std::size_t hw = image.height * image.width;
  std::vector<float> values(3 * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) values[c * hw + p] = float(image.rgb[3 * p + c]) / 255.0f;
  }
  return Tensor({3, image.height, image.width}, std::move(values));
}

RgbImage to_rgb(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("to_rgb: expected (3,H,W), got " + shape_string(image.shape()));
  RgbImage out{image.dim(1), image.dim(2), {}};
  const std::size_t hw = out.height * out.width;
  out.rgb.resize(3 * hw);
  const auto v = image.data();
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.rgb[3 * p + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v[c * hw + p], 0.0f, 1.0f) * 255.0f));
    }
  }
  return out;
}

GrayImage to_gray(const ProbMap& map) {
  GrayImage out(map.height, map.width);
  for (std::size_t p = 0; p < map.size(); ++p) {
    out.values[p] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[p], 0.0, 1.0) * 255.0));
  }
  return out;
}

}  // namespace dml
