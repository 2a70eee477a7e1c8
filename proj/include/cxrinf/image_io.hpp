#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrinf/tensor.hpp"

namespace cxrinf {

class ImageDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ImageFormat { kPng, kJpeg, kDicom, kUnknown };

/// Decoded raster. Samples are interleaved, `max_value` is 255 or 65535.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  int max_value = 255;
  std::vector<std::uint16_t> samples;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

ImageFormat sniff_format(std::span<const std::uint8_t> bytes);

Raster decode_png(std::span<const std::uint8_t> bytes);
Raster decode_jpeg(std::span<const std::uint8_t> bytes);

/// Luminance in [0,1]; colour rasters use Rec. 601 weights.
Grid raster_to_gray(const Raster& r);

/// Quantization to 8 bits is round-half-up: floor(v * 255 + 0.5).
std::uint8_t quantize8(double v);
std::uint16_t quantize16(double v);

std::vector<std::uint8_t> encode_png_gray8(const Grid& g);
std::vector<std::uint8_t> encode_png_gray16(const Grid& g);
std::vector<std::uint8_t> encode_png_rgb8(const Grid& r, const Grid& g, const Grid& b);
std::vector<std::uint8_t> encode_jpeg_gray8(const Grid& g, int quality = 95);

/// Read any supported PNG/JPEG into a [0,1] grid.
Grid read_gray_image(const std::filesystem::path& path);

}  // namespace cxrinf
