#include "cxrinf/image_io.hpp"

#include <png.h>
// jpeglib.h needs size_t and FILE declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cxrinf {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

ImageFormat sniff_format(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) {
    return ImageFormat::kPng;
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return ImageFormat::kJpeg;
  }
  if (bytes.size() >= 132 && std::memcmp(bytes.data() + 128, "DICM", 4) == 0) {
    return ImageFormat::kDicom;
  }
  return ImageFormat::kUnknown;
}

// ---------------------------------------------------------------------------
// PNG

namespace {

struct PngReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->offset + len > cur->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->bytes.data() + cur->offset, len);
  cur->offset += len;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void png_flush_noop(png_structp) {}

void png_error_throw(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err != nullptr) *err = msg;
  png_longjmp(png, 1);
}

void png_warning_ignore(png_structp, png_const_charp) {}

std::vector<std::uint8_t> encode_png(int width, int height, int color_type, int bit_depth,
                                     const std::vector<std::uint8_t>& rows_bytes) {
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err,
                                            png_error_throw, png_warning_ignore);
  if (png == nullptr) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(rows_bytes.data() + static_cast<std::size_t>(y) * stride);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

Raster decode_png(std::span<const std::uint8_t> bytes) {
  if (sniff_format(bytes) != ImageFormat::kPng) throw ImageDecodeError("not a PNG stream");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err,
                                           png_error_throw, png_warning_ignore);
  if (png == nullptr) throw ImageDecodeError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngReadCursor cursor{bytes, 0};
  Raster r;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageDecodeError("PNG decode failed: " + err);
  }
  png_set_read_fn(png, &cursor, png_read_from_memory);
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_swap(png);  // host order (little-endian)
  png_read_update_info(png, info);
  r.width = static_cast<int>(png_get_image_width(png, info));
  r.height = static_cast<int>(png_get_image_height(png, info));
  r.channels = png_get_channels(png, info);
  const int depth = png_get_bit_depth(png, info);
  r.max_value = depth == 16 ? 65535 : 255;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * static_cast<std::size_t>(r.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
  for (int y = 0; y < r.height; ++y) {
    rows[static_cast<std::size_t>(y)] = buffer.data() + static_cast<std::size_t>(y) * rowbytes;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t count = static_cast<std::size_t>(r.width) * r.height * r.channels;
  r.samples.resize(count);
  if (depth == 16) {
    std::memcpy(r.samples.data(), buffer.data(), count * 2);
  } else {
    for (std::size_t i = 0; i < count; ++i) r.samples[i] = buffer[i];
  }
  return r;
}

// ---------------------------------------------------------------------------
// JPEG

namespace {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

Raster decode_jpeg(std::span<const std::uint8_t> bytes) {
  if (sniff_format(bytes) != ImageFormat::kJpeg) throw ImageDecodeError("not a JPEG stream");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  Raster r;
  std::vector<std::uint8_t> buffer;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageDecodeError(std::string("JPEG decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, const_cast<unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_GRAYSCALE;
  jpeg_start_decompress(&cinfo);
  r.width = static_cast<int>(cinfo.output_width);
  r.height = static_cast<int>(cinfo.output_height);
  r.channels = cinfo.output_components;
  r.max_value = 255;
  const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
  buffer.resize(stride * static_cast<std::size_t>(r.height));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buffer.data() + static_cast<std::size_t>(cinfo.output_scanline) * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  r.samples.assign(buffer.begin(), buffer.end());
  return r;
}

std::vector<std::uint8_t> encode_jpeg_gray8(const Grid& g, int quality) {
  jpeg_compress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  unsigned char* mem = nullptr;
  unsigned long mem_size = 0;
  std::vector<std::uint8_t> row(static_cast<std::size_t>(g.cols()));
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(mem);
    throw std::runtime_error(std::string("JPEG encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &mem, &mem_size);
  cinfo.image_width = static_cast<JDIMENSION>(g.cols());
  cinfo.image_height = static_cast<JDIMENSION>(g.rows());
  cinfo.input_components = 1;
  cinfo.in_color_space = JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    for (Eigen::Index x = 0; x < g.cols(); ++x) {
      row[static_cast<std::size_t>(x)] = quantize8(g(cinfo.next_scanline, x));
    }
    JSAMPROW rp = row.data();
    jpeg_write_scanlines(&cinfo, &rp, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<std::uint8_t> out(mem, mem + mem_size);
  std::free(mem);
  return out;
}

// ---------------------------------------------------------------------------

Grid raster_to_gray(const Raster& r) {
  Grid g(r.height, r.width);
  const double scale = 1.0 / r.max_value;
  const int ch = r.channels;
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      const std::uint16_t* px =
          r.samples.data() + (static_cast<std::size_t>(y) * r.width + x) * ch;
      double v;
      if (ch >= 3) {
        v = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      } else {
        v = px[0];
      }
      g(y, x) = std::clamp(v * scale, 0.0, 1.0);
    }
  }
  return g;
}

std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

std::uint16_t quantize16(double v) {
  return static_cast<std::uint16_t>(std::floor(std::clamp(v, 0.0, 1.0) * 65535.0 + 0.5));
}

std::vector<std::uint8_t> encode_png_gray8(const Grid& g) {
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(g.size()));
  for (Eigen::Index i = 0; i < g.size(); ++i) rows[static_cast<std::size_t>(i)] = quantize8(g.data()[i]);
  return encode_png(static_cast<int>(g.cols()), static_cast<int>(g.rows()), PNG_COLOR_TYPE_GRAY,
                    8, rows);
}

std::vector<std::uint8_t> encode_png_gray16(const Grid& g) {
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(g.size()) * 2);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const std::uint16_t v = quantize16(g.data()[i]);
    rows[static_cast<std::size_t>(i) * 2] = static_cast<std::uint8_t>(v >> 8);  // PNG is big-endian
    rows[static_cast<std::size_t>(i) * 2 + 1] = static_cast<std::uint8_t>(v & 0xFF);
  }
  return encode_png(static_cast<int>(g.cols()), static_cast<int>(g.rows()), PNG_COLOR_TYPE_GRAY,
                    16, rows);
}

std::vector<std::uint8_t> encode_png_rgb8(const Grid& r, const Grid& g, const Grid& b) {
  if (r.rows() != g.rows() || r.rows() != b.rows() || r.cols() != g.cols() ||
      r.cols() != b.cols()) {
    throw std::invalid_argument("encode_png_rgb8: channel size mismatch");
  }
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(r.size()) * 3);
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    rows[static_cast<std::size_t>(i) * 3] = quantize8(r.data()[i]);
    rows[static_cast<std::size_t>(i) * 3 + 1] = quantize8(g.data()[i]);
    rows[static_cast<std::size_t>(i) * 3 + 2] = quantize8(b.data()[i]);
  }
  return encode_png(static_cast<int>(r.cols()), static_cast<int>(r.rows()), PNG_COLOR_TYPE_RGB, 8,
                    rows);
}

Grid read_gray_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  switch (sniff_format(bytes)) {
    case ImageFormat::kPng:
      return raster_to_gray(decode_png(bytes));
    case ImageFormat::kJpeg:
      return raster_to_gray(decode_jpeg(bytes));
    default:
      throw ImageDecodeError("unsupported image format: " + path.string());
  }
}

}  // namespace cxrinf
