// Minimal DICOM Part 10 reader: uncompressed, little-endian, monochrome.
#include <cstring>
#include <optional>
#include <string>

#include "cxrinf/dataset.hpp"

namespace cxrinf {
namespace {

constexpr const char* kExplicitLE = "1.2.840.10008.1.2.1";
constexpr const char* kImplicitLE = "1.2.840.10008.1.2";
constexpr std::uint32_t kUndefinedLength = 0xFFFFFFFFu;

struct Element {
  std::uint16_t group = 0;
  std::uint16_t element = 0;
  std::string vr;
  std::uint32_t length = 0;
  std::size_t value_offset = 0;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

  Element next(bool explicit_vr) {
    Element e;
    e.group = u16();
    e.element = u16();
    if (e.group == 0xFFFE) {  // item / delimiters never carry a VR
      e.length = u32();
    } else if (explicit_vr) {
      e.vr = str(2);
      static const char* kLong[] = {"OB", "OW", "OF", "SQ", "UT", "UN", "OD",
                                    "OL", "UC", "UR", "OV", "SV", "UV"};
      bool long_form = false;
      for (const char* v : kLong) long_form = long_form || e.vr == v;
      if (long_form) {
        skip(2);
        e.length = u32();
      } else {
        e.length = u16();
      }
    } else {
      e.length = u32();
      if (e.group == 0x0028 || e.group == 0x7FE0) e.vr = "";
    }
    e.value_offset = pos_;
    return e;
  }

  /// Skip a value of undefined length (sequence or item) up to its delimiter.
  void skip_undefined(bool explicit_vr) {
    while (!done()) {
      Element e = next(explicit_vr);
      if (e.group == 0xFFFE && (e.element == 0xE0DD || e.element == 0xE00D)) return;
      if (e.length == kUndefinedLength) {
        skip_undefined(explicit_vr);
      } else {
        skip(e.length);
      }
    }
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ImageDecodeError("DICOM: truncated stream");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.pop_back();
  while (!s.empty() && s.front() == ' ') s.erase(s.begin());
  return s;
}

}  // namespace

Raster decode_dicom(std::span<const std::uint8_t> bytes) {
  if (sniff_format(bytes) != ImageFormat::kDicom) {
    throw ImageDecodeError("DICOM: missing DICM preamble");
  }
  Reader rd(bytes, 132);

  std::string transfer_syntax;
  // File meta group is always explicit VR little endian.
  while (!rd.done()) {
    const std::size_t start = rd.pos();
    Element e = rd.next(true);
    if (e.group != 0x0002) {
      rd.seek(start);
      break;
    }
    if (e.element == 0x0010) {
      transfer_syntax = trim(rd.str(e.length));
    } else {
      rd.skip(e.length);
    }
  }
  bool explicit_vr;
  if (transfer_syntax == kExplicitLE) {
    explicit_vr = true;
  } else if (transfer_syntax == kImplicitLE) {
    explicit_vr = false;
  } else {
    throw ImageDecodeError("DICOM: unsupported transfer syntax '" + transfer_syntax + "'");
  }

  std::optional<int> rows, cols, bits_alloc, bits_stored, samples_per_pixel;
  int pixel_rep = 0;
  std::string photometric;
  std::optional<Element> pixel_data;
  while (!rd.done()) {
    Element e = rd.next(explicit_vr);
    if (e.length == kUndefinedLength) {
      if (e.group == 0x7FE0 && e.element == 0x0010) {
        throw ImageDecodeError("DICOM: encapsulated (compressed) pixel data not supported");
      }
      rd.skip_undefined(explicit_vr);
      continue;
    }
    if (e.group == 0x0028) {
      switch (e.element) {
        case 0x0002: samples_per_pixel = rd.u16(); rd.skip(e.length - 2); continue;
        case 0x0004: photometric = trim(rd.str(e.length)); continue;
        case 0x0010: rows = rd.u16(); rd.skip(e.length - 2); continue;
        case 0x0011: cols = rd.u16(); rd.skip(e.length - 2); continue;
        case 0x0100: bits_alloc = rd.u16(); rd.skip(e.length - 2); continue;
        case 0x0101: bits_stored = rd.u16(); rd.skip(e.length - 2); continue;
        case 0x0103: pixel_rep = rd.u16(); rd.skip(e.length - 2); continue;
        default: break;
      }
    }
    if (e.group == 0x7FE0 && e.element == 0x0010) {
      pixel_data = e;
      break;
    }
    rd.skip(e.length);
  }

  if (!rows || !cols || !bits_alloc || !pixel_data) {
    throw ImageDecodeError("DICOM: missing image geometry or pixel data");
  }
  if (samples_per_pixel.value_or(1) != 1 ||
      (photometric != "MONOCHROME1" && photometric != "MONOCHROME2")) {
    throw ImageDecodeError("DICOM: only monochrome images are supported (got '" +
                           photometric + "')");
  }
  if (*bits_alloc != 8 && *bits_alloc != 16) {
    throw ImageDecodeError("DICOM: unsupported BitsAllocated " + std::to_string(*bits_alloc));
  }
  const int stored = bits_stored.value_or(*bits_alloc);
  if (stored < 1 || stored > *bits_alloc) throw ImageDecodeError("DICOM: bad BitsStored");
  const std::size_t count = static_cast<std::size_t>(*rows) * static_cast<std::size_t>(*cols);
  const std::size_t bytes_per = static_cast<std::size_t>(*bits_alloc / 8);
  if (pixel_data->length < count * bytes_per ||
      pixel_data->value_offset + count * bytes_per > bytes.size()) {
    throw ImageDecodeError("DICOM: short pixel data");
  }

  Raster r;
  r.width = *cols;
  r.height = *rows;
  r.channels = 1;
  r.max_value = (1 << stored) - 1;
  r.samples.resize(count);
  const std::uint8_t* src = bytes.data() + pixel_data->value_offset;
  const std::uint32_t mask = static_cast<std::uint32_t>(r.max_value);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t raw = bytes_per == 2 ? static_cast<std::uint32_t>(src[2 * i] | (src[2 * i + 1] << 8))
                                       : src[i];
    raw &= mask;
    if (pixel_rep == 1) raw ^= 1u << (stored - 1);  // two's complement -> offset binary
    if (photometric == "MONOCHROME1") raw = mask - raw;
    r.samples[i] = static_cast<std::uint16_t>(raw);
  }
  return r;
}

}  // namespace cxrinf
