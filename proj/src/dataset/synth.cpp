#include <cmath>
#include <cstdio>
#include <numbers>

#include "cxrinf/dataset.hpp"
#include "cxrinf/hashing.hpp"

namespace cxrinf {

std::vector<Sample> synth_corpus(const SynthOptions& opts) {
  if (opts.count < 0) throw ValidationError("synth_corpus: negative count");
  if (opts.size < 8) throw ValidationError("synth_corpus: size must be >= 8");
  if (opts.covid_fraction < 0.0 || opts.covid_fraction > 1.0) {
    throw ValidationError("synth_corpus: covid_fraction must be in [0,1]");
  }
  const int s = opts.size;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(opts.count));
  for (int i = 0; i < opts.count; ++i) {
    Rng rng(mix_seed(opts.seed, static_cast<std::uint64_t>(i)));
    const bool covid = std::floor((i + 1) * opts.covid_fraction) > std::floor(i * opts.covid_fraction);
    char id[64];
    std::snprintf(id, sizeof(id), "synth_%s_%04d", covid ? "covid" : "control", i);

    Grid img(s, s);
    Grid mask = Grid::Zero(s, s);
    const double tilt = rng.uniform(-0.05, 0.05);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double u = (x + 0.5) / s - 0.5;
        const double v = (y + 0.5) / s - 0.5;
        img(y, x) = 0.40 + 0.12 * std::cos(std::numbers::pi * u) + tilt * v +
                    opts.noise_sigma * rng.normal();
      }
    }
    if (covid) {
      const int disks = 1 + static_cast<int>(rng.below(3));
      for (int d = 0; d < disks; ++d) {
        const double r = rng.uniform(0.08, 0.18) * s;
        const double cy = rng.uniform(r, s - r);
        const double cx = rng.uniform(r, s - r);
        for (int y = 0; y < s; ++y) {
          for (int x = 0; x < s; ++x) {
            const double dy = y - cy;
            const double dx = x - cx;
            if (dx * dx + dy * dy <= r * r && mask(y, x) == 0.0) {
              mask(y, x) = 1.0;
              img(y, x) += 0.35;
            }
          }
        }
      }
    }
    Sample sample;
    sample.image.id = id;
    sample.image.pixels = img.cwiseMax(0.0).cwiseMin(1.0);
    sample.image.source = "synthetic";
    sample.image.label = covid ? Label::kCovid : Label::kControl;
    sample.mask = SegMask{id, mask, Provenance::kManual};
    out.push_back(std::move(sample));
  }
  return out;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const fs::path catalog_path = dir / "catalog.jsonl";
  fs::remove(catalog_path);
  Catalog catalog(catalog_path);
  for (const auto& s : samples) {
    const auto png = encode_png_gray16(s.image.pixels);
    const std::string rel = "images/" + s.image.id + ".png";
    write_file(dir / rel, png);
    if (s.mask) write_file(dir / "masks" / (s.image.id + ".png"), encode_png_gray8(s.mask->pixels));
    catalog.append({s.image.id, rel, s.image.label, s.image.source, s.image.width(),
                    s.image.height(), sha256_hex(png)});
  }
}

std::vector<Sample> load_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const Catalog catalog(dir / "catalog.jsonl");
  if (!fs::exists(catalog.path())) {
    throw ValidationError("corpus catalog not found: " + catalog.path().string());
  }
  std::vector<Sample> out;
  for (const auto& e : catalog.load()) {
    Sample s;
    const fs::path p = fs::path(e.path).is_absolute() ? fs::path(e.path) : dir / e.path;
    SourceFormat fmt = SourceFormat::kPng;
    s.image.pixels = raster_to_gray(decode_any(read_file(p), &fmt));
    s.image.id = e.id;
    s.image.source = e.source;
    s.image.label = e.label;
    s.image.original_format = fmt;
    const fs::path mp = dir / "masks" / (e.id + ".png");
    if (fs::exists(mp)) {
      s.mask = SegMask{e.id, binarize(read_gray_image(mp), 0.5), Provenance::kManual};
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cxrinf
