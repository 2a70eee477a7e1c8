#include "cxrinf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "cxrinf/hashing.hpp"
#include "json.hpp"

namespace cxrinf {

using nlohmann::json;

std::string to_string(Label l) { return l == Label::kCovid ? "covid" : "control"; }

std::string to_string(SourceFormat f) {
  switch (f) {
    case SourceFormat::kPng:
      return "png";
    case SourceFormat::kJpeg:
      return "jpeg";
    case SourceFormat::kDicom:
      return "dicom-subset";
  }
  return "png";
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kManual:
      return "manual";
    case Provenance::kModel:
      return "model";
    case Provenance::kCollaborative:
      return "collaborative";
  }
  return "manual";
}

Label parse_label(const std::string& s) {
  if (s == "covid") return Label::kCovid;
  if (s == "control") return Label::kControl;
  throw ValidationError("unknown label '" + s + "' (expected covid|control)");
}

Provenance parse_provenance(const std::string& s) {
  if (s == "manual") return Provenance::kManual;
  if (s == "model") return Provenance::kModel;
  if (s == "collaborative") return Provenance::kCollaborative;
  throw ValidationError("unknown provenance '" + s + "'");
}

void check_unit_range(const Grid& g, const std::string& what) {
  if (g.size() == 0) throw ValidationError(what + ": empty grid");
  if (!(g >= 0.0).all() || !(g <= 1.0).all()) {
    throw ValidationError(what + ": values outside [0,1]");
  }
}

void check_binary(const Grid& g, const std::string& what) {
  if (!((g == 0.0) || (g == 1.0)).all()) throw ValidationError(what + ": mask is not binary");
}

Grid binarize(const Grid& g, double threshold) {
  return (g >= threshold).cast<double>();
}

// --- catalog ---------------------------------------------------------------

std::string catalog_line(const CatalogEntry& e) {
  json j = {{"id", e.id},       {"path", e.path},     {"label", to_string(e.label)},
            {"source", e.source}, {"width", e.width}, {"height", e.height},
            {"sha256", e.sha256}};
  return j.dump();
}

CatalogEntry parse_catalog_line(const std::string& line) {
  const json j = json::parse(line);
  CatalogEntry e;
  e.id = j.at("id").get<std::string>();
  e.path = j.at("path").get<std::string>();
  e.label = parse_label(j.at("label").get<std::string>());
  e.source = j.at("source").get<std::string>();
  e.width = j.at("width").get<int>();
  e.height = j.at("height").get<int>();
  e.sha256 = j.at("sha256").get<std::string>();
  return e;
}

Catalog::Catalog(std::filesystem::path path) : path_(std::move(path)) {}

std::vector<CatalogEntry> Catalog::load() const {
  std::vector<CatalogEntry> entries;
  std::ifstream in(path_);
  if (!in) return entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    entries.push_back(parse_catalog_line(line));
  }
  return entries;
}

void Catalog::append(const CatalogEntry& entry) const {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to catalog " + path_.string());
  out << catalog_line(entry) << '\n';
}

// --- ingestion -------------------------------------------------------------

Raster decode_any(std::span<const std::uint8_t> bytes, SourceFormat* format) {
  switch (sniff_format(bytes)) {
    case ImageFormat::kPng:
      if (format) *format = SourceFormat::kPng;
      return decode_png(bytes);
    case ImageFormat::kJpeg:
      if (format) *format = SourceFormat::kJpeg;
      return decode_jpeg(bytes);
    case ImageFormat::kDicom:
      if (format) *format = SourceFormat::kDicom;
      return decode_dicom(bytes);
    case ImageFormat::kUnknown:
      break;
  }
  throw ImageDecodeError("unrecognized image format");
}

IngestResult ingest_source(const std::filesystem::path& dir, Label label,
                           const std::string& source_tag, const Catalog* catalog) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw ValidationError("ingest source is not a directory: " + dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::set<std::string> seen_ids;
  std::map<std::string, std::string> by_hash;
  if (catalog != nullptr) {
    for (const auto& e : catalog->load()) {
      seen_ids.insert(e.id);
      by_hash.emplace(e.sha256, e.id);
    }
  }

  IngestResult result;
  for (const auto& file : files) {
    const std::string id = source_tag + "_" + file.stem().string();
    std::vector<std::uint8_t> bytes;
    Raster raster;
    SourceFormat fmt = SourceFormat::kPng;
    try {
      bytes = read_file(file);
      raster = decode_any(bytes, &fmt);
    } catch (const std::exception& ex) {
      result.errors.push_back({file.string(), ex.what()});
      continue;
    }
    if (!seen_ids.insert(id).second) {
      throw ValidationError("duplicate image id '" + id + "' from " + file.string());
    }
    const std::string digest = sha256_hex(bytes);
    if (auto it = by_hash.find(digest); it != by_hash.end()) {
      result.duplicates.emplace_back(id, it->second);
    } else {
      by_hash.emplace(digest, id);
    }
    CxrImage img;
    img.id = id;
    img.pixels = raster_to_gray(raster);
    img.source = source_tag;
    img.label = label;
    img.original_format = fmt;
    if (catalog != nullptr) {
      catalog->append({id, fs::absolute(file).string(), label, source_tag, img.width(),
                       img.height(), digest});
    }
    result.images.push_back(std::move(img));
  }
  return result;
}

// --- geometry --------------------------------------------------------------

namespace {

double sample_bilinear_clamped(const Grid& src, double y, double x) {
  const double maxy = static_cast<double>(src.rows() - 1);
  const double maxx = static_cast<double>(src.cols() - 1);
  y = std::clamp(y, 0.0, maxy);
  x = std::clamp(x, 0.0, maxx);
  const auto y0 = static_cast<Eigen::Index>(std::floor(y));
  const auto x0 = static_cast<Eigen::Index>(std::floor(x));
  const Eigen::Index y1 = std::min<Eigen::Index>(y0 + 1, src.rows() - 1);
  const Eigen::Index x1 = std::min<Eigen::Index>(x0 + 1, src.cols() - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = src(y0, x0) + fx * (src(y0, x1) - src(y0, x0));
  const double bottom = src(y1, x0) + fx * (src(y1, x1) - src(y1, x0));
  return top + fy * (bottom - top);
}

}  // namespace

Grid resize_bilinear(const Grid& src, int rows, int cols) {
  if (src.rows() == 0 || src.cols() == 0) throw ValidationError("resize of empty grid");
  if (rows == src.rows() && cols == src.cols()) return src;
  Grid out(rows, cols);
  const double sy = rows > 1 ? static_cast<double>(src.rows() - 1) / (rows - 1) : 0.0;
  const double sx = cols > 1 ? static_cast<double>(src.cols() - 1) / (cols - 1) : 0.0;
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      out(y, x) = sample_bilinear_clamped(src, y * sy, x * sx);
    }
  }
  return out;
}

CxrImage normalize(const CxrImage& image, int size) {
  if (size < 8) throw ValidationError("normalize: size must be >= 8");
  if (image.pixels.rows() < 1 || image.pixels.cols() < 1) {
    throw ValidationError("normalize: image '" + image.id + "' is not a 2-D array");
  }
  CxrImage out = image;
  out.pixels = resize_bilinear(image.pixels, size, size).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

// --- folds -----------------------------------------------------------------

std::vector<std::string> FoldPlan::test_ids(int fold) const {
  std::vector<std::string> ids;
  for (const auto& [id, f] : assignments) {
    if (f == fold) ids.push_back(id);
  }
  return ids;
}

std::vector<std::string> FoldPlan::train_ids(int fold) const {
  std::vector<std::string> ids;
  for (const auto& [id, f] : assignments) {
    if (f != fold) ids.push_back(id);
  }
  return ids;
}

FoldPlan make_folds(std::span<const CatalogKey> catalog, int k, double ratio,
                    std::uint64_t seed) {
  if (k < 2) throw ValidationError("make_folds: k must be >= 2");
  const double expected = static_cast<double>(k - 1) / k;
  if (std::abs(ratio - expected) > 1e-9) {
    throw ValidationError("make_folds: train ratio " + std::to_string(ratio) +
                          " inconsistent with k=" + std::to_string(k));
  }
  std::map<Label, std::vector<std::string>> by_class;
  std::set<std::string> ids;
  for (const auto& key : catalog) {
    if (!ids.insert(key.id).second) throw ValidationError("make_folds: duplicate id " + key.id);
    by_class[key.label].push_back(key.id);
  }
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.ratio = ratio;
  for (auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) < k) {
      throw ValidationError("make_folds: class '" + to_string(label) + "' has " +
                            std::to_string(members.size()) + " members, fewer than k=" +
                            std::to_string(k));
    }
    std::sort(members.begin(), members.end());
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(label)));
    rng.shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i) {
      plan.assignments[members[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    }
  }
  return plan;
}

std::string fold_plan_to_json(const FoldPlan& plan) {
  json j;
  j["k"] = plan.k;
  j["seed"] = plan.seed;
  j["ratio"] = plan.ratio;
  j["assignments"] = plan.assignments;
  return j.dump(2);
}

FoldPlan fold_plan_from_json(const std::string& text) {
  const json j = json::parse(text);
  FoldPlan plan;
  plan.k = j.at("k").get<int>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.ratio = j.at("ratio").get<double>();
  plan.assignments = j.at("assignments").get<std::map<std::string, int>>();
  for (const auto& [id, f] : plan.assignments) {
    if (f < 0 || f >= plan.k) throw ValidationError("fold plan: bad fold index for " + id);
  }
  return plan;
}

// --- augmentation ----------------------------------------------------------

void AugmentParams::validate() const {
  if (!(max_shift_fraction >= 0.0 && max_shift_fraction < 1.0)) {
    throw ValidationError("augment: max_shift_fraction must be in [0,1)");
  }
  if (!(max_rotation_deg >= 0.0)) throw ValidationError("augment: max_rotation_deg must be >= 0");
}

RigidTransform sample_transform(const AugmentParams& params, int rows, int cols, Rng& rng) {
  RigidTransform t;
  const double sx = params.max_shift_fraction * cols;
  const double sy = params.max_shift_fraction * rows;
  t.shift_x = sx > 0.0 ? rng.uniform(-sx, sx) : 0.0;
  t.shift_y = sy > 0.0 ? rng.uniform(-sy, sy) : 0.0;
  t.rotation_deg = params.max_rotation_deg > 0.0
                       ? rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
                       : 0.0;
  return t;
}

Grid apply_transform(const Grid& src, const RigidTransform& t) {
  if (t.shift_x == 0.0 && t.shift_y == 0.0 && t.rotation_deg == 0.0) return src;
  const double cy = (static_cast<double>(src.rows()) - 1.0) / 2.0;
  const double cx = (static_cast<double>(src.cols()) - 1.0) / 2.0;
  const double theta = t.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Grid out(src.rows(), src.cols());
  for (Eigen::Index y = 0; y < src.rows(); ++y) {
    for (Eigen::Index x = 0; x < src.cols(); ++x) {
      // Undo translation, then undo rotation. Rows grow downward, so a
      // counter-clockwise display rotation is clockwise in (x, y).
      const double px = static_cast<double>(x) - t.shift_x - cx;
      const double py = static_cast<double>(y) - t.shift_y - cy;
      const double sxp = c * px - s * py + cx;
      const double syp = s * px + c * py + cy;
      out(y, x) = sample_bilinear_clamped(src, syp, sxp);
    }
  }
  return out;
}

Augmented augment_with(const CxrImage& image, const SegMask* mask, const RigidTransform& t) {
  Augmented out;
  out.transform = t;
  out.image = image;
  out.image.pixels = apply_transform(image.pixels, t).cwiseMax(0.0).cwiseMin(1.0);
  if (mask != nullptr) {
    if (mask->pixels.rows() != image.pixels.rows() ||
        mask->pixels.cols() != image.pixels.cols()) {
      throw ValidationError("augment: mask not aligned with image " + image.id);
    }
    SegMask m = *mask;
    m.pixels = binarize(apply_transform(mask->pixels, t), 0.5);
    out.mask = std::move(m);
  }
  return out;
}

Augmented augment(const CxrImage& image, const SegMask* mask, const AugmentParams& params,
                  Rng& rng) {
  const RigidTransform t = sample_transform(params, image.height(), image.width(), rng);
  return augment_with(image, mask, t);
}

std::vector<Sample> balance_training_set(const std::vector<Sample>& fold_train,
                                         std::size_t target_count,
                                         const AugmentParams& params, std::uint64_t seed) {
  params.validate();
  std::vector<std::size_t> covid;
  std::vector<std::size_t> control;
  for (std::size_t i = 0; i < fold_train.size(); ++i) {
    (fold_train[i].image.label == Label::kCovid ? covid : control).push_back(i);
  }
  const auto& minority = covid.size() <= control.size() ? covid : control;
  if (minority.empty()) throw ValidationError("balance_training_set: minority class is empty");
  if (target_count < minority.size()) {
    throw ValidationError("balance_training_set: target " + std::to_string(target_count) +
                          " below current minority count " + std::to_string(minority.size()));
  }
  std::vector<Sample> out = fold_train;
  out.reserve(fold_train.size() + target_count - minority.size());
  for (std::size_t j = 0; j + minority.size() < target_count; ++j) {
    const Sample& src = fold_train[minority[j % minority.size()]];
    Rng rng(mix_seed(seed, j));
    Augmented a = augment(src.image, src.mask ? &*src.mask : nullptr, params, rng);
    Sample s{std::move(a.image), std::move(a.mask)};
    s.image.id = src.image.id + "#aug" + std::to_string(j);
    if (s.mask) s.mask->image_id = s.image.id;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cxrinf
