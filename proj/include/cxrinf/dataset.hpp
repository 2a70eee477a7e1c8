#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrinf/image_io.hpp"
#include "cxrinf/rng.hpp"
#include "cxrinf/tensor.hpp"

namespace cxrinf {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Label { kCovid, kControl };
enum class SourceFormat { kPng, kJpeg, kDicom };
enum class Provenance { kManual, kModel, kCollaborative };

std::string to_string(Label l);
std::string to_string(SourceFormat f);
std::string to_string(Provenance p);
Label parse_label(const std::string& s);
Provenance parse_provenance(const std::string& s);

/// Grayscale radiograph with intensities in [0,1].
struct CxrImage {
  std::string id;
  Grid pixels;
  std::string source;
  Label label = Label::kControl;
  SourceFormat original_format = SourceFormat::kPng;

  int height() const { return static_cast<int>(pixels.rows()); }
  int width() const { return static_cast<int>(pixels.cols()); }
};

/// Binary segmentation mask aligned to a CxrImage.
struct SegMask {
  std::string image_id;
  Grid pixels;
  Provenance provenance = Provenance::kManual;
};

/// Per-pixel infection probability predicted for one image.
struct ProbMask {
  std::string image_id;
  Grid pixels;
};

/// Image plus optional mask; the unit that flows through training.
struct Sample {
  CxrImage image;
  std::optional<SegMask> mask;
};

/// Throws ValidationError unless every value is in [0,1].
void check_unit_range(const Grid& g, const std::string& what);
/// Throws ValidationError unless every value is exactly 0 or 1.
void check_binary(const Grid& g, const std::string& what);
Grid binarize(const Grid& g, double threshold = 0.5);

// --- catalog ---------------------------------------------------------------

struct CatalogEntry {
  std::string id;
  std::string path;
  Label label = Label::kControl;
  std::string source;
  int width = 0;
  int height = 0;
  std::string sha256;
};

/// Line-delimited JSON catalog. Single writer; readers load the whole file.
class Catalog {
 public:
  explicit Catalog(std::filesystem::path path);

  const std::filesystem::path& path() const { return path_; }
  std::vector<CatalogEntry> load() const;
  void append(const CatalogEntry& entry) const;

 private:
  std::filesystem::path path_;
};

std::string catalog_line(const CatalogEntry& e);
CatalogEntry parse_catalog_line(const std::string& line);

// --- ingestion -------------------------------------------------------------

struct IngestFailure {
  std::string path;
  std::string message;
};

struct IngestResult {
  std::vector<CxrImage> images;
  std::vector<IngestFailure> errors;
  /// (id, id of earlier image with identical content)
  std::vector<std::pair<std::string, std::string>> duplicates;
};

/// Decode every file in `dir`. Undecodable files become error records; a
/// repeated id is a hard error. Rows are appended to `catalog` when given.
IngestResult ingest_source(const std::filesystem::path& dir, Label label,
                           const std::string& source_tag,
                           const Catalog* catalog = nullptr);

/// Decode a single PNG / JPEG / uncompressed monochrome DICOM buffer.
Raster decode_any(std::span<const std::uint8_t> bytes, SourceFormat* format = nullptr);

/// Uncompressed little-endian monochrome DICOM (explicit or implicit VR).
Raster decode_dicom(std::span<const std::uint8_t> bytes);

// --- geometry --------------------------------------------------------------

/// Bilinear resampling with corner alignment (output corners sample the
/// input corners exactly).
Grid resize_bilinear(const Grid& src, int rows, int cols);

CxrImage normalize(const CxrImage& image, int size);

// --- folds -----------------------------------------------------------------

struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  double ratio = 0.8;
  std::map<std::string, int> assignments;

  std::vector<std::string> test_ids(int fold) const;
  std::vector<std::string> train_ids(int fold) const;
};

struct CatalogKey {
  std::string id;
  Label label = Label::kControl;
};

/// Stratified k-fold assignment. `ratio` is the train fraction and must equal
/// (k-1)/k.
FoldPlan make_folds(std::span<const CatalogKey> catalog, int k, double ratio,
                    std::uint64_t seed);

std::string fold_plan_to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const std::string& text);

// --- augmentation ----------------------------------------------------------

enum class FillMode { kNearest };

struct AugmentParams {
  double max_shift_fraction = 0.10;
  double max_rotation_deg = 10.0;
  FillMode fill = FillMode::kNearest;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Forward map: rotate about the image centre by `rotation_deg`
/// (counter-clockwise as displayed), then translate by (shift_x, shift_y)
/// pixels; +x moves content right, +y moves it down.
struct RigidTransform {
  double shift_x = 0.0;
  double shift_y = 0.0;
  double rotation_deg = 0.0;
};

RigidTransform sample_transform(const AugmentParams& params, int rows, int cols, Rng& rng);

/// Inverse-map resampling with bilinear interpolation; samples falling outside
/// the frame take the nearest edge value.
Grid apply_transform(const Grid& src, const RigidTransform& t);

struct Augmented {
  CxrImage image;
  std::optional<SegMask> mask;
  RigidTransform transform;
};

Augmented augment_with(const CxrImage& image, const SegMask* mask, const RigidTransform& t);
Augmented augment(const CxrImage& image, const SegMask* mask, const AugmentParams& params,
                  Rng& rng);

/// Expand the minority class to `target_count` with augmented copies;
/// originals are kept first, in input order.
std::vector<Sample> balance_training_set(const std::vector<Sample>& fold_train,
                                         std::size_t target_count,
                                         const AugmentParams& params, std::uint64_t seed);

// --- synthetic corpus --------------------------------------------------------

struct SynthOptions {
  int count = 8;
  std::uint64_t seed = 0;
  int size = 64;
  double covid_fraction = 0.5;
  double noise_sigma = 0.05;
};

/// Disk-on-noise radiograph surrogates. Covid samples carry 1..3 bright disks
/// which form the mask; control samples have empty masks.
std::vector<Sample> synth_corpus(const SynthOptions& opts);

/// Writes images/<id>.png (16-bit), masks/<id>.png (8-bit) and catalog.jsonl.
void write_corpus(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_corpus(const std::filesystem::path& dir);

}  // namespace cxrinf
