#include <fstream>
#include <set>

#include "cxrinf/dataset.hpp"
#include "cxrinf/image_io.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cxrinf;
namespace fs = std::filesystem;

namespace {

void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xFF));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void element(std::vector<std::uint8_t>& b, bool explicit_vr, std::uint16_t group,
             std::uint16_t elem, const std::string& vr, const std::vector<std::uint8_t>& value) {
  put16(b, group);
  put16(b, elem);
  if (explicit_vr) {
    b.insert(b.end(), vr.begin(), vr.end());
    if (vr == "OB" || vr == "OW") {
      put16(b, 0);
      put32(b, static_cast<std::uint32_t>(value.size()));
    } else {
      put16(b, static_cast<std::uint16_t>(value.size()));
    }
  } else {
    put32(b, static_cast<std::uint32_t>(value.size()));
  }
  b.insert(b.end(), value.begin(), value.end());
}

std::vector<std::uint8_t> us(std::uint16_t v) {
  std::vector<std::uint8_t> b;
  put16(b, v);
  return b;
}

std::vector<std::uint8_t> text(std::string s) {
  if (s.size() % 2) s.push_back(s.back() == '\0' || s.find('.') != std::string::npos ? '\0' : ' ');
  return {s.begin(), s.end()};
}

// Minimal Part 10 file holding a 16-bit monochrome image.
std::vector<std::uint8_t> make_dicom(bool explicit_vr, const std::string& photometric,
                                     int rows, int cols, const std::vector<std::uint16_t>& px,
                                     int bits_stored = 12) {
  std::vector<std::uint8_t> b(128, 0);
  for (char c : std::string("DICM")) b.push_back(static_cast<std::uint8_t>(c));
  element(b, true, 0x0002, 0x0010, "UI",
          text(explicit_vr ? "1.2.840.10008.1.2.1" : "1.2.840.10008.1.2"));
  element(b, explicit_vr, 0x0028, 0x0002, "US", us(1));
  element(b, explicit_vr, 0x0028, 0x0004, "CS", text(photometric));
  element(b, explicit_vr, 0x0028, 0x0010, "US", us(static_cast<std::uint16_t>(rows)));
  element(b, explicit_vr, 0x0028, 0x0011, "US", us(static_cast<std::uint16_t>(cols)));
  element(b, explicit_vr, 0x0028, 0x0100, "US", us(16));
  element(b, explicit_vr, 0x0028, 0x0101, "US", us(static_cast<std::uint16_t>(bits_stored)));
  element(b, explicit_vr, 0x0028, 0x0103, "US", us(0));
  std::vector<std::uint8_t> data;
  for (std::uint16_t v : px) put16(data, v);
  element(b, explicit_vr, 0x7FE0, 0x0010, "OW", data);
  return b;
}

CxrImage image(const std::string& id, Grid pixels) {
  CxrImage img;
  img.id = id;
  img.pixels = std::move(pixels);
  return img;
}

std::vector<CatalogKey> keys(int covid, int control) {
  std::vector<CatalogKey> out;
  for (int i = 0; i < covid; ++i) out.push_back({"c" + std::to_string(i), Label::kCovid});
  for (int i = 0; i < control; ++i) out.push_back({"n" + std::to_string(i), Label::kControl});
  return out;
}

void check_partition_and_strata(const FoldPlan& plan, std::span<const CatalogKey> catalog) {
  std::map<std::string, Label> label;
  for (const auto& k : catalog) label[k.id] = k.label;
  std::set<std::string> seen;
  std::map<Label, std::vector<int>> per_class;
  for (int f = 0; f < plan.k; ++f) {
    int covid = 0, control = 0;
    for (const auto& id : plan.test_ids(f)) {
      CHECK(seen.insert(id).second);
      (label.at(id) == Label::kCovid ? covid : control)++;
    }
    per_class[Label::kCovid].push_back(covid);
    per_class[Label::kControl].push_back(control);
    CHECK(plan.test_ids(f).size() + plan.train_ids(f).size() == catalog.size());
  }
  CHECK(seen.size() == catalog.size());
  for (const auto& [l, counts] : per_class) {
    CHECK(*std::max_element(counts.begin(), counts.end()) -
              *std::min_element(counts.begin(), counts.end()) <=
          1);
  }
}

Grid ramp(int n) {
  Grid g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = (j + 1) / static_cast<double>(n + 1);
  return g;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("ingest handles empty, corrupt and constant inputs") {
  testutil::TempDir dir("ingest");
  fs::create_directories(dir / "empty");
  CHECK(ingest_source(dir / "empty", Label::kCovid, "s").images.empty());

  fs::create_directories(dir / "src");
  write_file(dir / "src" / "a.png", encode_png_gray8(Grid::Constant(64, 64, 128.0 / 255.0)));
  write_file(dir / "src" / "b.png", encode_png_gray8(Grid::Constant(8, 8, 0.2)));
  std::ofstream(dir / "src" / "c.png") << "not an image";
  Catalog catalog(dir / "catalog.jsonl");
  const IngestResult r = ingest_source(dir / "src", Label::kCovid, "s", &catalog);
  REQUIRE(r.images.size() == 2);
  CHECK(r.errors.size() == 1);
  CHECK(r.images[0].id == "s_a");
  CHECK((r.images[0].pixels - 128.0 / 255.0).abs().maxCoeff() < 1e-12);
  CHECK(r.images[0].pixels(0, 0) == doctest::Approx(0.50196).epsilon(1e-5));
  const auto rows = catalog.load();
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].width == 64);
  CHECK(rows[1].label == Label::kCovid);
  CHECK(parse_catalog_line(catalog_line(rows[0])).sha256 == rows[0].sha256);
  // same ids again conflict with the catalog
  CHECK_THROWS_AS(ingest_source(dir / "src", Label::kCovid, "s", &catalog), ValidationError);
}

TEST_CASE("ingest reports duplicate content") {
  testutil::TempDir dir("dups");
  const auto png = encode_png_gray8(Grid::Constant(8, 8, 0.4));
  write_file(dir / "a.png", png);
  write_file(dir / "b.png", png);
  const IngestResult r = ingest_source(dir.path(), Label::kControl, "x");
  REQUIRE(r.duplicates.size() == 1);
  CHECK(r.duplicates[0] == std::pair<std::string, std::string>{"x_b", "x_a"});
}

TEST_CASE("dicom decoding") {
  const std::vector<std::uint16_t> px = {0, 1000, 2000, 4095, 17, 3000};
  for (bool explicit_vr : {true, false}) {
    const auto bytes = make_dicom(explicit_vr, "MONOCHROME2", 2, 3, px);
    SourceFormat fmt = SourceFormat::kPng;
    const Grid g = raster_to_gray(decode_any(bytes, &fmt));
    CHECK(fmt == SourceFormat::kDicom);
    REQUIRE(g.rows() == 2);
    REQUIRE(g.cols() == 3);
    CHECK(g(0, 1) == doctest::Approx(1000.0 / 4095.0));
    CHECK(g(1, 0) == doctest::Approx(1.0));
  }
  const Grid inv = raster_to_gray(decode_dicom(make_dicom(true, "MONOCHROME1", 2, 3, px)));
  CHECK(inv(0, 0) == doctest::Approx(1.0));
  CHECK(inv(1, 0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(decode_dicom(make_dicom(true, "RGB", 2, 3, px)), ImageDecodeError);
  auto truncated = make_dicom(true, "MONOCHROME2", 2, 3, px);
  truncated.resize(truncated.size() - 4);
  CHECK_THROWS_AS(decode_dicom(truncated), ImageDecodeError);
}

TEST_CASE("resize and normalize") {
  Rng rng(1);
  CxrImage img = image("a", testutil::random_grid(rng, 224, 224));
  CHECK((normalize(img, 224).pixels == img.pixels).all());
  CxrImage flat = image("b", Grid::Constant(448, 448, 0.3));
  CHECK((normalize(flat, 224).pixels - 0.3).abs().maxCoeff() < 1e-15);

  Grid checker(2, 2);
  checker << 0, 1, 1, 0;
  const Grid up = resize_bilinear(checker, 4, 4);
  CHECK(up(0, 0) == 0.0);
  CHECK(up(0, 3) == 1.0);
  CHECK(up(3, 0) == 1.0);
  CHECK(up(3, 3) == 0.0);
  // sample point (1/3, 1/3): 2 * (2/3) * (1/3)
  CHECK(up(1, 1) == doctest::Approx(4.0 / 9.0));
  CHECK(up(1, 2) == doctest::Approx(5.0 / 9.0));
  CHECK_THROWS_AS(normalize(image("c", Grid(0, 0)), 64), ValidationError);
}

TEST_CASE("fold plan sized like the group-I corpus") {
  const auto catalog = keys(2951, 12544);
  const FoldPlan plan = make_folds(catalog, 5, 0.8, 42);
  check_partition_and_strata(plan, catalog);
  std::map<std::string, Label> label;
  for (const auto& k : catalog) label[k.id] = k.label;
  for (int f = 0; f < 5; ++f) {
    int covid = 0, control = 0;
    for (const auto& id : plan.test_ids(f)) (label[id] == Label::kCovid ? covid : control)++;
    CHECK(std::abs(covid - 590) <= 1);
    CHECK(std::abs(control - 2509) <= 1);
  }
}

TEST_CASE("fold plan basics") {
  const auto ten = keys(10, 0);
  const FoldPlan plan = make_folds(ten, 5, 0.8, 3);
  for (int f = 0; f < 5; ++f) CHECK(plan.test_ids(f).size() == 2);
  CHECK(make_folds(ten, 5, 0.8, 3).assignments == plan.assignments);
  CHECK(make_folds(ten, 5, 0.8, 4).assignments != plan.assignments);
  CHECK(fold_plan_from_json(fold_plan_to_json(plan)).assignments == plan.assignments);
  CHECK_THROWS_AS(make_folds(ten, 5, 0.7, 3), ValidationError);
  CHECK_THROWS_AS(make_folds(ten, 1, 0.0, 3), ValidationError);
  // a class smaller than k cannot appear in every test fold
  CHECK_THROWS_AS(make_folds(keys(10, 3), 5, 0.8, 3), ValidationError);

  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const int k = 2 + static_cast<int>(rng.below(5));
    const int control = rng.below(2) ? 0 : static_cast<int>(rng.below(40)) + k;
    const auto cat = keys(static_cast<int>(rng.below(40)) + k, control);
    check_partition_and_strata(make_folds(cat, k, (k - 1.0) / k, rng.next()), cat);
  }
}

TEST_CASE("augmentation") {
  CxrImage img = image("r", ramp(10));
  img.label = Label::kCovid;
  const Augmented id = augment_with(img, nullptr, RigidTransform{});
  CHECK((id.image.pixels == img.pixels).all());

  AugmentParams zero;
  zero.max_shift_fraction = 0.0;
  zero.max_rotation_deg = 0.0;
  Rng rng(3);
  CHECK((augment(img, nullptr, zero, rng).image.pixels == img.pixels).all());

  // one pixel = 10% of the width; the vacated column repeats the edge
  const Augmented shifted = augment_with(img, nullptr, RigidTransform{1.0, 0.0, 0.0});
  for (int i = 0; i < 10; ++i) {
    CHECK(shifted.image.pixels(i, 0) == doctest::Approx(img.pixels(i, 0)));
    for (int j = 1; j < 10; ++j) {
      CHECK(shifted.image.pixels(i, j) == doctest::Approx(img.pixels(i, j - 1)));
    }
  }

  Grid disk = Grid::Zero(16, 16);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      if ((i - 8) * (i - 8) + (j - 5) * (j - 5) < 12) disk(i, j) = 1.0;
  SegMask mask{"r", disk};
  CxrImage big = image("r", Grid::Constant(16, 16, 0.5));
  AugmentParams params;
  for (int t = 0; t < 50; ++t) {
    const Augmented a = augment(big, &mask, params, rng);
    REQUIRE(a.mask);
    CHECK_NOTHROW(check_binary(a.mask->pixels, "mask"));
    CHECK(std::abs(a.transform.rotation_deg) <= 10.0);
    CHECK(std::abs(a.transform.shift_x) <= 1.6 + 1e-12);
  }
}

TEST_CASE("class balancing hits the target") {
  auto make = [](int covid, int control) {
    std::vector<Sample> s;
    for (int i = 0; i < covid + control; ++i) {
      Sample x;
      x.image = image("i" + std::to_string(i), Grid::Constant(4, 4, 0.1 * (i % 7)));
      x.image.label = i < covid ? Label::kCovid : Label::kControl;
      s.push_back(std::move(x));
    }
    return s;
  };
  auto count_covid = [](const std::vector<Sample>& s) {
    return std::count_if(s.begin(), s.end(),
                         [](const Sample& x) { return x.image.label == Label::kCovid; });
  };
  const AugmentParams params;
  const auto group1 = balance_training_set(make(2361, 10035), 10035, params, 1);
  CHECK(count_covid(group1) == 10035);
  const auto group2 = balance_training_set(make(2078, 10000), 10000, params, 1);
  CHECK(count_covid(group2) == 10000);

  const auto same = make(5, 9);
  const auto noop = balance_training_set(same, 5, params, 1);
  REQUIRE(noop.size() == same.size());
  for (std::size_t i = 0; i < same.size(); ++i) CHECK(noop[i].image.id == same[i].image.id);
  CHECK_THROWS_AS(balance_training_set(same, 4, params, 1), ValidationError);
}

TEST_CASE("synthetic corpus is deterministic and round-trips") {
  SynthOptions opts;
  opts.count = 6;
  opts.seed = 7;
  const auto a = synth_corpus(opts);
  const auto b = synth_corpus(opts);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK((a[i].image.pixels == b[i].image.pixels).all());
    REQUIRE(a[i].mask);
    if (a[i].image.label == Label::kControl) CHECK(a[i].mask->pixels.sum() == 0.0);
    if (a[i].image.label == Label::kCovid) CHECK(a[i].mask->pixels.sum() > 0.0);
  }
  testutil::TempDir dir("corpus");
  write_corpus(dir.path(), a);
  const auto back = load_corpus(dir.path());
  REQUIRE(back.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(back[i].image.id == a[i].image.id);
    CHECK((back[i].mask->pixels == a[i].mask->pixels).all());
    CHECK((back[i].image.pixels - a[i].image.pixels).abs().maxCoeff() <= 0.5 / 65535 + 1e-12);
  }
}

}  // TEST_SUITE
