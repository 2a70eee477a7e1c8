#include "cxrinf/image_io.hpp"
#include "cxrinf/infermap.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace cxrinf;
using namespace cxrinf::infermap;

namespace {

CxrImage gray(const Grid& g) {
  CxrImage img;
  img.id = "img";
  img.pixels = g;
  return img;
}

}  // namespace

TEST_SUITE("infermap") {

TEST_CASE("jet colormap anchors") {
  const Rgb a = jet_colormap(0.0), b = jet_colormap(0.5), c = jet_colormap(1.0);
  CHECK(a.r == 0.0);
  CHECK(a.g == 0.0);
  CHECK(a.b == 0.5);
  CHECK(b.r == 0.5);
  CHECK(b.g == 1.0);
  CHECK(b.b == 0.5);
  CHECK(c.r == 0.5);
  CHECK(c.g == 0.0);
  CHECK(c.b == 0.0);
  CHECK_THROWS(jet_colormap(1.5));
  CHECK_THROWS(jet_colormap(-0.1));
}

TEST_CASE("hsv conversion") {
  const Hsv red = rgb_to_hsv({1.0, 0.0, 0.0});
  CHECK(red.h == 0.0);
  CHECK(red.s == 1.0);
  CHECK(red.v == 1.0);
  const Hsv g = rgb_to_hsv({0.3, 0.3, 0.3});
  CHECK(g.s == 0.0);
  CHECK(g.v == 0.3);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Rgb c{rng.uniform(), rng.uniform(), rng.uniform()};
    const Rgb back = hsv_to_rgb(rgb_to_hsv(c));
    CHECK(std::abs(back.r - c.r) < 1e-6);
    CHECK(std::abs(back.g - c.g) < 1e-6);
    CHECK(std::abs(back.b - c.b) < 1e-6);
  }
}

TEST_CASE("zero probability leaves the radiograph unchanged") {
  Rng rng(2);
  const CxrImage img = gray(testutil::random_grid(rng, 6, 7));
  const InfectionMap m = render_infection_map(img, ProbMask{"img", Grid::Zero(6, 7)});
  CHECK((m.r == img.pixels).all());
  CHECK((m.g == img.pixels).all());
  CHECK((m.b == img.pixels).all());
}

TEST_CASE("single hot pixel takes the jet hue at the image value") {
  Grid p = Grid::Zero(3, 3);
  p(1, 1) = 1.0;
  const InfectionMap m = render_infection_map(gray(Grid::Constant(3, 3, 0.5)), ProbMask{"img", p});
  // jet(1) = (0.5, 0, 0): hue 0, saturation 1, so value 0.5 gives (0.5, 0, 0)
  CHECK(m.r(1, 1) == doctest::Approx(0.5));
  CHECK(m.g(1, 1) == doctest::Approx(0.0));
  CHECK(m.b(1, 1) == doctest::Approx(0.0));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == 1 && j == 1) continue;
      CHECK(m.r(i, j) == 0.5);
      CHECK(m.g(i, j) == 0.5);
      CHECK(m.b(i, j) == 0.5);
    }
  }
}

TEST_CASE("value channel preserved at displayed pixels") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const CxrImage img = gray(testutil::random_grid(rng, 8, 8));
    const Grid p = testutil::random_grid(rng, 8, 8);
    const InfectionMap m = render_infection_map(img, ProbMask{"img", p});
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        const double v = std::max({m.r(i, j), m.g(i, j), m.b(i, j)});
        CHECK(std::abs(v - img.pixels(i, j)) < 1e-6);
      }
    }
  }
  CHECK_THROWS(render_infection_map(gray(Grid::Zero(4, 4)), ProbMask{"img", Grid::Zero(3, 4)}));
}

TEST_CASE("detection rule") {
  Grid p = Grid::Zero(5, 5);
  CHECK_FALSE(detect(ProbMask{"x", p}));
  p(2, 3) = 0.5;
  CHECK(detect(ProbMask{"x", p}));
  p(2, 3) = 0.499;
  CHECK_FALSE(detect(ProbMask{"x", p}));
  p(0, 0) = p(1, 1) = 0.9;
  CHECK(positive_pixels(ProbMask{"x", p}) == 2);
  CHECK(detect(ProbMask{"x", p}, 0.5, 2));
  CHECK_FALSE(detect(ProbMask{"x", p}, 0.5, 3));
}

TEST_CASE("pr curve against a brute-force recount") {
  Rng rng(4);
  std::vector<ProbMask> probs;
  std::vector<SegMask> gts;
  for (int n = 0; n < 3; ++n) {
    probs.push_back({"i" + std::to_string(n), testutil::random_grid(rng, 8, 8)});
    gts.push_back({"i" + std::to_string(n), testutil::random_binary(rng, 8, 8, 0.3),
                   Provenance::kManual});
  }
  const std::vector<double> thresholds = {0.0, 0.25, 0.5, 0.75, 1.01};
  const auto curve = pr_curve(probs, gts, thresholds);
  REQUIRE(curve.size() == thresholds.size());
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (int n = 0; n < 3; ++n) {
      for (Eigen::Index i = 0; i < 64; ++i) {
        const bool pred = probs[n].pixels.data()[i] >= thresholds[t];
        const bool truth = gts[n].pixels.data()[i] > 0.5;
        tp += pred && truth;
        fp += pred && !truth;
        fn += !pred && truth;
      }
    }
    CHECK(curve[t].tp == tp);
    CHECK(curve[t].fp == fp);
    CHECK(curve[t].fn == fn);
  }
  CHECK(*curve.front().recall == 1.0);
  CHECK(curve.back().tp == 0);
  CHECK(*curve.back().recall == 0.0);
  CHECK_FALSE(curve.back().precision.has_value());
}

TEST_CASE("png and sidecar outputs") {
  Grid p = Grid::Zero(4, 4);
  p(0, 1) = 0.7;
  const InfectionMap m = render_infection_map(gray(Grid::Constant(4, 4, 0.25)), ProbMask{"img", p});
  const Raster r = decode_png(encode_png(m));
  CHECK(r.channels == 3);
  CHECK(r.max_value == 255);
  CHECK(r.samples[0] == quantize8(0.25));
  const auto j = nlohmann::json::parse(detection_sidecar(ProbMask{"img", p}, 0.5, 1));
  CHECK(j["id"] == "img");
  CHECK(j["detected"] == true);
  CHECK(j["positive_px"] == 1);
  CHECK(j["max_prob"].get<double>() == doctest::Approx(0.7));
}

}  // TEST_SUITE
