#include "cxrinf/infermap.hpp"

#include <algorithm>
#include <cmath>

#include "cxrinf/image_io.hpp"
#include "json.hpp"

namespace cxrinf::infermap {

namespace {

double clip01(double x) { return std::clamp(x, 0.0, 1.0); }

void check_aligned(const Grid& a, const Grid& b, const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(what + ": shape " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
  }
}

}  // namespace

Rgb jet_colormap(double v) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ValidationError("jet_colormap: value " + std::to_string(v) + " outside [0,1]");
  }
  return {clip01(1.5 - std::abs(4.0 * v - 3.0)), clip01(1.5 - std::abs(4.0 * v - 2.0)),
          clip01(1.5 - std::abs(4.0 * v - 1.0))};
}

Hsv rgb_to_hsv(const Rgb& c) {
  const double mx = std::max({c.r, c.g, c.b});
  const double mn = std::min({c.r, c.g, c.b});
  const double delta = mx - mn;
  Hsv out;
  out.v = mx;
  out.s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) return out;
  double h;
  if (mx == c.r) {
    h = (c.g - c.b) / delta;
    if (h < 0.0) h += 6.0;
  } else if (mx == c.g) {
    h = (c.b - c.r) / delta + 2.0;
  } else {
    h = (c.r - c.g) / delta + 4.0;
  }
  out.h = h / 6.0;
  if (out.h >= 1.0) out.h -= 1.0;
  return out;
}

Rgb hsv_to_rgb(const Hsv& c) {
  if (c.s <= 0.0) return {c.v, c.v, c.v};
  const double h6 = (c.h - std::floor(c.h)) * 6.0;
  const int sector = std::min(5, static_cast<int>(h6));
  const double f = h6 - sector;
  const double p = c.v * (1.0 - c.s);
  const double q = c.v * (1.0 - c.s * f);
  const double t = c.v * (1.0 - c.s * (1.0 - f));
  switch (sector) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
  }
}

InfectionMap render_infection_map(const CxrImage& image, const ProbMask& prob, double tau_vis) {
  if (!(tau_vis >= 0.0 && tau_vis < 1.0)) {
    throw ValidationError("tau_vis must lie in [0,1), got " + std::to_string(tau_vis));
  }
  check_aligned(image.pixels, prob.pixels, "render_infection_map");
  check_unit_range(prob.pixels, "probability map " + prob.image_id);
  InfectionMap out;
  out.image_id = image.id;
  out.visibility_threshold = tau_vis;
  out.r = image.pixels;
  out.g = image.pixels;
  out.b = image.pixels;
  for (Eigen::Index i = 0; i < image.pixels.rows(); ++i) {
    for (Eigen::Index j = 0; j < image.pixels.cols(); ++j) {
      const double p = prob.pixels(i, j);
      if (p <= tau_vis) continue;
      const Hsv colour = rgb_to_hsv(jet_colormap(p));
      const Rgb c = hsv_to_rgb({colour.h, colour.s, image.pixels(i, j)});
      out.r(i, j) = c.r;
      out.g(i, j) = c.g;
      out.b(i, j) = c.b;
    }
  }
  return out;
}

std::size_t positive_pixels(const ProbMask& prob, double threshold) {
  return static_cast<std::size_t>((prob.pixels >= threshold).count());
}

bool detect(const ProbMask& prob, double threshold, std::size_t min_area_px) {
  return positive_pixels(prob, threshold) >= min_area_px;
}

std::vector<PrPoint> pr_curve(std::span<const ProbMask> probs, std::span<const SegMask> gts,
                              std::span<const double> thresholds) {
  if (probs.size() != gts.size()) {
    throw ValidationError("pr_curve: " + std::to_string(probs.size()) + " maps but " +
                          std::to_string(gts.size()) + " masks");
  }
  for (std::size_t i = 0; i < probs.size(); ++i) {
    check_aligned(gts[i].pixels, probs[i].pixels, "pr_curve image " + probs[i].image_id);
  }
  std::vector<PrPoint> out;
  for (double t : thresholds) {
    PrPoint pt;
    pt.threshold = t;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const auto pred = probs[i].pixels >= t;
      const auto truth = gts[i].pixels >= 0.5;
      pt.tp += static_cast<std::uint64_t>((pred && truth).count());
      pt.fp += static_cast<std::uint64_t>((pred && !truth).count());
      pt.fn += static_cast<std::uint64_t>((!pred && truth).count());
    }
    if (pt.tp + pt.fp > 0) pt.precision = static_cast<double>(pt.tp) / (pt.tp + pt.fp);
    if (pt.tp + pt.fn > 0) pt.recall = static_cast<double>(pt.tp) / (pt.tp + pt.fn);
    out.push_back(pt);
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const InfectionMap& map) {
  return encode_png_rgb8(map.r, map.g, map.b);
}

std::string detection_sidecar(const ProbMask& prob, double threshold, std::size_t min_area_px) {
  const std::size_t positive = positive_pixels(prob, threshold);
  nlohmann::json j = {{"id", prob.image_id},
                      {"detected", positive >= min_area_px},
                      {"max_prob", prob.pixels.size() == 0 ? 0.0 : prob.pixels.maxCoeff()},
                      {"positive_px", positive},
                      {"threshold", threshold},
                      {"min_area_px", min_area_px}};
  return j.dump(2);
}

}  // namespace cxrinf::infermap
