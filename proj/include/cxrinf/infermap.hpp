#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxrinf/dataset.hpp"

namespace cxrinf::infermap {

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

/// Hexcone HSV with hue in [0, 1).
struct Hsv {
  double h = 0.0, s = 0.0, v = 0.0;
};

/// Piecewise-linear jet: r = clip(1.5 - |4v - 3|), g = clip(1.5 - |4v - 2|),
/// b = clip(1.5 - |4v - 1|).
Rgb jet_colormap(double v);
Hsv rgb_to_hsv(const Rgb& c);
Rgb hsv_to_rgb(const Hsv& c);

inline constexpr double kDefaultVisibility = 0.01;

struct InfectionMap {
  std::string image_id;
  Grid r, g, b;
  double visibility_threshold = kDefaultVisibility;
};

/// Pixels with prob > tau_vis take hue and saturation from the jet colour of
/// the probability and value from the radiograph; all others show the
/// radiograph unchanged.
InfectionMap render_infection_map(const CxrImage& image, const ProbMask& prob,
                                  double tau_vis = kDefaultVisibility);

std::size_t positive_pixels(const ProbMask& prob, double threshold = 0.5);
bool detect(const ProbMask& prob, double threshold = 0.5, std::size_t min_area_px = 1);

struct PrPoint {
  double threshold = 0.0;
  std::optional<double> precision;  // undefined when nothing is predicted
  std::optional<double> recall;     // undefined when there are no positives
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

/// Pixel-level precision/recall at each threshold (prob >= threshold is
/// positive), pooled over all images.
std::vector<PrPoint> pr_curve(std::span<const ProbMask> probs, std::span<const SegMask> gts,
                              std::span<const double> thresholds);

std::vector<std::uint8_t> encode_png(const InfectionMap& map);

/// Sidecar JSON {id, detected, max_prob, positive_px}.
std::string detection_sidecar(const ProbMask& prob, double threshold, std::size_t min_area_px);

}  // namespace cxrinf::infermap
