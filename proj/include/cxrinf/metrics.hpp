#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxrinf/dataset.hpp"

namespace cxrinf::metrics {

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b);

/// Foreground (infected) pixels are the positive class.
ConfusionMatrix confusion_pixel(const SegMask& gt, const ProbMask& prob, double threshold = 0.5);
ConfusionMatrix confusion_pixel(const Grid& gt, const Grid& prob, double threshold = 0.5);
ConfusionMatrix confusion_sample(std::span<const bool> truth, std::span<const bool> detected);
ConfusionMatrix confusion_sample(std::span<const Label> labels, std::span<const bool> detected);

enum class Level { kPixel, kSample };
std::string to_string(Level l);

inline constexpr double kDefaultZ = 1.96;

/// Metric values are fractions; a metric whose denominator is zero is left
/// empty rather than reported as 0.
struct MetricReport {
  ConfusionMatrix cm;
  Level level = Level::kSample;
  std::uint64_t n = 0;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> precision;
  std::optional<double> accuracy;
  std::map<double, std::optional<double>> fbeta;
  std::map<std::string, std::optional<double>> ci;

  std::optional<double> f1() const;
  std::optional<double> f2() const;
};

std::optional<double> fbeta_score(std::optional<double> precision,
                                  std::optional<double> sensitivity, double beta);

MetricReport compute_metrics(const ConfusionMatrix& cm, std::span<const double> betas,
                             Level level = Level::kSample, double z = kDefaultZ);
MetricReport compute_metrics(const ConfusionMatrix& cm, Level level = Level::kSample,
                             double z = kDefaultZ);

/// r = z * sqrt(metric * (1 - metric) / n)
double confidence_interval(double metric, std::uint64_t n, double z = kDefaultZ);

enum class AggregateMode { kMacroMean, kCumulative };

/// Macro mode averages each metric over the folds where it is defined;
/// cumulative mode sums the confusion matrices and recomputes.
MetricReport aggregate_folds(std::span<const MetricReport> reports, AggregateMode mode,
                             double z = kDefaultZ);

/// Fraction expressed in percent with two decimals, ties to even.
std::string format_percent(double fraction);
std::string format_percent(const std::optional<double>& fraction);

/// Counts, fractions, CI half-widths and formatted percentages.
std::string report_to_json(const MetricReport& r);

struct OverlapStats {
  std::optional<double> mass_inside;
  std::optional<double> iou_at_half;
};

/// mass_inside = sum of the map over GT pixels / total map mass;
/// iou_at_half = IoU of {map >= 0.5} against GT.
OverlapStats map_overlap_stats(const Grid& map, const SegMask& gt);

}  // namespace cxrinf::metrics
