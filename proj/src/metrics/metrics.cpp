#include "cxrinf/metrics.hpp"

#include <cfenv>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "json.hpp"

namespace cxrinf::metrics {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  tp += o.tp;
  tn += o.tn;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }

ConfusionMatrix confusion_pixel(const Grid& gt, const Grid& prob, double threshold) {
  if (gt.rows() != prob.rows() || gt.cols() != prob.cols()) {
    throw ValidationError("confusion_pixel: mask and prediction shapes differ");
  }
  check_binary(gt, "ground-truth mask");
  const auto pred = prob >= threshold;
  const auto truth = gt >= 0.5;
  ConfusionMatrix cm;
  cm.tp = static_cast<std::uint64_t>((pred && truth).count());
  cm.fp = static_cast<std::uint64_t>((pred && !truth).count());
  cm.fn = static_cast<std::uint64_t>((!pred && truth).count());
  cm.tn = static_cast<std::uint64_t>(gt.size()) - cm.tp - cm.fp - cm.fn;
  return cm;
}

ConfusionMatrix confusion_pixel(const SegMask& gt, const ProbMask& prob, double threshold) {
  return confusion_pixel(gt.pixels, prob.pixels, threshold);
}

ConfusionMatrix confusion_sample(std::span<const bool> truth, std::span<const bool> detected) {
  if (truth.size() != detected.size()) {
    throw ValidationError("confusion_sample: " + std::to_string(truth.size()) + " labels but " +
                          std::to_string(detected.size()) + " detections");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i]) {
      (detected[i] ? cm.tp : cm.fn) += 1;
    } else {
      (detected[i] ? cm.fp : cm.tn) += 1;
    }
  }
  return cm;
}

ConfusionMatrix confusion_sample(std::span<const Label> labels, std::span<const bool> detected) {
  const auto truth = std::make_unique<bool[]>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) truth[i] = labels[i] == Label::kCovid;
  return confusion_sample(std::span<const bool>(truth.get(), labels.size()), detected);
}

std::string to_string(Level l) { return l == Level::kPixel ? "pixel" : "sample"; }

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string beta_key(double beta) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "f%g", beta);
  return buf;
}

void fill_ci(MetricReport& r, double z) {
  auto put = [&](const std::string& name, const std::optional<double>& m) {
    if (m && r.n > 0) {
      r.ci[name] = confidence_interval(*m, r.n, z);
    } else {
      r.ci[name] = std::nullopt;
    }
  };
  put("sensitivity", r.sensitivity);
  put("specificity", r.specificity);
  put("precision", r.precision);
  put("accuracy", r.accuracy);
  for (const auto& [beta, v] : r.fbeta) put(beta_key(beta), v);
}

}  // namespace

std::optional<double> MetricReport::f1() const {
  auto it = fbeta.find(1.0);
  return it == fbeta.end() ? std::nullopt : it->second;
}

std::optional<double> MetricReport::f2() const {
  auto it = fbeta.find(2.0);
  return it == fbeta.end() ? std::nullopt : it->second;
}

std::optional<double> fbeta_score(std::optional<double> precision,
                                  std::optional<double> sensitivity, double beta) {
  if (!precision || !sensitivity) return std::nullopt;
  const double b2 = beta * beta;
  const double den = b2 * *precision + *sensitivity;
  if (den <= 0.0) return std::nullopt;
  return (1.0 + b2) * *precision * *sensitivity / den;
}

double confidence_interval(double metric, std::uint64_t n, double z) {
  if (!(metric >= 0.0 && metric <= 1.0)) {
    throw ValidationError("confidence_interval: metric " + std::to_string(metric) +
                          " outside [0,1]");
  }
  if (n == 0) throw ValidationError("confidence_interval: n must be > 0");
  return z * std::sqrt(metric * (1.0 - metric) / static_cast<double>(n));
}

MetricReport compute_metrics(const ConfusionMatrix& cm, std::span<const double> betas,
                             Level level, double z) {
  MetricReport r;
  r.cm = cm;
  r.level = level;
  r.n = cm.total();
  r.sensitivity = ratio(cm.tp, cm.tp + cm.fn);
  r.specificity = ratio(cm.tn, cm.tn + cm.fp);
  r.precision = ratio(cm.tp, cm.tp + cm.fp);
  r.accuracy = ratio(cm.tp + cm.tn, cm.total());
  for (double b : betas) {
    if (!(b > 0.0)) throw ValidationError("F-score beta must be > 0");
    r.fbeta[b] = fbeta_score(r.precision, r.sensitivity, b);
  }
  fill_ci(r, z);
  return r;
}

MetricReport compute_metrics(const ConfusionMatrix& cm, Level level, double z) {
  const double betas[] = {1.0, 2.0};
  return compute_metrics(cm, betas, level, z);
}

MetricReport aggregate_folds(std::span<const MetricReport> reports, AggregateMode mode,
                             double z) {
  if (reports.empty()) throw ValidationError("aggregate_folds: no reports");
  std::vector<double> betas;
  for (const auto& [b, v] : reports.front().fbeta) betas.push_back(b);
  ConfusionMatrix total;
  for (const MetricReport& r : reports) total += r.cm;
  MetricReport out = compute_metrics(total, betas, reports.front().level, z);
  if (mode == AggregateMode::kCumulative) return out;

  auto mean_of = [&](auto getter) -> std::optional<double> {
    double sum = 0.0;
    int count = 0;
    for (const MetricReport& r : reports) {
      const std::optional<double> v = getter(r);
      if (v) {
        sum += *v;
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return sum / count;
  };
  out.sensitivity = mean_of([](const MetricReport& r) { return r.sensitivity; });
  out.specificity = mean_of([](const MetricReport& r) { return r.specificity; });
  out.precision = mean_of([](const MetricReport& r) { return r.precision; });
  out.accuracy = mean_of([](const MetricReport& r) { return r.accuracy; });
  for (double b : betas) {
    out.fbeta[b] = mean_of([b](const MetricReport& r) {
      auto it = r.fbeta.find(b);
      return it == r.fbeta.end() ? std::optional<double>() : it->second;
    });
  }
  out.ci.clear();
  fill_ci(out, z);
  return out;
}

std::string format_percent(double fraction) {
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double hundredths = std::nearbyint(fraction * 10000.0);
  std::fesetround(saved);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", hundredths / 100.0);
  return buf;
}

std::string format_percent(const std::optional<double>& fraction) {
  return fraction ? format_percent(*fraction) : "undefined";
}

std::string report_to_json(const MetricReport& r) {
  using nlohmann::json;
  auto val = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json metrics = {{"sensitivity", val(r.sensitivity)},
                  {"specificity", val(r.specificity)},
                  {"precision", val(r.precision)},
                  {"accuracy", val(r.accuracy)}};
  json percent = {{"sensitivity", format_percent(r.sensitivity)},
                  {"specificity", format_percent(r.specificity)},
                  {"precision", format_percent(r.precision)},
                  {"accuracy", format_percent(r.accuracy)}};
  for (const auto& [b, v] : r.fbeta) {
    metrics[beta_key(b)] = val(v);
    percent[beta_key(b)] = format_percent(v);
  }
  json ci = json::object();
  for (const auto& [k, v] : r.ci) ci[k] = val(v);
  json j = {{"level", to_string(r.level)},
            {"n", r.n},
            {"confusion", {{"tp", r.cm.tp}, {"tn", r.cm.tn}, {"fp", r.cm.fp}, {"fn", r.cm.fn}}},
            {"metrics", metrics},
            {"ci", ci},
            {"percent", percent}};
  return j.dump(2);
}

OverlapStats map_overlap_stats(const Grid& map, const SegMask& gt) {
  if (map.rows() != gt.pixels.rows() || map.cols() != gt.pixels.cols()) {
    throw ValidationError("map_overlap_stats: map and mask shapes differ");
  }
  check_unit_range(map, "map");
  check_binary(gt.pixels, "ground-truth mask");
  OverlapStats s;
  const double mass = map.sum();
  if (mass > 0.0) s.mass_inside = (map * gt.pixels).sum() / mass;
  const auto pred = map >= 0.5;
  const auto truth = gt.pixels >= 0.5;
  const auto inter = (pred && truth).count();
  const auto uni = (pred || truth).count();
  if (uni > 0) s.iou_at_half = static_cast<double>(inter) / static_cast<double>(uni);
  return s;
}

}  // namespace cxrinf::metrics
