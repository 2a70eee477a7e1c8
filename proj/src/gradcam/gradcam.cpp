#include "cxrinf/gradcam.hpp"

#include <algorithm>

#include "json.hpp"

namespace cxrinf::gradcam {

Grid weighted_activation(const Tensor& features, const Tensor& gradients) {
  const Shape s = features.shape();
  if (s.n != 1) throw ValidationError("grad-cam expects a single sample");
  if (!(gradients.shape() == s)) throw ValidationError("feature/gradient shapes differ");
  const double z = static_cast<double>(s.plane());
  Grid sum = Grid::Zero(s.h, s.w);
  for (int k = 0; k < s.c; ++k) {
    const Grid dk = gradients.plane(0, k);
    const double alpha = dk.sum() / z;
    if (alpha != 0.0) sum += alpha * features.plane(0, k);
  }
  return sum.max(0.0);
}

Grid grad_cam_on_graph(Graph& g, Var features, Var scores, int class_index) {
  if (g.mode() != GradMode::kAll) {
    throw std::logic_error("grad-cam needs a graph recorded with GradMode::kAll");
  }
  const Shape ss = scores->value.shape();
  if (ss.n != 1 || class_index < 0 || class_index >= ss.c * ss.h * ss.w) {
    throw ValidationError("class index " + std::to_string(class_index) + " out of range");
  }
  Tensor seed(ss);
  seed.data()[class_index] = 1.0;
  g.backward(scores, seed);
  const Tensor grads = features->grad.empty() ? Tensor(features->value.shape()) : features->grad;
  return weighted_activation(features->value, grads);
}

Grid normalize_map(const Grid& raw, int rows, int cols) {
  Grid out = resize_bilinear(raw, rows, cols).max(0.0);
  const double mx = out.size() == 0 ? 0.0 : out.maxCoeff();
  if (mx > 0.0) {
    out /= mx;
  } else {
    out.setZero();
  }
  return out;
}

ActivationMap grad_cam(seg::ModelHandle& classifier, const CxrImage& image, int class_index,
                       const std::string& layer) {
  if (classifier.head() != seg::HeadKind::kClassifier2Way) {
    throw ValidationError("grad-cam requires a classifier model");
  }
  if (class_index < 0 || class_index > 1) {
    throw ValidationError("class index must be 0 or 1, got " + std::to_string(class_index));
  }
  const int s = classifier.config().input_size;
  const Grid x = (image.height() == s && image.width() == s)
                     ? image.pixels
                     : resize_bilinear(image.pixels, s, s);
  Graph g(GradMode::kAll);
  Var scores = classifier.forward(g, stack_planes(std::span<const Grid>(&x, 1)));
  Var features = g.tap(layer);
  if (features == nullptr) {
    std::string names;
    for (const std::string& n : g.tap_names()) names += (names.empty() ? "" : ", ") + n;
    throw ValidationError("unknown layer '" + layer + "'; available: " + names);
  }
  ActivationMap out;
  out.image_id = image.id;
  out.class_index = class_index;
  out.source_layer = layer;
  out.raw = grad_cam_on_graph(g, features, scores, class_index);
  out.values = normalize_map(out.raw, image.height(), image.width());
  return out;
}

ExplanationComparison compare_explanations(const ActivationMap& act, const ProbMask& prob,
                                           const SegMask& gt) {
  ExplanationComparison c;
  c.activation = metrics::map_overlap_stats(act.values, gt);
  c.infection = metrics::map_overlap_stats(prob.pixels, gt);
  if (c.activation.mass_inside && c.infection.mass_inside) {
    c.mass_inside_gain = *c.infection.mass_inside - *c.activation.mass_inside;
  }
  if (c.activation.iou_at_half && c.infection.iou_at_half) {
    c.iou_gain = *c.infection.iou_at_half - *c.activation.iou_at_half;
  }
  return c;
}

std::string comparison_to_json(const ExplanationComparison& c) {
  using nlohmann::json;
  auto val = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  auto stats = [&](const metrics::OverlapStats& s) {
    return json{{"mass_inside", val(s.mass_inside)}, {"iou_at_half", val(s.iou_at_half)}};
  };
  return json{{"activation_map", stats(c.activation)},
              {"infection_map", stats(c.infection)},
              {"mass_inside_gain", val(c.mass_inside_gain)},
              {"iou_gain", val(c.iou_gain)}}
      .dump(2);
}

}  // namespace cxrinf::gradcam
