#pragma once

#include <optional>
#include <string>

#include "cxrinf/autodiff.hpp"
#include "cxrinf/dataset.hpp"
#include "cxrinf/metrics.hpp"
#include "cxrinf/segmodel.hpp"

namespace cxrinf::gradcam {

struct ActivationMap {
  std::string image_id;
  int class_index = 0;
  /// Resized to the input and divided by its maximum (all zero if max is 0).
  Grid values;
  /// ReLU of the weighted feature sum at feature-map resolution, unscaled.
  Grid raw;
  std::string source_layer;
};

/// Channel weights alpha_k = mean over (i, j) of dm/dA^k and the map
/// ReLU(sum_k alpha_k A^k), for a single-sample (1, K, h, w) feature tensor.
Grid weighted_activation(const Tensor& features, const Tensor& gradients);

/// Backpropagates the pre-softmax score `scores[class_index]` to `features`
/// on a graph recorded with GradMode::kAll and returns the raw map.
Grid grad_cam_on_graph(Graph& g, Var features, Var scores, int class_index);

/// Bilinear resize to (rows, cols) followed by max-normalization.
Grid normalize_map(const Grid& raw, int rows, int cols);

ActivationMap grad_cam(seg::ModelHandle& classifier, const CxrImage& image, int class_index,
                       const std::string& layer = seg::kLastConvTap);

struct ExplanationComparison {
  metrics::OverlapStats activation;
  metrics::OverlapStats infection;
  /// infection minus activation; empty when either side is undefined.
  std::optional<double> mass_inside_gain;
  std::optional<double> iou_gain;
};

ExplanationComparison compare_explanations(const ActivationMap& act, const ProbMask& prob,
                                           const SegMask& gt);

std::string comparison_to_json(const ExplanationComparison& c);

}  // namespace cxrinf::gradcam
