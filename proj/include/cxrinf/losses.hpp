#pragma once

#include <span>

#include "cxrinf/dataset.hpp"
#include "cxrinf/tensor.hpp"

namespace cxrinf::losses {

/// Predicted probabilities are clamped to [kProbFloor, 1 - kProbFloor] before
/// any logarithm is taken.
inline constexpr double kProbFloor = 1e-7;

enum class Reduction { kMean };

struct LossParams {
  double alpha = 0.25;
  double gamma = 2.0;
  double epsilon = 1e-6;  // dice smoothing
  Reduction reduction = Reduction::kMean;

  void validate() const;
};

double clamp_prob(double q);

double cross_entropy(double p, double q);
double balanced_cross_entropy(double p, double q, double alpha);
double focal(double p, double q, double alpha, double gamma);
/// d focal / d q; zero where q is clamped.
double focal_derivative(double p, double q, double alpha, double gamma);

/// (2|Y ∩ Ŷ| + eps) / (|Y| + |Ŷ| + eps) on binary masks.
double dice_coefficient(const Grid& y, const Grid& pred, double epsilon = 1e-6);
double dice_coefficient(const SegMask& y, const SegMask& pred, double epsilon = 1e-6);

/// 1 - (2 Σ p q + eps) / (Σ p + Σ q + eps)
double dice_loss(const Grid& p, const Grid& q, double epsilon = 1e-6);
double focal_mean(const Grid& p, const Grid& q, const LossParams& params);
/// Mean per-pixel focal loss plus dice loss, each with weight 1.
double hybrid_loss(const Grid& p, const Grid& q, const LossParams& params);

struct FieldLoss {
  double value = 0.0;
  Grid grad;  // d loss / d q
};

FieldLoss hybrid_loss_with_grad(const Grid& p, const Grid& q, const LossParams& params);

struct BatchLoss {
  double value = 0.0;
  Tensor grad;
};

/// Hybrid loss averaged over the images of an (N,1,H,W) batch.
BatchLoss hybrid_loss_batch(const Tensor& targets, const Tensor& probs, const LossParams& params);

/// Softmax cross-entropy on (N,C,1,1) logits, averaged over the batch; the
/// gradient is with respect to the logits.
BatchLoss categorical_cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace cxrinf::losses
