#include "cxrinf/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cxrinf/nn.hpp"

namespace cxrinf::losses {
namespace {

void check_same_shape(const Grid& a, const Grid& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) +
                          "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                          "x" + std::to_string(b.cols()) + ")");
  }
}

}  // namespace

void LossParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("loss: alpha must be in [0,1]");
  if (!(gamma >= 0.0)) throw ValidationError("loss: gamma must be >= 0");
  if (!(epsilon > 0.0)) throw ValidationError("loss: epsilon must be > 0");
}

double clamp_prob(double q) { return std::clamp(q, kProbFloor, 1.0 - kProbFloor); }

double cross_entropy(double p, double q) {
  q = clamp_prob(q);
  return -p * std::log(q) - (1.0 - p) * std::log(1.0 - q);
}

double balanced_cross_entropy(double p, double q, double alpha) {
  q = clamp_prob(q);
  return -alpha * p * std::log(q) - (1.0 - alpha) * (1.0 - p) * std::log(1.0 - q);
}

double focal(double p, double q, double alpha, double gamma) {
  q = clamp_prob(q);
  return -alpha * std::pow(1.0 - q, gamma) * p * std::log(q) -
         (1.0 - alpha) * std::pow(q, gamma) * (1.0 - p) * std::log(1.0 - q);
}

double focal_derivative(double p, double q, double alpha, double gamma) {
  if (q < kProbFloor || q > 1.0 - kProbFloor) return 0.0;
  const double lq = std::log(q);
  const double l1q = std::log(1.0 - q);
  // gamma * x^(gamma-1) vanishes identically at gamma = 0.
  const double d_pos = gamma == 0.0 ? 0.0 : gamma * std::pow(1.0 - q, gamma - 1.0);
  const double d_neg = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
  const double pos = -alpha * p * (-d_pos * lq + std::pow(1.0 - q, gamma) / q);
  const double neg = -(1.0 - alpha) * (1.0 - p) * (d_neg * l1q - std::pow(q, gamma) / (1.0 - q));
  return pos + neg;
}

double dice_coefficient(const Grid& y, const Grid& pred, double epsilon) {
  check_same_shape(y, pred, "dice_coefficient");
  check_binary(y, "dice_coefficient(y)");
  check_binary(pred, "dice_coefficient(pred)");
  const double inter = (y * pred).sum();
  return (2.0 * inter + epsilon) / (y.sum() + pred.sum() + epsilon);
}

double dice_coefficient(const SegMask& y, const SegMask& pred, double epsilon) {
  return dice_coefficient(y.pixels, pred.pixels, epsilon);
}

double dice_loss(const Grid& p, const Grid& q, double epsilon) {
  check_same_shape(p, q, "dice_loss");
  return 1.0 - (2.0 * (p * q).sum() + epsilon) / (p.sum() + q.sum() + epsilon);
}

double focal_mean(const Grid& p, const Grid& q, const LossParams& params) {
  check_same_shape(p, q, "focal_mean");
  const Grid qc = q.cwiseMax(kProbFloor).cwiseMin(1.0 - kProbFloor);
  const Grid terms = -params.alpha * (1.0 - qc).pow(params.gamma) * p * qc.log() -
                     (1.0 - params.alpha) * qc.pow(params.gamma) * (1.0 - p) * (1.0 - qc).log();
  return terms.mean();
}

double hybrid_loss(const Grid& p, const Grid& q, const LossParams& params) {
  return focal_mean(p, q, params) + dice_loss(p, q, params.epsilon);
}

FieldLoss hybrid_loss_with_grad(const Grid& p, const Grid& q, const LossParams& params) {
  check_same_shape(p, q, "hybrid_loss");
  FieldLoss out;
  out.value = hybrid_loss(p, q, params);
  const double n = static_cast<double>(p.size());
  const double sp = p.sum();
  const double sq = q.sum();
  const double spq = (p * q).sum();
  const double denom = sp + sq + params.epsilon;
  const double numer = 2.0 * spq + params.epsilon;
  out.grad.resize(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = p.data()[i];
    const double qi = q.data()[i];
    const double d_focal = focal_derivative(pi, qi, params.alpha, params.gamma) / n;
    const double d_dice = -(2.0 * pi * denom - numer) / (denom * denom);
    out.grad.data()[i] = d_focal + d_dice;
  }
  return out;
}

BatchLoss hybrid_loss_batch(const Tensor& targets, const Tensor& probs, const LossParams& params) {
  const Shape s = probs.shape();
  if (!(targets.shape() == s) || s.c != 1) {
    throw ValidationError("hybrid_loss_batch: expected matching (N,1,H,W) tensors, got " +
                          targets.shape().str() + " and " + s.str());
  }
  BatchLoss out;
  out.grad = Tensor(s);
  for (int n = 0; n < s.n; ++n) {
    FieldLoss fl = hybrid_loss_with_grad(targets.plane(n, 0), probs.plane(n, 0), params);
    out.value += fl.value / s.n;
    out.grad.set_plane(n, 0, fl.grad / static_cast<double>(s.n));
  }
  return out;
}

BatchLoss categorical_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const Shape s = logits.shape();
  const int classes = s.c * s.h * s.w;
  if (static_cast<int>(targets.size()) != s.n) {
    throw ValidationError("categorical_cross_entropy: target count mismatch");
  }
  const Tensor probs = nn::softmax(logits);
  BatchLoss out;
  out.grad = probs;
  for (int n = 0; n < s.n; ++n) {
    const int t = targets[static_cast<std::size_t>(n)];
    if (t < 0 || t >= classes) throw ValidationError("categorical_cross_entropy: bad target");
    const double pt = std::max(probs.data()[static_cast<std::size_t>(n) * classes + t], kProbFloor);
    out.value -= std::log(pt) / s.n;
    out.grad.data()[static_cast<std::size_t>(n) * classes + t] -= 1.0;
  }
  for (double& g : out.grad.values()) g /= s.n;
  return out;
}

}  // namespace cxrinf::losses
