#include <cmath>

#include "cxrinf/dataset.hpp"
#include "cxrinf/losses.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cxrinf;
using namespace cxrinf::losses;

namespace {

// Scalar loop oracle, written independently of the vectorized code.
double oracle_hybrid(const Grid& p, const Grid& q, double alpha, double gamma, double eps) {
  double focal_sum = 0.0, inter = 0.0, sp = 0.0, sq = 0.0;
  for (int i = 0; i < p.rows(); ++i) {
    for (int j = 0; j < p.cols(); ++j) {
      const double pi = p(i, j);
      double qi = q(i, j);
      if (qi < 1e-7) qi = 1e-7;
      if (qi > 1.0 - 1e-7) qi = 1.0 - 1e-7;
      focal_sum += -alpha * std::pow(1.0 - qi, gamma) * pi * std::log(qi);
      focal_sum += -(1.0 - alpha) * std::pow(qi, gamma) * (1.0 - pi) * std::log(1.0 - qi);
      inter += pi * q(i, j);
      sp += pi;
      sq += q(i, j);
    }
  }
  return focal_sum / static_cast<double>(p.size()) + 1.0 - (2.0 * inter + eps) / (sp + sq + eps);
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("cross entropy hand values") {
  CHECK(cross_entropy(1.0, 1.0 - kProbFloor) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(cross_entropy(1.0, 0.5) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(cross_entropy(0.0, 0.5) == doctest::Approx(0.693147).epsilon(1e-6));
  // clamping keeps log finite at the extremes
  CHECK(std::isfinite(cross_entropy(1.0, 0.0)));
  CHECK(std::isfinite(cross_entropy(0.0, 1.0)));
}

TEST_CASE("balanced cross entropy") {
  CHECK(balanced_cross_entropy(1.0, 0.5, 0.25) == doctest::Approx(0.173287).epsilon(1e-5));
  CHECK(balanced_cross_entropy(0.0, 0.5, 0.25) == doctest::Approx(0.519860).epsilon(1e-5));
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const double p = rng.uniform(), q = rng.uniform();
    CHECK(balanced_cross_entropy(p, q, 0.5) == doctest::Approx(0.5 * cross_entropy(p, q)));
  }
}

TEST_CASE("focal loss") {
  CHECK(focal(1.0, 0.5, 0.25, 2.0) == doctest::Approx(0.043322).epsilon(1e-5));
  CHECK(focal(1.0, 0.999999, 0.25, 2.0) < 1e-12);
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const double p = rng.uniform(), q = rng.uniform(), a = rng.uniform();
    CHECK(std::abs(focal(p, q, a, 0.0) - balanced_cross_entropy(p, q, a)) < 1e-12);
  }
}

TEST_CASE("focal derivative matches central differences") {
  Rng rng(13);
  const double h = 1e-6;
  for (int i = 0; i < 500; ++i) {
    const double p = rng.uniform(), q = rng.uniform(0.01, 0.99);
    const double a = rng.uniform(), g = rng.uniform(0.0, 3.0);
    const double fd = (focal(p, q + h, a, g) - focal(p, q - h, a, g)) / (2 * h);
    CHECK(testutil::rel_err(focal_derivative(p, q, a, g), fd) < 1e-5);
  }
}

TEST_CASE("dice coefficient") {
  Grid a = Grid::Zero(4, 4);
  a(1, 1) = a(2, 2) = 1.0;
  CHECK(dice_coefficient(a, a) == doctest::Approx(1.0).epsilon(1e-5));
  Grid b = Grid::Zero(4, 4);
  b(0, 3) = 1.0;
  CHECK(dice_coefficient(a, b) < 1e-5);

  Grid y = Grid::Zero(3, 3), yhat = Grid::Zero(3, 3);
  y(0, 0) = 1.0;
  yhat(0, 0) = yhat(1, 1) = 1.0;
  CHECK(dice_coefficient(y, yhat, 0.0) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(dice_coefficient(y, Grid::Constant(3, 3, 0.3)), ValidationError);
  CHECK_THROWS_AS(dice_coefficient(y, Grid::Zero(2, 3)), ValidationError);
}

TEST_CASE("dice loss") {
  Grid p = Grid::Zero(2, 2), q = Grid::Zero(2, 2);
  p(0, 0) = 1.0;
  q(0, 0) = q(0, 1) = 0.5;
  CHECK(dice_loss(p, q, 0.0) == doctest::Approx(0.5));
  CHECK(dice_loss(p, p) == doctest::Approx(0.0));
  CHECK(dice_loss(Grid::Zero(3, 3), Grid::Zero(3, 3)) == doctest::Approx(0.0));
}

TEST_CASE("hybrid loss equals its parts and a scalar oracle") {
  LossParams params;
  Rng rng(14);
  for (int t = 0; t < 100; ++t) {
    const Grid p = testutil::random_binary(rng, 3, 3);
    const Grid q = testutil::random_grid(rng, 3, 3);
    const double v = hybrid_loss(p, q, params);
    CHECK(v == doctest::Approx(focal_mean(p, q, params) + dice_loss(p, q, params.epsilon)));
    CHECK(std::abs(v - oracle_hybrid(p, q, 0.25, 2.0, 1e-6)) < 1e-10);
  }
  Grid perfect = Grid::Zero(4, 4);
  perfect(1, 2) = 1.0;
  CHECK(hybrid_loss(perfect, perfect, params) < 1e-5);
}

TEST_CASE("hybrid gradient matches central differences") {
  LossParams params;
  Rng rng(15);
  const double h = 1e-4;
  for (int t = 0; t < 20; ++t) {
    const Grid p = testutil::random_binary(rng, 5, 5);
    const Grid q = testutil::random_grid(rng, 5, 5, 0.02, 0.98);
    const FieldLoss fl = hybrid_loss_with_grad(p, q, params);
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      Grid qp = q, qm = q;
      qp.data()[i] += h;
      qm.data()[i] -= h;
      const double fd = (hybrid_loss(p, qp, params) - hybrid_loss(p, qm, params)) / (2 * h);
      CHECK(testutil::rel_err(fl.grad.data()[i], fd) < 1e-4);
    }
  }
}

TEST_CASE("batch loss averages per-image losses") {
  LossParams params;
  Rng rng(16);
  std::vector<Grid> ps, qs;
  double expect = 0.0;
  for (int n = 0; n < 3; ++n) {
    ps.push_back(testutil::random_binary(rng, 4, 4));
    qs.push_back(testutil::random_grid(rng, 4, 4));
    expect += hybrid_loss(ps.back(), qs.back(), params) / 3.0;
  }
  const BatchLoss bl = hybrid_loss_batch(stack_planes(ps), stack_planes(qs), params);
  CHECK(bl.value == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("categorical cross entropy") {
  Tensor logits(Shape{2, 2, 1, 1}, {0.0, 0.0, 2.0, -1.0});
  const std::vector<int> targets = {1, 0};
  const BatchLoss l = categorical_cross_entropy(logits, targets);
  const double p0 = std::exp(2.0) / (std::exp(2.0) + std::exp(-1.0));
  CHECK(l.value == doctest::Approx((std::log(2.0) - std::log(p0)) / 2.0));
  const std::vector<int> bad = {2, 0};
  CHECK_THROWS_AS(categorical_cross_entropy(logits, bad), ValidationError);
}

TEST_CASE("loss parameter validation") {
  LossParams p;
  p.alpha = 1.5;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = {};
  p.gamma = -1.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = {};
  CHECK_NOTHROW(p.validate());
}

}  // TEST_SUITE
