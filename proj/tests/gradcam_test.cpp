#include "cxrinf/gradcam.hpp"
#include "cxrinf/nn.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace cxrinf;
using namespace cxrinf::gradcam;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Toy head on top of a feature map: conv3x3 -> relu -> GAP -> dense(2).
struct ToyHead {
  Tensor w1, b1, w2, b2;

  Var scores(Graph& g, Var a) const {
    Var h = nn::relu(nn::conv2d(a, g.constant(w1), g.constant(b1), 1, 1));
    return nn::linear(nn::global_avg_pool(h), g.constant(w2), g.constant(b2));
  }
  double score(const Tensor& a, int cls) const {
    Graph g(GradMode::kNone);
    return scores(g, g.constant(a))->value.data()[cls];
  }
};

double correlation(const Grid& a, const Grid& b) {
  const double ma = a.mean(), mb = b.mean();
  const double cov = ((a - ma) * (b - mb)).sum();
  return cov / std::sqrt(((a - ma).square().sum()) * ((b - mb).square().sum()));
}

}  // namespace

TEST_SUITE("gradcam") {

TEST_CASE("feature gradients agree with finite differences") {
  Rng rng(1);
  const ToyHead head{random_tensor(rng, {3, 4, 3, 3}), random_tensor(rng, {1, 3, 1, 1}),
                     random_tensor(rng, {2, 3, 1, 1}), random_tensor(rng, {1, 2, 1, 1})};
  const Tensor a = random_tensor(rng, {1, 4, 5, 5}, 0.0, 1.0);
  for (int cls : {0, 1}) {
    Graph g(GradMode::kAll);
    Var av = g.constant(a);
    const Grid raw = grad_cam_on_graph(g, av, head.scores(g, av), cls);
    REQUIRE_FALSE(av->grad.empty());
    Tensor fd(a.shape());
    const double h = 1e-6;
    for (std::size_t i = 0; i < a.size(); ++i) {
      Tensor p = a, m = a;
      p.data()[i] += h;
      m.data()[i] -= h;
      fd.data()[i] = (head.score(p, cls) - head.score(m, cls)) / (2 * h);
      CHECK(testutil::rel_err(av->grad.data()[i], fd.data()[i]) < 1e-3);
    }
    const Grid from_fd = weighted_activation(a, fd);
    CHECK(((raw - from_fd).abs() <= 1e-3 * std::max(1.0, from_fd.abs().maxCoeff())).all());
    CHECK((raw >= 0.0).all());
  }
}

TEST_CASE("weights are channel means of the gradient") {
  Tensor a(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 10, 10, 10, 10});
  Tensor d(Shape{1, 2, 2, 2}, {1, 1, 1, 1, -0.1, -0.1, 0.1, 0.3});
  // alpha = (1, 0.05): map = a0 + 0.05 * 10
  const Grid m = weighted_activation(a, d);
  CHECK(m(0, 0) == doctest::Approx(1.5));
  CHECK(m(1, 1) == doctest::Approx(4.5));
  CHECK_THROWS(weighted_activation(Tensor(Shape{2, 2, 2, 2}), Tensor(Shape{2, 2, 2, 2})));
}

TEST_CASE("linear model recovers the single active feature map") {
  Rng rng(2);
  const Tensor a = random_tensor(rng, {1, 5, 6, 6}, 0.0, 1.0);
  // score_1 = mean(A^1) exactly; every other channel carries zero weight
  Tensor w(Shape{2, 5, 1, 1});
  w.at(1, 1, 0, 0) = 1.0;
  w.at(0, 3, 0, 0) = 1.0;
  Graph g(GradMode::kAll);
  Var av = g.constant(a);
  Var s = nn::linear(nn::global_avg_pool(av), g.constant(w), g.constant(Tensor(Shape{1, 2, 1, 1})));
  const Grid raw = grad_cam_on_graph(g, av, s, 1);
  const Grid a1 = a.plane(0, 1);
  CHECK(correlation(raw, a1) > 0.999);
  CHECK(((raw - a1 / 36.0).abs() < 1e-12).all());
}

TEST_CASE("negatively weighted evidence gives an all-zero map") {
  Rng rng(3);
  const Tensor a = random_tensor(rng, {1, 3, 4, 4}, 0.1, 1.0);
  Tensor w(Shape{1, 3, 1, 1}, -1.0);
  Graph g(GradMode::kAll);
  Var av = g.constant(a);
  Var s = nn::linear(nn::global_avg_pool(av), g.constant(w), g.constant(Tensor(Shape{1, 1, 1, 1})));
  CHECK((grad_cam_on_graph(g, av, s, 0) == 0.0).all());
  CHECK((normalize_map(Grid::Zero(4, 4), 8, 8) == 0.0).all());
}

TEST_CASE("grad-cam on a classifier") {
  Rng rng(4);
  seg::ModelHandle m = seg::build_classifier(seg::EncoderKind::kResNet50, std::nullopt,
                                             seg::Scale::kDesk, 64, 3);
  CxrImage img;
  img.id = "a";
  img.pixels = testutil::random_grid(rng, 80, 72);
  const ActivationMap act = grad_cam(m, img, 1);
  CHECK(act.values.rows() == 80);
  CHECK(act.values.cols() == 72);
  CHECK(act.values.minCoeff() >= 0.0);
  const double mx = act.values.maxCoeff();
  CHECK((mx == 0.0 || mx == doctest::Approx(1.0)));
  CHECK(act.source_layer == seg::kLastConvTap);
  CHECK(grad_cam(m, img, 1, "encoder/level2").values.rows() == 80);
  CHECK_THROWS_AS(grad_cam(m, img, 1, "nope"), ValidationError);
  CHECK_THROWS_AS(grad_cam(m, img, 2), ValidationError);
  seg::ModelHandle segm = seg::build_segmentation_model({});
  CHECK_THROWS_AS(grad_cam(segm, img, 1), ValidationError);
}

TEST_CASE("explanation comparison") {
  Grid gt = Grid::Zero(4, 4);
  gt.block(0, 0, 2, 2) = 1.0;
  const SegMask mask{"x", gt, Provenance::kCollaborative};
  ActivationMap same;
  same.image_id = "x";
  same.values = gt;
  const ExplanationComparison eq = compare_explanations(same, ProbMask{"x", gt}, mask);
  CHECK(*eq.mass_inside_gain == 0.0);
  CHECK(*eq.iou_gain == 0.0);

  ActivationMap uniform = same;
  uniform.values = Grid::Constant(4, 4, 0.5);
  const ExplanationComparison c = compare_explanations(uniform, ProbMask{"x", gt}, mask);
  CHECK(*c.activation.mass_inside == doctest::Approx(0.25));
  CHECK(*c.infection.mass_inside == 1.0);
  CHECK(*c.mass_inside_gain == doctest::Approx(0.75));
  // uniform 0.5 is foreground everywhere: IoU = 4 / 16
  CHECK(*c.activation.iou_at_half == doctest::Approx(0.25));
  CHECK(*c.iou_gain == doctest::Approx(0.75));
  const auto j = nlohmann::json::parse(comparison_to_json(c));
  CHECK(j["mass_inside_gain"].get<double>() == doctest::Approx(0.75));
}

}  // TEST_SUITE
