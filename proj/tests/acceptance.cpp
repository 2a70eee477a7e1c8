// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "cxrinf/annotate.hpp"
#include "cxrinf/gradcam.hpp"
#include "cxrinf/image_io.hpp"
#include "cxrinf/infermap.hpp"
#include "cxrinf/losses.hpp"
#include "cxrinf/metrics.hpp"
#include "cxrinf/nn.hpp"
#include "cxrinf/trainer.hpp"
#include "test_util.hpp"

using namespace cxrinf;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "failed: ";
      else detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

double round2(double percent) { return std::round(percent * 100.0) / 100.0; }

void check_row(Outcome& out, const metrics::ConfusionMatrix& cm, const std::array<double, 6>& expected) {
  const metrics::MetricReport r = metrics::compute_metrics(cm);
  const std::array<std::optional<double>, 6> got{r.sensitivity, r.specificity, r.precision,
                                                 r.f1(),        r.f2(),          r.accuracy};
  const char* names[] = {"sensitivity", "specificity", "precision", "f1", "f2", "accuracy"};
  std::ostringstream row;
  for (int i = 0; i < 6; ++i) {
    out.require(got[i].has_value(), std::string(names[i]) + " undefined");
    if (!got[i]) continue;
    const double pct = round2(*got[i] * 100.0);
    row << (i ? " / " : "") << metrics::format_percent(*got[i]);
    out.require(std::abs(pct - expected[i]) <= 0.02 + 1e-9,
                std::string(names[i]) + " " + std::to_string(pct));
  }
  if (out.pass) out.detail << row.str();
}

Outcome group_one() {
  Outcome out;
  check_row(out, {.tp = 2903, .tn = 12300, .fp = 244, .fn = 48},
            {98.37, 98.05, 92.25, 95.21, 97.08, 98.12});
  return out;
}

Outcome group_two() {
  Outcome out;
  check_row(out, {.tp = 829, .tn = 26534, .fp = 31, .fn = 44},
            {94.96, 99.88, 96.40, 95.67, 95.24, 99.73});
  return out;
}

// Scalar loop oracle for the hybrid loss.
double oracle_hybrid(const Grid& p, const Grid& q, double alpha, double gamma, double eps) {
  double focal_sum = 0.0, inter = 0.0, sp = 0.0, sq = 0.0;
  for (int i = 0; i < p.rows(); ++i) {
    for (int j = 0; j < p.cols(); ++j) {
      const double pi = p(i, j);
      const double qi = std::min(std::max(q(i, j), 1e-7), 1.0 - 1e-7);
      focal_sum += -alpha * std::pow(1.0 - qi, gamma) * pi * std::log(qi);
      focal_sum += -(1.0 - alpha) * std::pow(qi, gamma) * (1.0 - pi) * std::log(1.0 - qi);
      inter += pi * q(i, j);
      sp += pi;
      sq += q(i, j);
    }
  }
  return focal_sum / static_cast<double>(p.size()) + 1.0 - (2.0 * inter + eps) / (sp + sq + eps);
}

Outcome loss_suite() {
  Outcome out;
  Rng rng(101);
  double worst_bce = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const double p = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    const double q = rng.uniform(1e-6, 1.0 - 1e-6);
    const double bce = -(p * std::log(q) + (1.0 - p) * std::log(1.0 - q));
    const double f = losses::focal(p, q, 0.5, 0.0) * 2.0;
    worst_bce = std::max(worst_bce, std::abs(f - bce));
  }
  out.require(worst_bce < 1e-12, "focal(gamma=0) vs BCE " + std::to_string(worst_bce));

  const losses::LossParams params;
  double worst_oracle = 0.0, worst_grad = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Grid p = testutil::random_binary(rng, 8, 8);
    const Grid q = testutil::random_grid(rng, 8, 8, 0.02, 0.98);
    worst_oracle = std::max(worst_oracle, std::abs(losses::hybrid_loss(p, q, params) -
                                                   oracle_hybrid(p, q, params.alpha, params.gamma,
                                                                 params.epsilon)));
    const losses::FieldLoss fl = losses::hybrid_loss_with_grad(p, q, params);
    const double h = 1e-4;
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      Grid qp = q, qm = q;
      qp.data()[i] += h;
      qm.data()[i] -= h;
      const double fd =
          (losses::hybrid_loss(p, qp, params) - losses::hybrid_loss(p, qm, params)) / (2 * h);
      worst_grad = std::max(worst_grad, testutil::rel_err(fl.grad.data()[i], fd));
    }
  }
  out.require(worst_oracle < 1e-10, "hybrid vs oracle " + std::to_string(worst_oracle));
  out.require(worst_grad < 1e-4, "gradient rel err " + std::to_string(worst_grad));
  if (out.pass) {
    out.detail << "bce err " << worst_bce << ", oracle err " << worst_oracle << ", grad rel err "
               << worst_grad;
  }
  return out;
}

Outcome overfit_probe() {
  Outcome out;
  SynthOptions so;
  so.count = 8;
  so.seed = 7;
  so.size = 64;
  const auto data = synth_corpus(so);
  seg::ModelConfig mc;
  mc.input_size = 64;
  mc.init_seed = 1;
  seg::ModelHandle model = seg::build_segmentation_model(mc);
  train::TrainConfig tc = train::TrainConfig::segmentation_defaults();
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.epochs = 200;
  tc.seed = 3;
  train::train_segmentation(model, data, tc);
  const double dice = train::mean_dice(model, data);
  out.require(dice >= 0.95, "training dice " + std::to_string(dice));
  if (out.pass) out.detail << "training dice " << dice << " after 200 epochs";
  return out;
}

std::vector<Tensor> group_values(const seg::ModelHandle& m, const std::string& group) {
  std::vector<Tensor> out;
  for (const Parameter& p : m.params().all())
    if (p.group == group) out.push_back(p.value);
  return out;
}

bool bit_identical(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

Outcome frozen_encoder() {
  Outcome out;
  SynthOptions so;
  so.count = 4;
  so.seed = 5;
  const auto data = synth_corpus(so);
  seg::ModelConfig mc;
  mc.encoder_frozen = true;
  mc.init_seed = 6;
  seg::ModelHandle model = seg::build_segmentation_model(mc);
  const auto enc = group_values(model, "encoder");
  const auto dec = group_values(model, "decoder");
  train::TrainConfig tc = train::TrainConfig::segmentation_defaults();
  tc.epochs = 5;
  tc.batch_size = 4;  // one step per epoch
  tc.learning_rate = 1e-3;
  train::train_segmentation(model, data, tc);
  out.require(model.adam_step == 5, "adam steps " + std::to_string(model.adam_step));
  out.require(bit_identical(group_values(model, "encoder"), enc), "encoder weights changed");
  out.require(!bit_identical(group_values(model, "decoder"), dec), "decoder did not train");

  const std::size_t enc_count = seg::count_params_by_group(model).at("encoder");
  const seg::ParamCounts frozen = seg::count_params(model);
  seg::set_encoder_frozen(model, false);
  const seg::ParamCounts open = seg::count_params(model);
  out.require(frozen.non_trainable == enc_count && open.non_trainable == 0,
              "non-trainable count does not track the encoder");
  out.require(open.trainable == frozen.trainable + enc_count, "trainable count does not swap");
  out.require(open.trainable + open.non_trainable == frozen.trainable + frozen.non_trainable, "total changed on toggle");
  seg::set_encoder_frozen(model, true);
  out.require(seg::count_params(model).trainable == frozen.trainable, "refreezing differs");
  if (out.pass) {
    out.detail << "encoder unchanged after 5 steps; frozen " << frozen.trainable << "/"
               << frozen.non_trainable << ", open " << open.trainable << "/" << open.non_trainable;
  }
  return out;
}

Outcome infection_map() {
  Outcome out;
  Rng rng(61);
  const double tau = infermap::kDefaultVisibility;
  double worst_v = 0.0;
  std::size_t displayed = 0, hidden = 0, hidden_mismatch = 0;
  for (int t = 0; t < 50; ++t) {
    const int rows = 4 + static_cast<int>(rng.below(29));
    const int cols = 4 + static_cast<int>(rng.below(29));
    CxrImage img;
    img.id = "pair" + std::to_string(t);
    img.pixels = testutil::random_grid(rng, rows, cols);
    Grid prob = testutil::random_grid(rng, rows, cols);
    // plenty of exact zeros and values straddling the threshold
    for (Eigen::Index i = 0; i < prob.size(); ++i) {
      const double u = rng.uniform(0.0, 1.0);
      if (u < 0.3) prob.data()[i] = 0.0;
      else if (u < 0.4) prob.data()[i] = tau * rng.uniform(0.5, 1.5);
    }
    const infermap::InfectionMap m = infermap::render_infection_map(img, ProbMask{img.id, prob});
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        const double intensity = img.pixels(i, j);
        if (prob(i, j) > tau) {
          ++displayed;
          const double v = std::max({m.r(i, j), m.g(i, j), m.b(i, j)});
          worst_v = std::max(worst_v, std::abs(v - intensity));
        } else {
          ++hidden;
          const std::uint8_t q = quantize8(intensity);
          if (quantize8(m.r(i, j)) != q || quantize8(m.g(i, j)) != q || quantize8(m.b(i, j)) != q)
            ++hidden_mismatch;
        }
      }
    }
  }
  out.require(worst_v < 1e-6, "V deviation " + std::to_string(worst_v));
  out.require(hidden_mismatch == 0, std::to_string(hidden_mismatch) + " hidden pixels altered");
  const infermap::Rgb lo = infermap::jet_colormap(0.0), hi = infermap::jet_colormap(1.0);
  out.require(lo.r == 0.0 && lo.g == 0.0 && lo.b == 0.5, "jet(0) != (0,0,0.5)");
  out.require(hi.r == 0.5 && hi.g == 0.0 && hi.b == 0.0, "jet(1) != (0.5,0,0)");
  if (out.pass) {
    out.detail << displayed << " displayed px (max V err " << worst_v << "), " << hidden
               << " hidden px unchanged, jet endpoints exact";
  }
  return out;
}

Outcome detection() {
  Outcome out;
  Rng rng(71);
  int disagreements = 0, positives = 0;
  for (int t = 0; t < 1000; ++t) {
    const int rows = 1 + static_cast<int>(rng.below(16));
    const int cols = 1 + static_cast<int>(rng.below(16));
    // scale so that roughly half of the masks stay below the threshold
    const Grid p = testutil::random_grid(rng, rows, cols) * rng.uniform(0.4, 0.6);
    bool brute = false;
    for (int i = 0; i < rows && !brute; ++i)
      for (int j = 0; j < cols && !brute; ++j) brute = p(i, j) >= 0.5;
    const bool got = infermap::detect(ProbMask{"m", p});
    positives += got;
    disagreements += got != brute;
  }
  out.require(disagreements == 0, std::to_string(disagreements) + " disagreements");
  Grid edge = Grid::Zero(6, 6);
  edge(3, 4) = 0.5;
  out.require(infermap::detect(ProbMask{"m", edge}), "max=0.5 not positive");
  edge(3, 4) = 0.499;
  out.require(!infermap::detect(ProbMask{"m", edge}), "max=0.499 not negative");
  if (out.pass) out.detail << "1000 masks agree (" << positives << " positive), boundaries exact";
  return out;
}

Outcome fold_plan() {
  Outcome out;
  std::vector<CatalogKey> catalog;
  for (int i = 0; i < 2951; ++i) catalog.push_back({"covid_" + std::to_string(i), Label::kCovid});
  for (int i = 0; i < 12544; ++i) catalog.push_back({"control_" + std::to_string(i), Label::kControl});
  const FoldPlan plan = make_folds(catalog, 5, 0.8, 42);
  std::map<std::string, Label> label;
  for (const auto& k : catalog) label[k.id] = k.label;
  std::set<std::string> seen;
  std::ostringstream sizes;
  for (int f = 0; f < 5; ++f) {
    int covid = 0, control = 0;
    const auto test = plan.test_ids(f);
    for (const auto& id : test) {
      out.require(seen.insert(id).second, id + " tested twice");
      (label.at(id) == Label::kCovid ? covid : control)++;
    }
    out.require(std::abs(covid - 590) <= 1, "fold covid " + std::to_string(covid));
    out.require(std::abs(control - 2509) <= 1, "fold control " + std::to_string(control));
    const auto train = plan.train_ids(f);
    out.require(test.size() + train.size() == catalog.size(), "fold does not partition");
    std::set<std::string> tr(train.begin(), train.end());
    for (const auto& id : test) out.require(!tr.count(id), id + " in train and test");
    sizes << (f ? " " : "") << covid << "+" << control;
  }
  out.require(seen.size() == catalog.size(), "not every sample is tested once");
  if (out.pass) out.detail << "test folds " << sizes.str();
  return out;
}

Outcome ci_formula() {
  Outcome out;
  const double r = metrics::confidence_interval(0.5, 100, 1.96);
  out.require(std::abs(r - 0.098) <= 1e-12, "r(0.5,100) = " + std::to_string(r));
  out.require(metrics::confidence_interval(0.0, 100, 1.96) == 0.0, "r(0) != 0");
  out.require(metrics::confidence_interval(1.0, 100, 1.96) == 0.0, "r(1) != 0");
  if (out.pass) out.detail << "r(0.5, 100) = " << r << ", r(0) = r(1) = 0";
  return out;
}

Tensor random_tensor(Rng& rng, Shape s, double lo, double hi) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

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

Outcome grad_cam() {
  Outcome out;
  Rng rng(81);
  const ToyHead head{random_tensor(rng, {3, 4, 3, 3}, -1, 1), random_tensor(rng, {1, 3, 1, 1}, -1, 1),
                     random_tensor(rng, {2, 3, 1, 1}, -1, 1), random_tensor(rng, {1, 2, 1, 1}, -1, 1)};
  const Tensor a = random_tensor(rng, {1, 4, 6, 6}, 0.0, 1.0);
  double worst = 0.0;
  bool non_negative = true;
  for (int cls : {0, 1}) {
    Graph g(GradMode::kAll);
    Var av = g.constant(a);
    const Grid raw = gradcam::grad_cam_on_graph(g, av, head.scores(g, av), cls);
    non_negative = non_negative && (raw >= 0.0).all();
    const double h = 1e-6;
    for (std::size_t i = 0; i < a.size(); ++i) {
      Tensor p = a, m = a;
      p.data()[i] += h;
      m.data()[i] -= h;
      const double fd = (head.score(p, cls) - head.score(m, cls)) / (2 * h);
      worst = std::max(worst, testutil::rel_err(av->grad.data()[i], fd));
    }
  }
  out.require(worst < 1e-3, "gradient rel err " + std::to_string(worst));
  out.require(non_negative, "negative map values");

  // score_1 = mean of channel 2 only
  const Tensor feats = random_tensor(rng, {1, 5, 7, 7}, 0.0, 1.0);
  Tensor w(Shape{2, 5, 1, 1});
  w.at(1, 2, 0, 0) = 1.0;
  w.at(0, 4, 0, 0) = 1.0;
  Graph g(GradMode::kAll);
  Var fv = g.constant(feats);
  Var s = nn::linear(nn::global_avg_pool(fv), g.constant(w), g.constant(Tensor(Shape{1, 2, 1, 1})));
  const double corr = correlation(gradcam::grad_cam_on_graph(g, fv, s, 1), feats.plane(0, 2));
  out.require(corr > 0.999, "linear toy correlation " + std::to_string(corr));
  if (out.pass) out.detail << "FD rel err " << worst << ", linear correlation " << corr;
  return out;
}

Grid shifted(const Grid& m, int dy, int dx) {
  Grid out = Grid::Zero(m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      const int si = i - dy, sj = j - dx;
      if (si >= 0 && sj >= 0 && si < m.rows() && sj < m.cols()) out(i, j) = m(si, sj);
    }
  return out;
}

Outcome annotation_loop() {
  using namespace annotate;
  Outcome out;
  testutil::TempDir dir("acceptance-annotate");
  SynthOptions so;
  so.count = 20;
  so.seed = 11;
  so.size = 32;
  so.covid_fraction = 1.0;
  const auto samples = synth_corpus(so);

  // Hidden truth, a manual candidate off by a few pixels and three model
  // candidates of varying quality.
  Rng rng(12);
  std::map<std::string, Grid> truth;
  std::vector<TaskInput> stage1;
  double manual_iou = 0.0;
  for (const Sample& s : samples) {
    const Grid& gt = s.mask->pixels;
    truth[s.image.id] = gt;
    TaskInput t;
    t.image = s.image;
    const Grid manual = shifted(gt, 2, static_cast<int>(rng.below(3)) - 1);
    manual_iou += iou(manual, gt);
    t.candidates.push_back({"manual", Provenance::kManual, manual});
    for (int m = 0; m < 3; ++m) {
      const int d = static_cast<int>(rng.below(4));
      t.candidates.push_back({"model" + std::to_string(m), Provenance::kModel,
                              shifted(gt, d * (m % 2 ? 1 : -1), d - 1)});
    }
    stage1.push_back(std::move(t));
  }
  manual_iou /= static_cast<double>(samples.size());

  std::string live;
  {
    Campaign c = Campaign::create(dir / "stage1", Stage::kStage1, stage1, 13);
    OracleReviewer oracle(truth);
    const std::size_t n = run_scripted_review(c, oracle, "oracle");
    out.require(n == 20, "stage 1 submissions " + std::to_string(n));
    const ExportResult ex = export_ground_truth(c, dir / "gt1");
    out.require(ex.masks.size() == 20, "exported " + std::to_string(ex.masks.size()));
    live = c.snapshot_json();
  }
  double collab_iou = 0.0;
  const auto exported = import_ground_truth(dir / "gt1");
  for (const SegMask& m : exported) {
    out.require(m.provenance == Provenance::kCollaborative, m.image_id + " not collaborative");
    collab_iou += iou(m.pixels, truth.at(m.image_id));
  }
  collab_iou /= std::max<std::size_t>(1, exported.size());
  out.require(collab_iou >= manual_iou, "collaborative IoU below manual baseline");
  out.require(Campaign::open(dir / "stage1").snapshot_json() == live, "replayed snapshot differs");

  // Stage 2: five model candidates per image, all bad for the first five images.
  std::vector<TaskInput> stage2;
  std::set<std::string> hopeless;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    TaskInput t;
    t.image = samples[i].image;
    const Grid& gt = samples[i].mask->pixels;
    for (int m = 0; m < 5; ++m) {
      const Grid cand = i < 5 ? Grid::Zero(gt.rows(), gt.cols()) : shifted(gt, m % 2, 0);
      t.candidates.push_back({"net" + std::to_string(m), Provenance::kModel, cand});
    }
    if (i < 5) hopeless.insert(t.image.id);
    stage2.push_back(std::move(t));
  }
  Campaign c2 = Campaign::create(dir / "stage2", Stage::kStage2, stage2, 14);
  OracleReviewer strict(truth, 0.5);
  run_scripted_review(c2, strict, "oracle");
  const auto pending = c2.fallback_pending();
  out.require(std::set<std::string>(pending.begin(), pending.end()) == hopeless,
              "fallback queue holds " + std::to_string(pending.size()) + " images");
  out.require(c2.progress().rejected_all == hopeless.size(), "rejected-all count");
  const std::string live2 = c2.snapshot_json();
  out.require(Campaign::open(dir / "stage2").snapshot_json() == live2, "stage 2 replay differs");

  if (out.pass) {
    out.detail << "20 collaborative masks, mean IoU " << collab_iou << " vs manual " << manual_iou
               << "; " << pending.size() << " REJECT_ALL in fallback; replay identical";
  }
  return out;
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
  double budget_s;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "group-I metric row", group_one, 1.0},
      {2, "group-II metric row", group_two, 1.0},
      {3, "loss suite", loss_suite, 0.0},
      {4, "overfit probe", overfit_probe, 600.0},
      {5, "frozen encoder", frozen_encoder, 0.0},
      {6, "infection map", infection_map, 0.0},
      {7, "detection", detection, 0.0},
      {8, "fold plan", fold_plan, 0.0},
      {9, "confidence interval", ci_formula, 0.0},
      {10, "grad-cam", grad_cam, 0.0},
      {11, "annotation loop", annotation_loop, 900.0},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << "exception: " << e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0.0 && secs > c.budget_s) {
      out.pass = false;
      out.detail << " (over the " << c.budget_s << " s budget)";
    }
    failed += !out.pass;
    std::printf("criterion %2d %s  %-20s %7.2fs  %s\n", c.id, out.pass ? "PASS" : "FAIL",
                c.name.c_str(), secs, out.detail.str().c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
