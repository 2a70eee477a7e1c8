#include "cxrinf/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cxrinf/image_io.hpp"
#include "cxrinf/nn.hpp"
#include "json.hpp"

namespace cxrinf::train {

using nlohmann::json;
using seg::HeadKind;
using seg::ModelHandle;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be > 0");
  }
  if (epochs < 1) throw ValidationError("epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) {
    throw ValidationError("batch_size must be >= 1, got " + std::to_string(batch_size));
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ValidationError("adam betas must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0.0)) throw ValidationError("adam epsilon must be > 0");
  loss_params.validate();
}

TrainConfig TrainConfig::segmentation_defaults() { return {}; }

TrainConfig TrainConfig::classifier_defaults() {
  TrainConfig c;
  c.learning_rate = 1e-5;
  c.epochs = 10;
  c.loss = LossKind::kCategoricalCrossEntropy;
  return c;
}

namespace {

json config_json(const TrainConfig& c) {
  return {{"optimizer",
           {{"kind", "adam"},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"epsilon", c.adam.epsilon}}},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"loss", c.loss == LossKind::kHybrid ? "hybrid" : "categorical_cross_entropy"},
          {"focal_alpha", c.loss_params.alpha},
          {"focal_gamma", c.loss_params.gamma},
          {"dice_epsilon", c.loss_params.epsilon},
          {"seed", c.seed}};
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) { return config_json(c).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    TrainConfig c;
    if (j.contains("optimizer")) {
      const json& o = j["optimizer"];
      c.adam.beta1 = o.value("beta1", c.adam.beta1);
      c.adam.beta2 = o.value("beta2", c.adam.beta2);
      c.adam.epsilon = o.value("epsilon", c.adam.epsilon);
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    const std::string loss = j.value("loss", std::string("hybrid"));
    if (loss == "hybrid") {
      c.loss = LossKind::kHybrid;
    } else if (loss == "categorical_cross_entropy") {
      c.loss = LossKind::kCategoricalCrossEntropy;
    } else {
      throw ValidationError("unknown loss '" + loss + "'");
    }
    c.loss_params.alpha = j.value("focal_alpha", c.loss_params.alpha);
    c.loss_params.gamma = j.value("focal_gamma", c.loss_params.gamma);
    c.loss_params.epsilon = j.value("dice_epsilon", c.loss_params.epsilon);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed train config: ") + e.what());
  }
}

std::string run_record_to_json(const RunRecord& r) {
  json j = {{"model_config", r.model_config_json.empty() ? json() : json::parse(r.model_config_json)},
            {"train_config", r.train_config_json.empty() ? json() : json::parse(r.train_config_json)},
            {"loss_history", r.loss_history},
            {"checkpoint_path", r.checkpoint_path},
            {"inference_ms_per_sample", r.inference_ms_per_sample},
            {"fold", r.fold},
            {"batch_size_requested", r.batch_size_requested},
            {"batch_size_used", r.batch_size_used},
            {"batch_note", r.batch_note},
            {"final_train_metric", r.final_train_metric},
            {"first_epoch", r.first_epoch}};
  return j.dump(2);
}

namespace {

Grid model_input(const CxrImage& image, int size) {
  if (image.height() == size && image.width() == size) return image.pixels;
  return resize_bilinear(image.pixels, size, size);
}

Grid mask_input(const SegMask& mask, int size) {
  if (mask.pixels.rows() == size && mask.pixels.cols() == size) return mask.pixels;
  return binarize(resize_bilinear(mask.pixels, size, size));
}

void adam_step(ModelHandle& model, const TrainConfig& cfg) {
  model.adam_step += 1;
  const double t = static_cast<double>(model.adam_step);
  const double b1 = cfg.adam.beta1;
  const double b2 = cfg.adam.beta2;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (Parameter& p : model.params().all()) {
    if (!p.trainable || p.grad.empty()) continue;
    if (p.adam_m.empty()) p.adam_m = Tensor(p.value.shape());
    if (p.adam_v.empty()) p.adam_v = Tensor(p.value.shape());
    double* w = p.value.data();
    double* m = p.adam_m.data();
    double* v = p.adam_v.data();
    const double* g = p.grad.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam.epsilon);
    }
  }
}

// Picks the largest batch whose recorded activations fit the memory budget.
int fit_batch(ModelHandle& model, const TrainConfig& cfg, std::size_t set_size,
              std::string& note) {
  const int s = model.config().input_size;
  Graph g(GradMode::kTrainable);
  Var out = model.forward(g, Tensor({1, 1, s, s}, 0.5));
  (void)out;
  // Values plus gradients, in bytes.
  const std::size_t per_sample = g.value_footprint() * sizeof(double) * 2;
  const std::size_t budget =
      cfg.memory_budget_bytes == 0 ? (std::size_t{1} << 30) : cfg.memory_budget_bytes;
  const int fit = static_cast<int>(std::max<std::size_t>(1, budget / std::max<std::size_t>(1, per_sample)));
  int used = std::min(cfg.batch_size, fit);
  if (used < cfg.batch_size) {
    note = "batch reduced from " + std::to_string(cfg.batch_size) + " to " +
           std::to_string(used) + " to fit a " + std::to_string(budget >> 20) +
           " MiB activation budget (" + std::to_string(per_sample >> 10) + " KiB/sample)";
  }
  if (static_cast<std::size_t>(used) > set_size) used = static_cast<int>(set_size);
  return used;
}

using BatchFn = std::function<double(ModelHandle&, std::span<const std::size_t>)>;

RunRecord run_epochs(ModelHandle& model, std::size_t n, const TrainConfig& cfg,
                     const BatchFn& step) {
  RunRecord rec;
  rec.model_config_json = seg::config_to_json(model.config());
  rec.train_config_json = train_config_to_json(cfg);
  rec.batch_size_requested = cfg.batch_size;
  rec.batch_size_used = fit_batch(model, cfg, n, rec.batch_note);
  rec.first_epoch = model.epochs_completed;

  std::vector<std::size_t> order(n);
  for (int e = 0; e < cfg.epochs; ++e) {
    const int epoch = model.epochs_completed;
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += rec.batch_size_used) {
      const std::size_t len = std::min<std::size_t>(rec.batch_size_used, n - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      for (Parameter& p : model.params().all()) {
        if (p.trainable) p.zero_grad();
      }
      const double loss = step(model, idx);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss " << loss << " at epoch " << epoch << ", batch starting at "
            << start << "; lower the learning rate or inspect the inputs";
        throw TrainingError(msg.str());
      }
      adam_step(model, cfg);
      total += loss * static_cast<double>(len);
    }
    const double mean = total / static_cast<double>(n);
    rec.loss_history.push_back(mean);
    model.epochs_completed += 1;
    if (cfg.on_epoch) cfg.on_epoch(epoch, mean);
  }
  return rec;
}

void finish_record(ModelHandle& model, const TrainConfig& cfg, RunRecord& rec,
                   std::span<const Sample> set) {
  std::vector<CxrImage> probe;
  for (std::size_t i = 0; i < std::min<std::size_t>(set.size(), 4); ++i) probe.push_back(set[i].image);
  rec.inference_ms_per_sample = time_inference(model, probe);
  if (!cfg.checkpoint_path.empty()) {
    seg::save_checkpoint(model, cfg.checkpoint_path);
    rec.checkpoint_path = cfg.checkpoint_path.string();
    std::filesystem::path sidecar = cfg.checkpoint_path;
    sidecar.replace_extension(".run.json");
    std::ofstream(sidecar) << run_record_to_json(rec) << "\n";
  }
}

}  // namespace

RunRecord train_segmentation(ModelHandle& model, std::span<const Sample> train_set,
                             const TrainConfig& config) {
  config.validate();
  if (model.head() != HeadKind::kSegmentationSigmoid) {
    throw ValidationError("train_segmentation requires a segmentation model");
  }
  if (train_set.empty()) throw ValidationError("training set is empty");
  const int s = model.config().input_size;
  std::vector<Grid> images, masks;
  for (const Sample& smp : train_set) {
    if (!smp.mask) throw ValidationError("sample " + smp.image.id + " has no mask");
    images.push_back(model_input(smp.image, s));
    masks.push_back(mask_input(*smp.mask, s));
  }

  auto step = [&](ModelHandle& m, std::span<const std::size_t> idx) {
    std::vector<Grid> xb, yb;
    for (std::size_t i : idx) {
      xb.push_back(images[i]);
      yb.push_back(masks[i]);
    }
    Graph g(GradMode::kTrainable);
    Var prob = m.forward(g, stack_planes(xb));
    const losses::BatchLoss loss =
        losses::hybrid_loss_batch(stack_planes(yb), prob->value, config.loss_params);
    if (std::isfinite(loss.value)) g.backward(prob, loss.grad);
    return loss.value;
  };
  RunRecord rec = run_epochs(model, train_set.size(), config, step);
  rec.final_train_metric = mean_dice(model, train_set);
  finish_record(model, config, rec, train_set);
  return rec;
}

RunRecord train_classifier(ModelHandle& model, std::span<const Sample> train_set,
                           const TrainConfig& config) {
  config.validate();
  if (model.head() != HeadKind::kClassifier2Way) {
    throw ValidationError("train_classifier requires a classifier model");
  }
  if (train_set.empty()) throw ValidationError("training set is empty");
  const int s = model.config().input_size;
  std::vector<Grid> images;
  std::vector<int> labels;
  for (const Sample& smp : train_set) {
    images.push_back(model_input(smp.image, s));
    labels.push_back(smp.image.label == Label::kCovid ? kCovidClass : kControlClass);
  }

  auto step = [&](ModelHandle& m, std::span<const std::size_t> idx) {
    std::vector<Grid> xb;
    std::vector<int> yb;
    for (std::size_t i : idx) {
      xb.push_back(images[i]);
      yb.push_back(labels[i]);
    }
    Graph g(GradMode::kTrainable);
    Var logits = m.forward(g, stack_planes(xb));
    const losses::BatchLoss loss = losses::categorical_cross_entropy(logits->value, yb);
    if (std::isfinite(loss.value)) g.backward(logits, loss.grad);
    return loss.value;
  };
  RunRecord rec = run_epochs(model, train_set.size(), config, step);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const auto p = predict_class(model, train_set[i].image);
    const int guess = p[kCovidClass] > p[kControlClass] ? kCovidClass : kControlClass;
    if (guess == labels[i]) ++correct;
  }
  rec.final_train_metric = static_cast<double>(correct) / static_cast<double>(train_set.size());
  finish_record(model, config, rec, train_set);
  return rec;
}

std::vector<ProbMask> predict_batch(ModelHandle& model, std::span<const CxrImage> images) {
  if (model.head() != HeadKind::kSegmentationSigmoid) {
    throw ValidationError("predict requires a segmentation model");
  }
  const int s = model.config().input_size;
  std::vector<ProbMask> out;
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, images.size() - start);
    std::vector<Grid> xb;
    for (std::size_t i = 0; i < len; ++i) xb.push_back(model_input(images[start + i], s));
    const Tensor prob = model.infer(stack_planes(xb));
    for (std::size_t i = 0; i < len; ++i) {
      out.push_back({images[start + i].id, prob.plane(static_cast<int>(i), 0)});
    }
  }
  return out;
}

ProbMask predict(ModelHandle& model, const CxrImage& image) {
  return predict_batch(model, std::span<const CxrImage>(&image, 1)).front();
}

std::array<double, 2> predict_class(ModelHandle& model, const CxrImage& image) {
  if (model.head() != HeadKind::kClassifier2Way) {
    throw ValidationError("predict_class requires a classifier model");
  }
  const int s = model.config().input_size;
  const Grid x = model_input(image, s);
  const Tensor probs = nn::softmax(model.infer(stack_planes(std::span<const Grid>(&x, 1))));
  return {probs.data()[0], probs.data()[1]};
}

double time_inference(ModelHandle& model, std::span<const CxrImage> images) {
  if (images.empty()) return 0.0;
  const int s = model.config().input_size;
  const auto t0 = std::chrono::steady_clock::now();
  for (const CxrImage& img : images) {
    const Grid x = model_input(img, s);
    model.infer(stack_planes(std::span<const Grid>(&x, 1)));
  }
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() /
         static_cast<double>(images.size());
}

double mean_dice(ModelHandle& model, std::span<const Sample> samples, double threshold) {
  if (samples.empty()) return 0.0;
  std::vector<CxrImage> images;
  for (const Sample& s : samples) images.push_back(s.image);
  const std::vector<ProbMask> probs = predict_batch(model, images);
  const int size = model.config().input_size;
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].mask) throw ValidationError("sample " + samples[i].image.id + " has no mask");
    total += losses::dice_coefficient(mask_input(*samples[i].mask, size),
                                      binarize(probs[i].pixels, threshold));
  }
  return total / static_cast<double>(samples.size());
}

CvResult run_cross_validation(const FoldPlan& plan, std::span<const Sample> samples,
                              const seg::ModelConfig& model_config,
                              const TrainConfig& train_config, const CvOptions& options) {
  train_config.validate();
  model_config.validate();
  std::map<std::string, const Sample*> by_id;
  for (const Sample& s : samples) {
    if (!by_id.emplace(s.image.id, &s).second) {
      throw ValidationError("duplicate sample id " + s.image.id);
    }
  }
  for (const auto& [id, fold] : plan.assignments) {
    if (by_id.count(id) == 0) throw ValidationError("fold plan references unknown sample " + id);
  }
  if (plan.assignments.size() != samples.size()) {
    throw ValidationError("fold plan covers " + std::to_string(plan.assignments.size()) +
                          " samples but " + std::to_string(samples.size()) + " were given");
  }

  CvResult result;
  for (int fold = 0; fold < plan.k; ++fold) {
    std::vector<Sample> train;
    for (const std::string& id : plan.train_ids(fold)) train.push_back(*by_id.at(id));
    if (options.augment_target > 0) {
      train = balance_training_set(train, static_cast<std::size_t>(options.augment_target),
                                   options.augment,
                                   mix_seed(options.augment.seed, static_cast<std::uint64_t>(fold)));
    }
    seg::ModelConfig mc = model_config;
    mc.init_seed = mix_seed(model_config.init_seed, static_cast<std::uint64_t>(fold));
    seg::ModelHandle model = seg::build_segmentation_model(mc);

    TrainConfig tc = train_config;
    tc.seed = mix_seed(train_config.seed, static_cast<std::uint64_t>(fold));
    if (!options.output_dir.empty()) {
      tc.checkpoint_path = options.output_dir / ("fold" + std::to_string(fold) + ".ckpt");
    }
    RunRecord rec = train_segmentation(model, train, tc);
    rec.fold = fold;
    if (!tc.checkpoint_path.empty()) {
      std::filesystem::path sidecar = tc.checkpoint_path;
      sidecar.replace_extension(".run.json");
      std::ofstream(sidecar) << run_record_to_json(rec) << "\n";
    }
    result.runs.push_back(std::move(rec));

    std::vector<CxrImage> test;
    for (const std::string& id : plan.test_ids(fold)) test.push_back(by_id.at(id)->image);
    for (ProbMask& p : predict_batch(model, test)) {
      result.predictions.push_back({fold, std::move(p)});
    }
  }
  return result;
}

void write_prediction_dump(const std::filesystem::path& dir,
                           std::span<const FoldPrediction> predictions) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.jsonl", std::ios::trunc);
  if (!index) throw std::runtime_error("cannot write " + (dir / "index.jsonl").string());
  for (const FoldPrediction& p : predictions) {
    const std::string file = p.prob.image_id + "_prob.png";
    write_file(dir / file, encode_png_gray16(p.prob.pixels));
    index << json{{"id", p.prob.image_id}, {"fold", p.fold}, {"path", file}}.dump() << "\n";
  }
}

std::vector<FoldPrediction> read_prediction_dump(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.jsonl");
  if (!index) throw ValidationError("no prediction index in " + dir.string());
  std::vector<FoldPrediction> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out.push_back({j.at("fold").get<int>(),
                   {j.at("id").get<std::string>(),
                    read_gray_image(dir / j.at("path").get<std::string>())}});
  }
  return out;
}

}  // namespace cxrinf::train
