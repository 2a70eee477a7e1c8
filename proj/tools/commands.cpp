#include "commands.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <fstream>
#include <iostream>
#include <memory>

#include "cxrinf/annotate.hpp"
#include "cxrinf/annotate_server.hpp"
#include "cxrinf/dataset.hpp"
#include "cxrinf/gradcam.hpp"
#include "cxrinf/image_io.hpp"
#include "cxrinf/infermap.hpp"
#include "cxrinf/metrics.hpp"
#include "cxrinf/segmodel.hpp"
#include "cxrinf/trainer.hpp"

namespace cxrinf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ----------------------------------------------------------------- helpers

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".dcm";
}

CxrImage load_image(const fs::path& p) {
  const std::vector<std::uint8_t> bytes = read_file(p);
  SourceFormat fmt = SourceFormat::kPng;
  CxrImage img;
  img.id = p.stem().string();
  img.pixels = raster_to_gray(decode_any(bytes, &fmt));
  img.original_format = fmt;
  img.source = "cli";
  return img;
}

std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const std::string& s : inputs) {
    if (fs::is_directory(s)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(s)) {
        if (e.is_regular_file() && is_image_file(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.emplace_back(s);
    }
  }
  if (out.empty()) throw ValidationError("no input images found");
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text << "\n";
}

void add_model_options(CLI::App* c, seg::ModelConfig& m, std::string& decoder,
                       std::string& encoder, std::string& scale, std::string& pretrained,
                       std::string& pretrained_sha) {
  c->add_option("--decoder", decoder, "unet, unetpp or dla");
  c->add_option("--encoder", encoder, "densenet121, chexnet, inceptionv3 or resnet50");
  c->add_flag("--frozen", m.encoder_frozen, "Exclude encoder weights from updates");
  c->add_option("--scale", scale, "paper or desk");
  c->add_option("--input-size", m.input_size, "Model input side in pixels");
  c->add_option("--init-seed", m.init_seed, "Weight initialization seed");
  c->add_option("--pretrained", pretrained, "Encoder weights (checkpoint format)");
  c->add_option("--pretrained-sha256", pretrained_sha, "Expected hash of --pretrained");
}

seg::ModelConfig resolve_model(seg::ModelConfig m, const std::string& decoder,
                               const std::string& encoder, const std::string& scale,
                               const std::string& pretrained, const std::string& sha) {
  m.decoder = seg::parse_decoder(decoder);
  m.encoder = seg::parse_encoder(encoder);
  m.scale = seg::parse_scale(scale);
  if (!pretrained.empty()) m.pretrained = seg::WeightSource{pretrained, sha};
  m.validate();
  return m;
}

void add_train_options(CLI::App* c, train::TrainConfig& t) {
  c->add_option("--epochs", t.epochs, "Training epochs");
  c->add_option("--lr", t.learning_rate, "Adam learning rate");
  c->add_option("--batch", t.batch_size, "Batch size (may shrink to fit memory)");
  c->add_option("--seed", t.seed, "Shuffle seed");
  c->add_option("--beta1", t.adam.beta1, "Adam beta1");
  c->add_option("--beta2", t.adam.beta2, "Adam beta2");
  c->add_option("--focal-alpha", t.loss_params.alpha, "Focal loss alpha");
  c->add_option("--focal-gamma", t.loss_params.gamma, "Focal loss gamma");
}

std::string strip_suffix(std::string s, const std::string& suffix) {
  if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
    s.resize(s.size() - suffix.size());
  }
  return s;
}


}  // namespace

std::vector<Command> register_commands(CLI::App& app, Globals& globals) {
  std::vector<Command> cmds;
  (void)globals;

  // ------------------------------------------------------------ synth-corpus
  {
    auto o = std::make_shared<SynthOptions>();
    auto out = std::make_shared<std::string>();
    CLI::App* c = app.add_subcommand("synth-corpus", "Generate a disk-on-noise corpus with masks");
    c->add_option("--n", o->count, "Number of images");
    c->add_option("--seed", o->seed, "Generator seed");
    c->add_option("--size", o->size, "Image side in pixels");
    c->add_option("--covid-fraction", o->covid_fraction, "Fraction of positive images");
    c->add_option("--noise", o->noise_sigma, "Gaussian noise sigma");
    c->add_option("--out", *out, "Output directory")->required();
    cmds.push_back({c, [o, out](RunManifest& m) {
                      write_corpus(*out, synth_corpus(*o));
                      m.add_seed("synth", o->seed);
                      m.add_output(*out);
                      std::cout << "wrote " << o->count << " samples to " << *out << "\n";
                    }});
  }

  // ------------------------------------------------------------------ ingest
  {
    struct Opts {
      std::string dir, label = "covid", source, catalog;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("ingest", "Decode a source directory into the catalog");
    c->add_option("--dir", o->dir, "Directory of PNG/JPEG/DICOM files")->required();
    c->add_option("--label", o->label, "covid or control");
    c->add_option("--source", o->source, "Source tag used in image ids")->required();
    c->add_option("--catalog", o->catalog, "Catalog JSON-lines file")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      Catalog catalog(o->catalog);
                      const IngestResult r =
                          ingest_source(o->dir, parse_label(o->label), o->source, &catalog);
                      m.add_input(o->dir);
                      m.add_output(o->catalog);
                      for (const auto& e : r.errors) {
                        std::cerr << "skipped " << e.path << ": " << e.message << "\n";
                      }
                      for (const auto& [a, b] : r.duplicates) {
                        std::cerr << "duplicate content: " << a << " == " << b << "\n";
                      }
                      std::cout << "ingested " << r.images.size() << " images, "
                                << r.errors.size() << " failures\n";
                    }});
  }

  // ------------------------------------------------------------------- folds
  {
    struct Opts {
      std::string catalog, corpus, out;
      int k = 5;
      double ratio = 0.8;
      std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("folds", "Stratified k-fold plan");
    c->add_option("--catalog", o->catalog, "Catalog JSON-lines file");
    c->add_option("--corpus", o->corpus, "Corpus directory (alternative to --catalog)");
    c->add_option("--k", o->k, "Number of folds");
    c->add_option("--ratio", o->ratio, "Train fraction per fold, must equal (k-1)/k");
    c->add_option("--seed", o->seed, "Shuffle seed");
    c->add_option("--out", o->out, "Plan JSON")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      std::vector<CatalogKey> keys;
                      if (!o->catalog.empty()) {
                        for (const CatalogEntry& e : Catalog(o->catalog).load()) {
                          keys.push_back({e.id, e.label});
                        }
                        m.add_input(o->catalog);
                      } else if (!o->corpus.empty()) {
                        for (const Sample& s : load_corpus(o->corpus)) {
                          keys.push_back({s.image.id, s.image.label});
                        }
                        m.add_input(fs::path(o->corpus) / "catalog.jsonl");
                      } else {
                        throw ValidationError("folds needs --catalog or --corpus");
                      }
                      const FoldPlan plan = make_folds(keys, o->k, o->ratio, o->seed);
                      write_text(o->out, fold_plan_to_json(plan));
                      m.add_seed("folds", o->seed);
                      m.add_output(o->out);
                      for (int f = 0; f < plan.k; ++f) {
                        std::cout << "fold " << f << ": test " << plan.test_ids(f).size()
                                  << ", train " << plan.train_ids(f).size() << "\n";
                      }
                    }});
  }

  // --------------------------------------------------------------- train-seg
  {
    struct Opts {
      seg::ModelConfig model;
      train::TrainConfig train = train::TrainConfig::segmentation_defaults();
      std::string decoder = "unet", encoder = "densenet121", scale = "desk", pretrained, sha;
      std::string corpus, out, resume;
      int augment_target = 0;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("train-seg", "Train a segmentation model");
    c->add_option("--corpus", o->corpus, "Corpus directory with masks")->required();
    c->add_option("--out", o->out, "Checkpoint path")->required();
    c->add_option("--resume", o->resume, "Continue from this checkpoint");
    c->add_option("--augment-target", o->augment_target,
                  "Balance COVID samples to this count with rigid augmentation");
    add_model_options(c, o->model, o->decoder, o->encoder, o->scale, o->pretrained, o->sha);
    add_train_options(c, o->train);
    cmds.push_back({c, [o](RunManifest& m) {
                      std::vector<Sample> samples = load_corpus(o->corpus);
                      m.add_input(o->corpus);
                      if (o->augment_target > 0) {
                        samples = balance_training_set(samples, o->augment_target, AugmentParams{},
                                                       o->train.seed);
                      }
                      seg::ModelHandle model =
                          o->resume.empty()
                              ? seg::build_segmentation_model(resolve_model(
                                    o->model, o->decoder, o->encoder, o->scale, o->pretrained, o->sha))
                              : seg::load_checkpoint(o->resume);
                      if (!o->resume.empty()) m.add_input(o->resume);
                      train::TrainConfig tc = o->train;
                      tc.checkpoint_path = o->out;
                      tc.on_epoch = [](int e, double loss) {
                        std::cout << "epoch " << e << " loss " << loss << "\n";
                      };
                      const train::RunRecord r = train::train_segmentation(model, samples, tc);
                      m.add_seed("train", tc.seed);
                      m.add_seed("init", model.config().init_seed);
                      m.add_output(o->out);
                      std::cout << "train dice " << r.final_train_metric << "\n";
                      if (!r.batch_note.empty()) std::cout << r.batch_note << "\n";
                    }});
  }

  // --------------------------------------------------------------- train-cls
  {
    struct Opts {
      seg::ModelConfig model;
      train::TrainConfig train = train::TrainConfig::classifier_defaults();
      std::string decoder = "unet", encoder = "densenet121", scale = "desk", pretrained, sha;
      std::string corpus, out;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("train-cls", "Train the 2-class classifier");
    c->add_option("--corpus", o->corpus, "Corpus directory")->required();
    c->add_option("--out", o->out, "Checkpoint path")->required();
    add_model_options(c, o->model, o->decoder, o->encoder, o->scale, o->pretrained, o->sha);
    add_train_options(c, o->train);
    cmds.push_back({c, [o](RunManifest& m) {
                      const std::vector<Sample> samples = load_corpus(o->corpus);
                      m.add_input(o->corpus);
                      seg::ModelHandle model = seg::build_classifier(resolve_model(
                          o->model, o->decoder, o->encoder, o->scale, o->pretrained, o->sha));
                      train::TrainConfig tc = o->train;
                      tc.checkpoint_path = o->out;
                      tc.on_epoch = [](int e, double loss) {
                        std::cout << "epoch " << e << " loss " << loss << "\n";
                      };
                      const train::RunRecord r = train::train_classifier(model, samples, tc);
                      m.add_seed("train", tc.seed);
                      m.add_seed("init", model.config().init_seed);
                      m.add_output(o->out);
                      std::cout << "train accuracy " << r.final_train_metric << "\n";
                    }});
  }

  // ---------------------------------------------------------------------- cv
  {
    struct Opts {
      seg::ModelConfig model;
      train::TrainConfig train = train::TrainConfig::segmentation_defaults();
      std::string decoder = "unet", encoder = "densenet121", scale = "desk", pretrained, sha;
      std::string corpus, plan, out;
      int k = 5;
      std::uint64_t fold_seed = 0;
      int augment_target = 0;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("cv", "k-fold cross-validation with held-out predictions");
    c->add_option("--corpus", o->corpus, "Corpus directory with masks")->required();
    c->add_option("--plan", o->plan, "Fold plan JSON (built from --k/--fold-seed if absent)");
    c->add_option("--k", o->k, "Folds when no plan is given");
    c->add_option("--fold-seed", o->fold_seed, "Fold seed when no plan is given");
    c->add_option("--augment-target", o->augment_target, "Per-fold COVID augmentation target");
    c->add_option("--out", o->out, "Output directory")->required();
    add_model_options(c, o->model, o->decoder, o->encoder, o->scale, o->pretrained, o->sha);
    add_train_options(c, o->train);
    cmds.push_back({c, [o](RunManifest& m) {
                      const std::vector<Sample> samples = load_corpus(o->corpus);
                      m.add_input(o->corpus);
                      FoldPlan plan;
                      if (!o->plan.empty()) {
                        std::ifstream in(o->plan);
                        plan = fold_plan_from_json(std::string(std::istreambuf_iterator<char>(in), {}));
                        m.add_input(o->plan);
                      } else {
                        std::vector<CatalogKey> keys;
                        for (const Sample& s : samples) keys.push_back({s.image.id, s.image.label});
                        plan = make_folds(keys, o->k, (o->k - 1.0) / o->k, o->fold_seed);
                        m.add_seed("folds", o->fold_seed);
                      }
                      train::CvOptions opts;
                      opts.output_dir = o->out;
                      opts.augment_target = o->augment_target;
                      const seg::ModelConfig mc = resolve_model(o->model, o->decoder, o->encoder,
                                                                o->scale, o->pretrained, o->sha);
                      const train::CvResult r =
                          train::run_cross_validation(plan, samples, mc, o->train, opts);
                      train::write_prediction_dump(fs::path(o->out) / "predictions", r.predictions);
                      json runs = json::array();
                      for (const auto& run : r.runs) runs.push_back(json::parse(train::run_record_to_json(run)));
                      write_text(fs::path(o->out) / "cv.json", runs.dump(2));
                      m.add_seed("train", o->train.seed);
                      m.add_output(o->out);
                      std::cout << r.predictions.size() << " held-out predictions over " << plan.k
                                << " folds\n";
                    }});
  }

  // ------------------------------------------------------------------- infer
  {
    struct Opts {
      std::string model, out;
      std::vector<std::string> inputs;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("infer", "Predict probability maps");
    c->add_option("--model", o->model, "Segmentation checkpoint")->required();
    c->add_option("--input", o->inputs, "Image files or directories")->required();
    c->add_option("--out", o->out, "Output directory")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      seg::ModelHandle model = seg::load_checkpoint(o->model);
                      m.add_input(o->model);
                      std::vector<CxrImage> images;
                      for (const fs::path& p : expand_inputs(o->inputs)) {
                        images.push_back(load_image(p));
                        m.add_input(p);
                      }
                      std::vector<train::FoldPrediction> preds;
                      for (ProbMask& p : train::predict_batch(model, images)) {
                        preds.push_back({-1, std::move(p)});
                      }
                      train::write_prediction_dump(o->out, preds);
                      m.add_output(o->out);
                      std::cout << "wrote " << preds.size() << " probability maps to " << o->out << "\n";
                    }});
  }

  // -------------------------------------------------------------- render-map
  {
    struct Opts {
      std::string image, prob, out;
      double tau_vis = infermap::kDefaultVisibility;
      double threshold = 0.5;
      std::size_t min_area = 1;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("render-map", "Composite an infection map");
    c->add_option("--image", o->image, "Radiograph")->required();
    c->add_option("--prob", o->prob, "Probability map PNG")->required();
    c->add_option("--tau-vis", o->tau_vis, "Hide probabilities at or below this value");
    c->add_option("--threshold", o->threshold, "Detection threshold for the sidecar");
    c->add_option("--min-area", o->min_area, "Detection minimum positive pixels");
    c->add_option("--out", o->out, "Output directory")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      const CxrImage img = load_image(o->image);
                      ProbMask prob{img.id, read_gray_image(o->prob)};
                      if (prob.pixels.rows() != img.pixels.rows() ||
                          prob.pixels.cols() != img.pixels.cols()) {
                        prob.pixels = resize_bilinear(prob.pixels, img.height(), img.width())
                                          .max(0.0)
                                          .min(1.0);
                      }
                      const infermap::InfectionMap map =
                          infermap::render_infection_map(img, prob, o->tau_vis);
                      const fs::path png = fs::path(o->out) / (img.id + "_infmap.png");
                      const fs::path sidecar = fs::path(o->out) / (img.id + ".json");
                      write_file(png, infermap::encode_png(map));
                      write_text(sidecar, infermap::detection_sidecar(prob, o->threshold, o->min_area));
                      m.add_input(o->image);
                      m.add_input(o->prob);
                      m.add_output(png);
                      m.add_output(sidecar);
                      std::cout << png.string() << "\n";
                    }});
  }

  // ------------------------------------------------------------------ detect
  {
    struct Opts {
      std::string prob, out;
      double threshold = 0.5;
      std::size_t min_area = 1;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("detect", "Apply the any-pixel detection rule");
    c->add_option("--prob", o->prob, "Probability map PNG")->required();
    c->add_option("--threshold", o->threshold, "Pixel threshold");
    c->add_option("--min-area", o->min_area, "Minimum positive pixels");
    c->add_option("--out", o->out, "Sidecar JSON path");
    cmds.push_back({c, [o](RunManifest& m) {
                      const ProbMask prob{fs::path(o->prob).stem().string(), read_gray_image(o->prob)};
                      m.add_input(o->prob);
                      const bool hit = infermap::detect(prob, o->threshold, o->min_area);
                      if (!o->out.empty()) {
                        write_text(o->out, infermap::detection_sidecar(prob, o->threshold, o->min_area));
                        m.add_output(o->out);
                      }
                      std::cout << (hit ? "positive" : "negative") << "\n";
                    }});
  }

  // -------------------------------------------------------------------- eval
  {
    struct Opts {
      std::string confusion, pred_dir, corpus, out, level = "sample";
      double threshold = 0.5, z = metrics::kDefaultZ;
      std::size_t min_area = 1;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("eval", "Metric report from counts or predictions");
    c->add_option("--confusion", o->confusion, "tn=..,fp=..,fn=..,tp=..");
    c->add_option("--level", o->level, "sample or pixel (with --confusion)");
    c->add_option("--pred-dir", o->pred_dir, "Prediction dump directory");
    c->add_option("--corpus", o->corpus, "Corpus with ground-truth masks");
    c->add_option("--threshold", o->threshold, "Pixel threshold");
    c->add_option("--min-area", o->min_area, "Detection minimum positive pixels");
    c->add_option("--z", o->z, "Normal quantile for confidence intervals");
    c->add_option("--out", o->out, "Report JSON path");
    cmds.push_back({c, [o](RunManifest& m) {
                      auto print = [](const metrics::MetricReport& r) {
                        std::cout << metrics::to_string(r.level) << " n=" << r.n
                                  << " sensitivity=" << metrics::format_percent(r.sensitivity)
                                  << " specificity=" << metrics::format_percent(r.specificity)
                                  << " precision=" << metrics::format_percent(r.precision)
                                  << " f1=" << metrics::format_percent(r.f1())
                                  << " f2=" << metrics::format_percent(r.f2())
                                  << " accuracy=" << metrics::format_percent(r.accuracy) << "\n";
                      };
                      json reports = json::array();
                      if (!o->confusion.empty()) {
                        metrics::ConfusionMatrix cm;
                        std::map<std::string, std::uint64_t*> fields = {
                            {"tn", &cm.tn}, {"fp", &cm.fp}, {"fn", &cm.fn}, {"tp", &cm.tp}};
                        std::set<std::string> seen;
                        std::stringstream ss(o->confusion);
                        std::string part;
                        while (std::getline(ss, part, ',')) {
                          const auto eq = part.find('=');
                          const std::string key = part.substr(0, eq);
                          if (eq == std::string::npos || fields.count(key) == 0) {
                            throw ValidationError("bad --confusion entry '" + part + "'");
                          }
                          try {
                            std::size_t used = 0;
                            const std::string val = part.substr(eq + 1);
                            *fields[key] = std::stoull(val, &used);
                            if (used != val.size()) throw std::invalid_argument(val);
                          } catch (const std::exception&) {
                            throw ValidationError("bad count in --confusion entry '" + part + "'");
                          }
                          seen.insert(key);
                        }
                        if (seen.size() != 4) throw ValidationError("--confusion needs tn, fp, fn and tp");
                        const metrics::Level level =
                            o->level == "pixel" ? metrics::Level::kPixel : metrics::Level::kSample;
                        const metrics::MetricReport r = metrics::compute_metrics(cm, level, o->z);
                        print(r);
                        reports.push_back(json::parse(metrics::report_to_json(r)));
                      } else if (!o->pred_dir.empty() && !o->corpus.empty()) {
                        std::map<std::string, Sample> by_id;
                        for (Sample& s : load_corpus(o->corpus)) by_id.emplace(s.image.id, std::move(s));
                        metrics::ConfusionMatrix pixel;
                        std::vector<bool> truth, detected;
                        for (const train::FoldPrediction& p : train::read_prediction_dump(o->pred_dir)) {
                          auto it = by_id.find(p.prob.image_id);
                          if (it == by_id.end() || !it->second.mask) {
                            throw ValidationError("no ground truth for " + p.prob.image_id);
                          }
                          Grid gt = it->second.mask->pixels;
                          if (gt.rows() != p.prob.pixels.rows() || gt.cols() != p.prob.pixels.cols()) {
                            gt = binarize(resize_bilinear(gt, p.prob.pixels.rows(), p.prob.pixels.cols()));
                          }
                          pixel += metrics::confusion_pixel(gt, p.prob.pixels, o->threshold);
                          truth.push_back(it->second.image.label == Label::kCovid);
                          detected.push_back(infermap::detect(p.prob, o->threshold, o->min_area));
                        }
                        std::vector<char> t(truth.begin(), truth.end()), d(detected.begin(), detected.end());
                        const metrics::ConfusionMatrix sample = metrics::confusion_sample(
                            std::span<const bool>(reinterpret_cast<const bool*>(t.data()), t.size()),
                            std::span<const bool>(reinterpret_cast<const bool*>(d.data()), d.size()));
                        const auto pr = metrics::compute_metrics(pixel, metrics::Level::kPixel, o->z);
                        const auto sr = metrics::compute_metrics(sample, metrics::Level::kSample, o->z);
                        print(pr);
                        print(sr);
                        reports.push_back(json::parse(metrics::report_to_json(pr)));
                        reports.push_back(json::parse(metrics::report_to_json(sr)));
                        m.add_input(o->pred_dir);
                        m.add_input(o->corpus);
                      } else {
                        throw ValidationError("eval needs --confusion, or --pred-dir with --corpus");
                      }
                      if (!o->out.empty()) {
                        write_text(o->out, reports.dump(2));
                        m.add_output(o->out);
                      }
                    }});
  }

  // ----------------------------------------------------------------- gradcam
  {
    struct Opts {
      std::string model, image, out, layer = seg::kLastConvTap;
      int class_index = train::kCovidClass;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("gradcam", "Grad-CAM activation map from a classifier");
    c->add_option("--model", o->model, "Classifier checkpoint")->required();
    c->add_option("--image", o->image, "Radiograph")->required();
    c->add_option("--class", o->class_index, "0 = control, 1 = covid");
    c->add_option("--layer", o->layer, "Feature tap name");
    c->add_option("--out", o->out, "Output directory")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      seg::ModelHandle model = seg::load_checkpoint(o->model);
                      const CxrImage img = load_image(o->image);
                      const gradcam::ActivationMap act =
                          gradcam::grad_cam(model, img, o->class_index, o->layer);
                      const fs::path raw = fs::path(o->out) / (img.id + "_act.png");
                      const fs::path png = fs::path(o->out) / (img.id + "_gradcam.png");
                      write_file(raw, encode_png_gray16(act.values));
                      write_file(png, infermap::encode_png(infermap::render_infection_map(
                                          img, ProbMask{img.id, act.values})));
                      m.add_input(o->model);
                      m.add_input(o->image);
                      m.add_output(raw);
                      m.add_output(png);
                      std::cout << png.string() << "\n";
                    }});
  }

  // ------------------------------------------------------------ compare-maps
  {
    struct Opts {
      std::string activation, prob, gt, out;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("compare-maps", "Overlap of activation and infection maps with a mask");
    c->add_option("--activation", o->activation, "Activation map PNG")->required();
    c->add_option("--prob", o->prob, "Probability map PNG")->required();
    c->add_option("--gt", o->gt, "Ground-truth mask PNG")->required();
    c->add_option("--out", o->out, "Comparison JSON path");
    cmds.push_back({c, [o](RunManifest& m) {
                      gradcam::ActivationMap act;
                      act.image_id = strip_suffix(fs::path(o->activation).stem().string(), "_act");
                      act.values = read_gray_image(o->activation);
                      const ProbMask prob{act.image_id, read_gray_image(o->prob)};
                      const SegMask gt{act.image_id, binarize(read_gray_image(o->gt)),
                                       Provenance::kCollaborative};
                      const std::string text = gradcam::comparison_to_json(
                          gradcam::compare_explanations(act, prob, gt));
                      m.add_input(o->activation);
                      m.add_input(o->prob);
                      m.add_input(o->gt);
                      if (!o->out.empty()) {
                        write_text(o->out, text);
                        m.add_output(o->out);
                      }
                      std::cout << text << "\n";
                    }});
  }

  // --------------------------------------------------------- annotate-create
  {
    struct Opts {
      std::string corpus, campaign, ground_truth;
      int stage = 1, k = 5;
      std::uint64_t seed = 0;
      std::string scale = "desk";
      int input_size = 64;
      train::TrainConfig train = train::TrainConfig::segmentation_defaults();
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("annotate-create", "Build a stage 1 or stage 2 review campaign");
    c->add_option("--corpus", o->corpus, "Corpus directory")->required();
    c->add_option("--campaign", o->campaign, "Campaign directory")->required();
    c->add_option("--stage", o->stage, "1 or 2")->check(CLI::IsMember({1, 2}));
    c->add_option("--ground-truth", o->ground_truth, "Stage 1 export (stage 2 only)");
    c->add_option("--k", o->k, "Folds for stage 1");
    c->add_option("--campaign-seed", o->seed, "Fold and blinding seed");
    c->add_option("--scale", o->scale, "paper or desk");
    c->add_option("--input-size", o->input_size, "Model input side");
    add_train_options(c, o->train);
    cmds.push_back({c, [o](RunManifest& m) {
                      const std::vector<Sample> corpus = load_corpus(o->corpus);
                      m.add_input(o->corpus);
                      annotate::StageOptions opts;
                      opts.campaign_dir = o->campaign;
                      opts.fold_k = o->k;
                      opts.train = o->train;
                      opts.seed = o->seed;
                      const seg::Scale scale = seg::parse_scale(o->scale);
                      if (o->stage == 1) {
                        std::vector<Sample> subset;
                        for (const Sample& s : corpus) {
                          if (s.image.label == Label::kCovid) subset.push_back(s);
                        }
                        const auto configs = annotate::stage1_default_configs(scale, o->input_size);
                        annotate::create_stage1(subset, configs, opts);
                      } else {
                        if (o->ground_truth.empty()) throw ValidationError("stage 2 needs --ground-truth");
                        std::map<std::string, SegMask> gt;
                        for (SegMask& s : annotate::import_ground_truth(o->ground_truth)) {
                          gt.emplace(s.image_id, std::move(s));
                        }
                        std::vector<Sample> collab;
                        std::vector<CxrImage> rest;
                        for (const Sample& s : corpus) {
                          if (s.image.label != Label::kCovid) continue;
                          auto it = gt.find(s.image.id);
                          if (it != gt.end()) {
                            collab.push_back({s.image, it->second});
                          } else {
                            rest.push_back(s.image);
                          }
                        }
                        m.add_input(o->ground_truth);
                        const auto configs = annotate::stage2_default_configs(scale, o->input_size);
                        annotate::create_stage2(collab, rest, configs, opts);
                      }
                      m.add_seed("campaign", o->seed);
                      m.add_seed("train", o->train.seed);
                      m.add_output(o->campaign);
                      std::cout << "campaign written to " << o->campaign << "\n";
                    }});
  }

  // ---------------------------------------------------------- annotate-serve
  {
    struct Opts {
      std::string campaign, host = "127.0.0.1";
      int port = 8080;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("annotate-serve", "Serve a campaign to reviewers over HTTP");
    c->add_option("--campaign", o->campaign, "Campaign directory")->required();
    c->add_option("--host", o->host, "Bind address");
    c->add_option("--port", o->port, "Bind port (0 picks one)");
    cmds.push_back({c, [o](RunManifest& m) {
                      annotate::Campaign campaign = annotate::Campaign::open(o->campaign);
                      annotate::AnnotationServer server(campaign);
                      int port = o->port;
                      if (port == 0) {
                        port = server.bind_any_port(o->host);
                      } else if (!server.bind(o->host, port)) {
                        port = -1;
                      }
                      if (port < 0) throw std::runtime_error("cannot bind " + o->host);
                      m.add_input(fs::path(o->campaign) / "events.jsonl");
                      std::cout << "serving " << o->campaign << " on http://" << o->host << ":"
                                << port << std::endl;
                      server.serve();
                    }});
  }

  // --------------------------------------------------------- annotate-export
  {
    struct Opts {
      std::string campaign, out;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("annotate-export", "Export collaborative ground truth");
    c->add_option("--campaign", o->campaign, "Campaign directory")->required();
    c->add_option("--out", o->out, "Export directory")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      annotate::Campaign campaign = annotate::Campaign::open(o->campaign);
                      const annotate::ExportResult r = annotate::export_ground_truth(campaign, o->out);
                      m.add_input(fs::path(o->campaign) / "events.jsonl");
                      m.add_output(o->out);
                      std::cout << r.masks.size() << " masks exported, " << r.pending.size()
                                << " pending manual fallback\n";
                    }});
  }

  // ------------------------------------------------------- annotate-fallback
  {
    struct Opts {
      std::string campaign, image_id, mask, reviewer;
    };
    auto o = std::make_shared<Opts>();
    CLI::App* c = app.add_subcommand("annotate-fallback", "Import a manual mask for a rejected image");
    c->add_option("--campaign", o->campaign, "Campaign directory")->required();
    c->add_option("--image-id", o->image_id, "Rejected image id")->required();
    c->add_option("--mask", o->mask, "Binary mask PNG")->required();
    c->add_option("--reviewer", o->reviewer, "Who drew the mask")->required();
    cmds.push_back({c, [o](RunManifest& m) {
                      annotate::Campaign campaign = annotate::Campaign::open(o->campaign);
                      campaign.import_fallback(o->image_id, binarize(read_gray_image(o->mask)), o->reviewer);
                      m.add_input(o->mask);
                      m.add_output(fs::path(o->campaign) / "events.jsonl");
                      std::cout << "fallback mask recorded for " << o->image_id << "\n";
                    }});
  }

  return cmds;
}

}  // namespace cxrinf::cli
