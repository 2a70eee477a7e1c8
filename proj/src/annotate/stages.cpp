#include <algorithm>

#include "cxrinf/annotate.hpp"

namespace cxrinf::annotate {

double iou(const Grid& a, const Grid& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("iou: mask shapes differ");
  }
  const auto pa = a >= 0.5;
  const auto pb = b >= 0.5;
  const auto uni = (pa || pb).count();
  if (uni == 0) return 1.0;
  return static_cast<double>((pa && pb).count()) / static_cast<double>(uni);
}

std::string OracleReviewer::choose(const AnnotationTask& task, const MaskStore& masks) {
  auto it = truth_.find(task.image_id);
  if (it == truth_.end()) throw ValidationError("oracle has no truth for " + task.image_id);
  std::string best;
  double best_iou = -1.0;
  for (const Candidate& c : task.candidates) {
    const double v = iou(masks.get(c.mask_ref), it->second);
    if (v > best_iou) {
      best_iou = v;
      best = c.label;
    }
  }
  if (task.allow_reject_all() && best_iou < reject_below_) return kRejectAll;
  return best;
}

std::string RandomReviewer::choose(const AnnotationTask& task, const MaskStore&) {
  if (task.allow_reject_all() && rng_.uniform() < reject_probability_) return kRejectAll;
  return task.candidates[rng_.below(task.candidates.size())].label;
}

std::size_t run_scripted_review(Campaign& campaign, ScriptedReviewer& reviewer,
                                const std::string& reviewer_id) {
  std::size_t submitted = 0;
  while (auto task = campaign.next_task(reviewer_id)) {
    campaign.submit_selection({task->task_id, reviewer_id, reviewer.choose(*task, campaign.masks()), 0});
    ++submitted;
  }
  return submitted;
}

namespace {

NamedConfig named(seg::DecoderKind d, seg::EncoderKind e, seg::Scale scale, int input_size,
                  std::uint64_t seed) {
  seg::ModelConfig c;
  c.decoder = d;
  c.encoder = e;
  c.scale = scale;
  c.input_size = input_size;
  c.init_seed = seed;
  return {c.name(), c};
}

}  // namespace

std::vector<NamedConfig> stage1_default_configs(seg::Scale scale, int input_size) {
  using seg::DecoderKind;
  using seg::EncoderKind;
  return {named(DecoderKind::kUnet, EncoderKind::kDenseNet121, scale, input_size, 1),
          named(DecoderKind::kUnetPlusPlus, EncoderKind::kDenseNet121, scale, input_size, 2),
          named(DecoderKind::kDla, EncoderKind::kDenseNet121, scale, input_size, 3)};
}

std::vector<NamedConfig> stage2_default_configs(seg::Scale scale, int input_size) {
  using seg::DecoderKind;
  using seg::EncoderKind;
  auto out = stage1_default_configs(scale, input_size);
  out.push_back(named(DecoderKind::kUnet, EncoderKind::kInceptionV3, scale, input_size, 4));
  out.push_back(named(DecoderKind::kUnet, EncoderKind::kResNet50, scale, input_size, 5));
  return out;
}

Campaign create_stage1(std::span<const Sample> subset, std::span<const NamedConfig> configs,
                       const StageOptions& options) {
  if (subset.empty()) throw ValidationError("stage1 subset is empty");
  if (configs.empty()) throw ValidationError("stage1 needs at least one model config");
  std::vector<CatalogKey> keys;
  for (const Sample& s : subset) {
    if (!s.mask) throw ValidationError("image " + s.image.id + " has no manual mask");
    keys.push_back({s.image.id, s.image.label});
  }
  const int k = options.fold_k;
  const FoldPlan plan =
      make_folds(keys, k, static_cast<double>(k - 1) / static_cast<double>(k), options.seed);

  std::map<std::string, std::vector<CandidateInput>> candidates;
  for (const Sample& s : subset) {
    candidates[s.image.id].push_back({"manual", Provenance::kManual, s.mask->pixels});
  }
  for (const NamedConfig& nc : configs) {
    train::TrainConfig tc = options.train;
    tc.checkpoint_path.clear();
    const train::CvResult cv = train::run_cross_validation(plan, subset, nc.config, tc);
    for (const train::FoldPrediction& p : cv.predictions) {
      const Sample& src = *std::find_if(subset.begin(), subset.end(), [&](const Sample& s) {
        return s.image.id == p.prob.image_id;
      });
      Grid m = binarize(resize_bilinear(p.prob.pixels, src.image.height(), src.image.width()));
      candidates[p.prob.image_id].push_back({nc.name, Provenance::kModel, std::move(m)});
    }
  }
  std::vector<TaskInput> tasks;
  for (const Sample& s : subset) tasks.push_back({s.image, candidates.at(s.image.id)});
  return Campaign::create(options.campaign_dir, Stage::kStage1, tasks, options.seed,
                          options.clock, options.lock_ms);
}

Campaign create_stage2(std::span<const Sample> collaborative,
                       std::span<const CxrImage> unannotated,
                       std::span<const NamedConfig> configs, const StageOptions& options) {
  if (collaborative.empty()) throw ValidationError("stage2 needs collaborative masks");
  if (configs.empty()) throw ValidationError("stage2 needs at least one model config");
  for (const Sample& s : collaborative) {
    if (!s.mask) throw ValidationError("image " + s.image.id + " has no collaborative mask");
  }
  std::map<std::string, std::vector<CandidateInput>> candidates;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    seg::ModelHandle model = seg::build_segmentation_model(configs[i].config);
    train::TrainConfig tc = options.train;
    tc.checkpoint_path.clear();
    tc.seed = mix_seed(options.train.seed, i);
    train::train_segmentation(model, collaborative, tc);
    const std::vector<ProbMask> probs = train::predict_batch(model, unannotated);
    for (std::size_t j = 0; j < unannotated.size(); ++j) {
      const CxrImage& img = unannotated[j];
      candidates[img.id].push_back(
          {configs[i].name, Provenance::kModel,
           binarize(resize_bilinear(probs[j].pixels, img.height(), img.width()))});
    }
  }
  std::vector<TaskInput> tasks;
  for (const CxrImage& img : unannotated) tasks.push_back({img, candidates.at(img.id)});
  return Campaign::create(options.campaign_dir, Stage::kStage2, tasks, options.seed,
                          options.clock, options.lock_ms);
}

}  // namespace cxrinf::annotate
