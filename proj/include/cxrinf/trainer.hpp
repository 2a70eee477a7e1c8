#pragma once

#include <cstdint>
#include <filesystem>
#include <array>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrinf/dataset.hpp"
#include "cxrinf/losses.hpp"
#include "cxrinf/segmodel.hpp"

namespace cxrinf::train {

/// Class index used by the 2-way classifier head.
inline constexpr int kControlClass = 0;
inline constexpr int kCovidClass = 1;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

enum class LossKind { kHybrid, kCategoricalCrossEntropy };

struct TrainConfig {
  AdamParams adam;
  double learning_rate = 1e-4;
  int epochs = 50;
  int batch_size = 32;
  LossKind loss = LossKind::kHybrid;
  losses::LossParams loss_params;
  std::uint64_t seed = 0;
  /// Written after the final epoch when non-empty, with a RunRecord JSON
  /// beside it.
  std::filesystem::path checkpoint_path;
  /// Activation memory budget used to shrink the batch; 0 selects 1 GiB.
  std::size_t memory_budget_bytes = 0;
  /// Called after each epoch with (epoch index, mean loss).
  std::function<void(int, double)> on_epoch;

  void validate() const;

  static TrainConfig segmentation_defaults();
  static TrainConfig classifier_defaults();
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);

struct RunRecord {
  std::string model_config_json;
  std::string train_config_json;
  std::vector<double> loss_history;
  std::string checkpoint_path;
  double inference_ms_per_sample = 0.0;
  int fold = -1;
  int batch_size_requested = 0;
  int batch_size_used = 0;
  std::string batch_note;
  /// Mean dice (segmentation) or accuracy (classifier) on the training set
  /// after the last epoch.
  double final_train_metric = 0.0;
  int first_epoch = 0;
};

std::string run_record_to_json(const RunRecord& r);

/// Trains `config.epochs` further epochs, continuing from
/// `model.epochs_completed`, so a reloaded checkpoint resumes exactly.
RunRecord train_segmentation(seg::ModelHandle& model, std::span<const Sample> train_set,
                             const TrainConfig& config);
RunRecord train_classifier(seg::ModelHandle& model, std::span<const Sample> train_set,
                           const TrainConfig& config);

/// Images are resized to the model input when needed; the returned mask has
/// the model input size.
ProbMask predict(seg::ModelHandle& model, const CxrImage& image);
std::vector<ProbMask> predict_batch(seg::ModelHandle& model, std::span<const CxrImage> images);
/// Softmax class probabilities {control, covid}.
std::array<double, 2> predict_class(seg::ModelHandle& model, const CxrImage& image);
/// Mean wall-clock milliseconds per single-image forward pass.
double time_inference(seg::ModelHandle& model, std::span<const CxrImage> images);

/// Mean dice of thresholded predictions against masks.
double mean_dice(seg::ModelHandle& model, std::span<const Sample> samples, double threshold = 0.5);

struct FoldPrediction {
  int fold = 0;
  ProbMask prob;
};

struct CvOptions {
  /// Per-fold artifacts (checkpoints, run records); empty keeps everything
  /// in memory.
  std::filesystem::path output_dir;
  /// Balance each training fold to this many COVID samples with rigid
  /// augmentation; 0 disables.
  int augment_target = 0;
  AugmentParams augment;
};

struct CvResult {
  std::vector<RunRecord> runs;
  std::vector<FoldPrediction> predictions;
};

/// Trains one model per fold and predicts every held-out sample exactly once.
CvResult run_cross_validation(const FoldPlan& plan, std::span<const Sample> samples,
                              const seg::ModelConfig& model_config,
                              const TrainConfig& train_config, const CvOptions& options = {});

/// 16-bit PNG per map (value = round(p * 65535)) plus index.jsonl.
void write_prediction_dump(const std::filesystem::path& dir,
                           std::span<const FoldPrediction> predictions);
std::vector<FoldPrediction> read_prediction_dump(const std::filesystem::path& dir);

}  // namespace cxrinf::train
