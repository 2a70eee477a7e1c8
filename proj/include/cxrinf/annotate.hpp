#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrinf/dataset.hpp"
#include "cxrinf/segmodel.hpp"
#include "cxrinf/trainer.hpp"

namespace cxrinf::annotate {

enum class Stage { kStage1, kStage2 };
enum class TaskStatus { kOpen, kLocked, kCompleted, kRejectedAll };

std::string to_string(Stage s);
std::string to_string(TaskStatus s);

inline constexpr const char* kRejectAll = "REJECT_ALL";
inline constexpr std::int64_t kDefaultLockMs = 15 * 60 * 1000;

/// Stale lock, double submission or a task held by someone else.
class ConflictError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Milliseconds since the Unix epoch.
using Clock = std::function<std::int64_t()>;
Clock system_clock();

struct Candidate {
  std::string label;     // blinded: "A", "B", ...
  std::string mask_ref;  // content hash in the mask store
  // Hidden from reviewers.
  Provenance provenance = Provenance::kModel;
  std::string source;  // "manual" or a model name
};

struct Lock {
  std::string reviewer;
  std::int64_t expiry_ms = 0;
};

struct AnnotationTask {
  std::string task_id;
  std::string image_id;
  Stage stage = Stage::kStage1;
  std::vector<Candidate> candidates;
  std::uint64_t permutation_seed = 0;
  TaskStatus status = TaskStatus::kOpen;
  std::optional<Lock> lock;
  std::string reviewer;  // who completed it
  std::string choice;    // blinded label or REJECT_ALL
  std::int64_t completed_ms = 0;

  bool allow_reject_all() const { return stage == Stage::kStage2; }
};

struct Selection {
  std::string task_id;
  std::string reviewer;
  std::string choice;
  std::int64_t timestamp_ms = 0;  // 0: taken from the campaign clock
};

struct Progress {
  std::size_t open = 0;
  std::size_t locked = 0;
  std::size_t completed = 0;
  std::size_t rejected_all = 0;
  std::size_t fallback_pending = 0;
};

/// Binary masks as 8-bit PNG files named by the sha256 of their bytes.
class MaskStore {
 public:
  explicit MaskStore(std::filesystem::path dir);
  std::string put(const Grid& mask);
  Grid get(const std::string& ref) const;
  std::vector<std::uint8_t> bytes(const std::string& ref) const;
  bool contains(const std::string& ref) const;

 private:
  std::filesystem::path path_of(const std::string& ref) const;
  std::filesystem::path dir_;
};

/// Order in which `n` canonical candidates are shown for a given seed.
std::vector<std::size_t> candidate_permutation(std::uint64_t seed, std::size_t n);

struct CandidateInput {
  std::string source;
  Provenance provenance = Provenance::kModel;
  Grid mask;
};

struct TaskInput {
  CxrImage image;
  /// Canonical order; the campaign shuffles it per task.
  std::vector<CandidateInput> candidates;
};

/// A persistent review campaign. Every state change is appended to
/// events.jsonl; reopening a directory replays that log. All public methods
/// are serialized by one mutex, so assignment is linearizable.
class Campaign {
 public:
  static Campaign create(const std::filesystem::path& dir, Stage stage,
                         std::span<const TaskInput> tasks, std::uint64_t seed,
                         Clock clock = system_clock(), std::int64_t lock_ms = kDefaultLockMs);
  static Campaign open(const std::filesystem::path& dir, Clock clock = system_clock());

  Campaign(Campaign&& other) noexcept;
  Campaign& operator=(Campaign&&) = delete;

  Stage stage() const { return stage_; }
  const std::filesystem::path& dir() const { return dir_; }
  const MaskStore& masks() const { return masks_; }
  std::filesystem::path image_path(const std::string& image_id) const;

  /// Open task locked to `reviewer`; a reviewer already holding a live lock
  /// gets that task back. Empty when nothing is open.
  std::optional<AnnotationTask> next_task(const std::string& reviewer);
  AnnotationTask submit_selection(const Selection& sel);
  /// Resolve a REJECT_ALL image with a manually drawn mask.
  void import_fallback(const std::string& image_id, const Grid& mask, const std::string& reviewer);

  Progress progress();
  std::vector<std::string> fallback_pending();
  std::vector<AnnotationTask> tasks();
  AnnotationTask task(const std::string& task_id);

  /// Canonical JSON of the full state; identical for a live campaign and one
  /// rebuilt from its log.
  std::string snapshot_json();
  void write_snapshot();

  /// Resolved fallback {mask_ref, reviewer} for a rejected image.
  std::optional<std::pair<std::string, std::string>> fallback_mask(const std::string& image_id);

 private:
  Campaign(std::filesystem::path dir, Clock clock);

  // Every mutation goes through record(): the event is appended to the log
  // and then applied, the same path replay uses.
  void record(const std::string& event);
  void apply(const std::string& line);
  void expire_locks(std::int64_t now);
  std::string snapshot_locked() const;
  void write_snapshot_unlocked();
  AnnotationTask& task_ref(const std::string& task_id);

  std::filesystem::path dir_;
  Clock clock_;
  MaskStore masks_;
  std::unique_ptr<std::mutex> mu_;
  Stage stage_ = Stage::kStage1;
  std::uint64_t seed_ = 0;
  std::int64_t lock_ms_ = kDefaultLockMs;
  std::uint64_t seq_ = 0;
  std::vector<AnnotationTask> tasks_;
  std::map<std::string, std::size_t> task_index_;
  std::map<std::string, std::size_t> image_index_;
  /// image id -> resolved fallback {mask_ref, reviewer}; empty ref = pending.
  std::map<std::string, std::pair<std::string, std::string>> fallback_;
};

/// Blinded JSON sent to reviewers: ids, labels and URLs only.
std::string task_payload_json(const AnnotationTask& task);

struct ExportedMask {
  std::string image_id;
  std::string file;
  Provenance provenance = Provenance::kCollaborative;
  std::string reviewer;
  std::string task_id;
  std::string chosen_source;
  std::uint64_t permutation_seed = 0;
  std::string sha256;
};

struct ExportResult {
  std::vector<ExportedMask> masks;
  std::vector<std::string> pending;
};

/// Writes masks/<image_id>.png and manifest.json under `out_dir`.
ExportResult export_ground_truth(Campaign& campaign, const std::filesystem::path& out_dir);
std::vector<SegMask> import_ground_truth(const std::filesystem::path& out_dir);

// ------------------------------------------------------------ scripted review

class ScriptedReviewer {
 public:
  virtual ~ScriptedReviewer() = default;
  /// Returns a blinded label or REJECT_ALL.
  virtual std::string choose(const AnnotationTask& task, const MaskStore& masks) = 0;
};

/// Picks the candidate with the highest IoU against a hidden truth. In stage
/// 2, rejects all when the best IoU falls below `reject_below`.
class OracleReviewer final : public ScriptedReviewer {
 public:
  OracleReviewer(std::map<std::string, Grid> truth, double reject_below = -1.0)
      : truth_(std::move(truth)), reject_below_(reject_below) {}
  std::string choose(const AnnotationTask& task, const MaskStore& masks) override;

 private:
  std::map<std::string, Grid> truth_;
  double reject_below_;
};

class RandomReviewer final : public ScriptedReviewer {
 public:
  RandomReviewer(std::uint64_t seed, double reject_probability = 0.0)
      : rng_(seed), reject_probability_(reject_probability) {}
  std::string choose(const AnnotationTask& task, const MaskStore& masks) override;

 private:
  Rng rng_;
  double reject_probability_;
};

/// Drains the queue with one reviewer; returns the number of submissions.
std::size_t run_scripted_review(Campaign& campaign, ScriptedReviewer& reviewer,
                                const std::string& reviewer_id);

double iou(const Grid& a, const Grid& b);

// --------------------------------------------------------------- stages

struct NamedConfig {
  std::string name;
  seg::ModelConfig config;
};

std::vector<NamedConfig> stage1_default_configs(seg::Scale scale = seg::Scale::kDesk,
                                                int input_size = 64);
std::vector<NamedConfig> stage2_default_configs(seg::Scale scale = seg::Scale::kDesk,
                                                int input_size = 64);

struct StageOptions {
  std::filesystem::path campaign_dir;
  int fold_k = 5;
  train::TrainConfig train;
  std::uint64_t seed = 0;
  Clock clock = system_clock();
  std::int64_t lock_ms = kDefaultLockMs;
};

/// Cross-validates each config on the manually annotated subset; every image
/// gets its manual mask plus one held-out prediction per config.
Campaign create_stage1(std::span<const Sample> subset, std::span<const NamedConfig> configs,
                       const StageOptions& options);

/// Trains each config on the collaborative set and proposes masks for the
/// unannotated images.
Campaign create_stage2(std::span<const Sample> collaborative,
                       std::span<const CxrImage> unannotated,
                       std::span<const NamedConfig> configs, const StageOptions& options);

}  // namespace cxrinf::annotate
