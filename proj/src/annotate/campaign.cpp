#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

#include "cxrinf/annotate.hpp"
#include "cxrinf/hashing.hpp"
#include "cxrinf/image_io.hpp"
#include "json.hpp"

namespace cxrinf::annotate {

using nlohmann::json;

std::string to_string(Stage s) { return s == Stage::kStage1 ? "stage1" : "stage2"; }

std::string to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::kOpen: return "open";
    case TaskStatus::kLocked: return "locked";
    case TaskStatus::kCompleted: return "completed";
    case TaskStatus::kRejectedAll: return "rejected_all";
  }
  return "?";
}

namespace {

Stage parse_stage(const std::string& s) {
  if (s == "stage1") return Stage::kStage1;
  if (s == "stage2") return Stage::kStage2;
  throw ValidationError("unknown stage '" + s + "'");
}

bool is_hex_ref(const std::string& ref) {
  return ref.size() == 64 &&
         std::all_of(ref.begin(), ref.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

constexpr const char* kEventLog = "events.jsonl";
constexpr const char* kSnapshot = "snapshot.json";
constexpr std::uint64_t kSnapshotEvery = 25;

json task_json(const AnnotationTask& t) {
  json cands = json::array();
  for (const Candidate& c : t.candidates) {
    cands.push_back({{"label", c.label},
                     {"mask_ref", c.mask_ref},
                     {"provenance", to_string(c.provenance)},
                     {"source", c.source}});
  }
  json lock = nullptr;
  if (t.lock) lock = {{"reviewer", t.lock->reviewer}, {"expiry_ms", t.lock->expiry_ms}};
  return {{"task_id", t.task_id},
          {"image_id", t.image_id},
          {"stage", to_string(t.stage)},
          {"permutation_seed", t.permutation_seed},
          {"status", to_string(t.status)},
          {"candidates", cands},
          {"lock", lock},
          {"reviewer", t.reviewer},
          {"choice", t.choice},
          {"completed_ms", t.completed_ms}};
}

}  // namespace

Clock system_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

// --------------------------------------------------------------- MaskStore

MaskStore::MaskStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path MaskStore::path_of(const std::string& ref) const {
  if (!is_hex_ref(ref)) throw NotFoundError("invalid mask reference '" + ref + "'");
  return dir_ / (ref + ".png");
}

std::string MaskStore::put(const Grid& mask) {
  check_binary(mask, "candidate mask");
  const std::vector<std::uint8_t> png = encode_png_gray8(mask);
  const std::string ref = sha256_hex(png);
  const std::filesystem::path p = path_of(ref);
  if (!std::filesystem::exists(p)) write_file(p, png);
  return ref;
}

bool MaskStore::contains(const std::string& ref) const {
  return is_hex_ref(ref) && std::filesystem::exists(dir_ / (ref + ".png"));
}

std::vector<std::uint8_t> MaskStore::bytes(const std::string& ref) const {
  const std::filesystem::path p = path_of(ref);
  if (!std::filesystem::exists(p)) throw NotFoundError("no mask " + ref);
  return read_file(p);
}

Grid MaskStore::get(const std::string& ref) const {
  const std::filesystem::path p = path_of(ref);
  if (!std::filesystem::exists(p)) throw NotFoundError("no mask " + ref);
  return read_gray_image(p);
}

std::vector<std::size_t> candidate_permutation(std::uint64_t seed, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  return order;
}

// ---------------------------------------------------------------- Campaign

Campaign::Campaign(std::filesystem::path dir, Clock clock)
    : dir_(std::move(dir)),
      clock_(std::move(clock)),
      masks_(dir_ / "masks"),
      mu_(std::make_unique<std::mutex>()) {}

Campaign::Campaign(Campaign&& o) noexcept
    : dir_(std::move(o.dir_)),
      clock_(std::move(o.clock_)),
      masks_(std::move(o.masks_)),
      mu_(std::move(o.mu_)),
      stage_(o.stage_),
      seed_(o.seed_),
      lock_ms_(o.lock_ms_),
      seq_(o.seq_),
      tasks_(std::move(o.tasks_)),
      task_index_(std::move(o.task_index_)),
      image_index_(std::move(o.image_index_)),
      fallback_(std::move(o.fallback_)) {}

Campaign Campaign::create(const std::filesystem::path& dir, Stage stage,
                          std::span<const TaskInput> tasks, std::uint64_t seed, Clock clock,
                          std::int64_t lock_ms) {
  if (lock_ms <= 0) throw ValidationError("lock duration must be positive");
  if (std::filesystem::exists(dir / kEventLog)) {
    throw ValidationError("campaign already exists in " + dir.string());
  }
  std::set<std::string> ids;
  for (const TaskInput& t : tasks) {
    if (!ids.insert(t.image.id).second) {
      throw ValidationError("image " + t.image.id + " appears in two tasks");
    }
    if (t.candidates.empty()) throw ValidationError("image " + t.image.id + " has no candidates");
    const bool has_manual = std::any_of(t.candidates.begin(), t.candidates.end(),
                                        [](const CandidateInput& c) {
                                          return c.provenance == Provenance::kManual;
                                        });
    if (stage == Stage::kStage1 && !has_manual) {
      throw ValidationError("stage1 task for " + t.image.id + " lacks the manual mask");
    }
    if (stage == Stage::kStage2 && has_manual) {
      throw ValidationError("stage2 task for " + t.image.id + " must hold model masks only");
    }
    if (t.candidates.size() > 26) throw ValidationError("too many candidates for " + t.image.id);
  }
  std::filesystem::create_directories(dir / "images");
  Campaign c(dir, std::move(clock));
  {
    std::lock_guard<std::mutex> g(*c.mu_);
    c.record(json{{"type", "campaign_created"},
                  {"stage", to_string(stage)},
                  {"seed", seed},
                  {"lock_ms", lock_ms}}
                 .dump());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const TaskInput& t = tasks[i];
      write_file(c.image_path(t.image.id), encode_png_gray8(t.image.pixels));
      const std::uint64_t pseed = mix_seed(seed, i);
      const std::vector<std::size_t> perm = candidate_permutation(pseed, t.candidates.size());
      json cands = json::array();
      for (std::size_t pos = 0; pos < perm.size(); ++pos) {
        const CandidateInput& in = t.candidates[perm[pos]];
        cands.push_back({{"label", std::string(1, static_cast<char>('A' + pos))},
                         {"mask_ref", c.masks_.put(in.mask)},
                         {"provenance", to_string(in.provenance)},
                         {"source", in.source}});
      }
      char id[32];
      std::snprintf(id, sizeof id, "t%05zu", i);
      c.record(json{{"type", "task_created"},
                    {"task_id", id},
                    {"image_id", t.image.id},
                    {"stage", to_string(stage)},
                    {"permutation_seed", pseed},
                    {"candidates", cands}}
                   .dump());
    }
    c.write_snapshot_unlocked();
  }
  return c;
}

Campaign Campaign::open(const std::filesystem::path& dir, Clock clock) {
  std::ifstream in(dir / kEventLog);
  if (!in) throw NotFoundError("no campaign event log in " + dir.string());
  Campaign c(dir, std::move(clock));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) c.apply(line);
  }
  return c;
}

std::filesystem::path Campaign::image_path(const std::string& image_id) const {
  if (image_id.empty() || image_id.find('/') != std::string::npos ||
      image_id.find("..") != std::string::npos) {
    throw NotFoundError("invalid image id '" + image_id + "'");
  }
  return dir_ / "images" / (image_id + ".png");
}

void Campaign::record(const std::string& event) {
  json j = json::parse(event);
  j["seq"] = seq_ + 1;
  const std::string line = j.dump();
  {
    std::ofstream out(dir_ / kEventLog, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + (dir_ / kEventLog).string());
    out << line << "\n";
    out.flush();
    if (!out) throw std::runtime_error("failed writing " + (dir_ / kEventLog).string());
  }
  apply(line);
  if (seq_ % kSnapshotEvery == 0) write_snapshot_unlocked();
}

void Campaign::apply(const std::string& line) {
  const json j = json::parse(line);
  const std::uint64_t seq = j.at("seq").get<std::uint64_t>();
  if (seq != seq_ + 1) {
    throw ValidationError("event log out of order: expected seq " + std::to_string(seq_ + 1) +
                          ", found " + std::to_string(seq));
  }
  const std::string type = j.at("type").get<std::string>();
  if (type == "campaign_created") {
    stage_ = parse_stage(j.at("stage").get<std::string>());
    seed_ = j.at("seed").get<std::uint64_t>();
    lock_ms_ = j.at("lock_ms").get<std::int64_t>();
  } else if (type == "task_created") {
    AnnotationTask t;
    t.task_id = j.at("task_id").get<std::string>();
    t.image_id = j.at("image_id").get<std::string>();
    t.stage = parse_stage(j.at("stage").get<std::string>());
    t.permutation_seed = j.at("permutation_seed").get<std::uint64_t>();
    for (const json& c : j.at("candidates")) {
      t.candidates.push_back({c.at("label").get<std::string>(), c.at("mask_ref").get<std::string>(),
                              parse_provenance(c.at("provenance").get<std::string>()),
                              c.at("source").get<std::string>()});
    }
    task_index_[t.task_id] = tasks_.size();
    image_index_[t.image_id] = tasks_.size();
    tasks_.push_back(std::move(t));
  } else if (type == "lock_acquired") {
    AnnotationTask& t = task_ref(j.at("task_id").get<std::string>());
    t.status = TaskStatus::kLocked;
    t.lock = Lock{j.at("reviewer").get<std::string>(), j.at("expiry_ms").get<std::int64_t>()};
  } else if (type == "lock_expired") {
    AnnotationTask& t = task_ref(j.at("task_id").get<std::string>());
    t.status = TaskStatus::kOpen;
    t.lock.reset();
  } else if (type == "selection_submitted") {
    AnnotationTask& t = task_ref(j.at("task_id").get<std::string>());
    t.choice = j.at("choice").get<std::string>();
    t.reviewer = j.at("reviewer").get<std::string>();
    t.completed_ms = j.at("at").get<std::int64_t>();
    t.lock.reset();
    if (t.choice == kRejectAll) {
      t.status = TaskStatus::kRejectedAll;
      fallback_[t.image_id] = {"", ""};
    } else {
      t.status = TaskStatus::kCompleted;
    }
  } else if (type == "fallback_imported") {
    fallback_[j.at("image_id").get<std::string>()] = {j.at("mask_ref").get<std::string>(),
                                                      j.at("reviewer").get<std::string>()};
  } else {
    throw ValidationError("unknown event type '" + type + "'");
  }
  seq_ = seq;
}

AnnotationTask& Campaign::task_ref(const std::string& task_id) {
  auto it = task_index_.find(task_id);
  if (it == task_index_.end()) throw NotFoundError("unknown task '" + task_id + "'");
  return tasks_[it->second];
}

void Campaign::expire_locks(std::int64_t now) {
  for (const AnnotationTask& t : tasks_) {
    if (t.status == TaskStatus::kLocked && t.lock && t.lock->expiry_ms <= now) {
      record(json{{"type", "lock_expired"}, {"task_id", t.task_id}, {"at", now}}.dump());
    }
  }
}

std::optional<AnnotationTask> Campaign::next_task(const std::string& reviewer) {
  if (reviewer.empty()) throw ValidationError("reviewer id must not be empty");
  std::lock_guard<std::mutex> g(*mu_);
  const std::int64_t now = clock_();
  expire_locks(now);
  for (const AnnotationTask& t : tasks_) {
    if (t.status == TaskStatus::kLocked && t.lock && t.lock->reviewer == reviewer) return t;
  }
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i].status != TaskStatus::kOpen) continue;
    record(json{{"type", "lock_acquired"},
                {"task_id", tasks_[i].task_id},
                {"reviewer", reviewer},
                {"at", now},
                {"expiry_ms", now + lock_ms_}}
               .dump());
    return tasks_[i];
  }
  return std::nullopt;
}

AnnotationTask Campaign::submit_selection(const Selection& sel) {
  std::lock_guard<std::mutex> g(*mu_);
  const std::int64_t now = sel.timestamp_ms != 0 ? sel.timestamp_ms : clock_();
  AnnotationTask& t = task_ref(sel.task_id);
  if (t.status == TaskStatus::kCompleted || t.status == TaskStatus::kRejectedAll) {
    throw ConflictError("task " + t.task_id + " already has a selection");
  }
  if (sel.choice == kRejectAll) {
    if (!t.allow_reject_all()) {
      throw ValidationError("REJECT_ALL is not allowed for " + to_string(t.stage) + " tasks");
    }
  } else if (std::none_of(t.candidates.begin(), t.candidates.end(),
                          [&](const Candidate& c) { return c.label == sel.choice; })) {
    throw ValidationError("task " + t.task_id + " has no candidate '" + sel.choice + "'");
  }
  expire_locks(now);
  if (t.status != TaskStatus::kLocked || !t.lock || t.lock->reviewer != sel.reviewer) {
    throw ConflictError("task " + t.task_id + " is not locked by reviewer '" + sel.reviewer +
                        "' (stale or missing lock)");
  }
  record(json{{"type", "selection_submitted"},
              {"task_id", t.task_id},
              {"reviewer", sel.reviewer},
              {"choice", sel.choice},
              {"at", now}}
             .dump());
  return task_ref(sel.task_id);
}

void Campaign::import_fallback(const std::string& image_id, const Grid& mask,
                               const std::string& reviewer) {
  std::lock_guard<std::mutex> g(*mu_);
  if (image_index_.count(image_id) == 0) throw NotFoundError("unknown image '" + image_id + "'");
  auto it = fallback_.find(image_id);
  if (it == fallback_.end()) {
    throw ValidationError("image " + image_id + " is not in the manual-fallback queue");
  }
  if (!it->second.first.empty()) {
    throw ConflictError("image " + image_id + " already has a fallback mask");
  }
  const std::string ref = masks_.put(mask);
  record(json{{"type", "fallback_imported"},
              {"image_id", image_id},
              {"mask_ref", ref},
              {"reviewer", reviewer},
              {"at", clock_()}}
             .dump());
}

Progress Campaign::progress() {
  std::lock_guard<std::mutex> g(*mu_);
  expire_locks(clock_());
  Progress p;
  for (const AnnotationTask& t : tasks_) {
    switch (t.status) {
      case TaskStatus::kOpen: ++p.open; break;
      case TaskStatus::kLocked: ++p.locked; break;
      case TaskStatus::kCompleted: ++p.completed; break;
      case TaskStatus::kRejectedAll: ++p.rejected_all; break;
    }
  }
  for (const auto& [id, fb] : fallback_) {
    if (fb.first.empty()) ++p.fallback_pending;
  }
  return p;
}

std::vector<std::string> Campaign::fallback_pending() {
  std::lock_guard<std::mutex> g(*mu_);
  std::vector<std::string> out;
  for (const auto& [id, fb] : fallback_) {
    if (fb.first.empty()) out.push_back(id);
  }
  return out;
}

std::vector<AnnotationTask> Campaign::tasks() {
  std::lock_guard<std::mutex> g(*mu_);
  return tasks_;
}

AnnotationTask Campaign::task(const std::string& task_id) {
  std::lock_guard<std::mutex> g(*mu_);
  return task_ref(task_id);
}

std::optional<std::pair<std::string, std::string>> Campaign::fallback_mask(
    const std::string& image_id) {
  std::lock_guard<std::mutex> g(*mu_);
  auto it = fallback_.find(image_id);
  if (it == fallback_.end() || it->second.first.empty()) return std::nullopt;
  return it->second;
}

std::string Campaign::snapshot_locked() const {
  json tasks = json::array();
  for (const AnnotationTask& t : tasks_) tasks.push_back(task_json(t));
  json fallback = json::object();
  for (const auto& [id, fb] : fallback_) {
    fallback[id] = {{"mask_ref", fb.first}, {"reviewer", fb.second}};
  }
  return json{{"schema_version", 1},
              {"stage", to_string(stage_)},
              {"seed", seed_},
              {"lock_ms", lock_ms_},
              {"seq", seq_},
              {"tasks", tasks},
              {"fallback", fallback}}
      .dump(2);
}

std::string Campaign::snapshot_json() {
  std::lock_guard<std::mutex> g(*mu_);
  return snapshot_locked();
}

void Campaign::write_snapshot_unlocked() {
  const std::string text = snapshot_locked() + "\n";
  write_file(dir_ / kSnapshot,
             std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                           text.size()));
}

void Campaign::write_snapshot() {
  std::lock_guard<std::mutex> g(*mu_);
  write_snapshot_unlocked();
}

std::string task_payload_json(const AnnotationTask& task) {
  json cands = json::array();
  for (const Candidate& c : task.candidates) {
    cands.push_back({{"label", c.label}, {"mask_url", "/api/masks/" + c.mask_ref}});
  }
  return json{{"task_id", task.task_id},
              {"image_url", "/api/images/" + task.image_id},
              {"candidates", cands},
              {"stage", to_string(task.stage)},
              {"allow_reject_all", task.allow_reject_all()}}
      .dump();
}

// ------------------------------------------------------------------ export

ExportResult export_ground_truth(Campaign& campaign, const std::filesystem::path& out_dir) {
  ExportResult result;
  json masks = json::array();
  for (const AnnotationTask& t : campaign.tasks()) {
    ExportedMask m;
    m.image_id = t.image_id;
    m.task_id = t.task_id;
    m.permutation_seed = t.permutation_seed;
    std::string ref;
    if (t.status == TaskStatus::kCompleted) {
      const auto it = std::find_if(t.candidates.begin(), t.candidates.end(),
                                   [&](const Candidate& c) { return c.label == t.choice; });
      ref = it->mask_ref;
      m.provenance = Provenance::kCollaborative;
      m.reviewer = t.reviewer;
      m.chosen_source = it->source;
    } else if (t.status == TaskStatus::kRejectedAll) {
      const auto fb = campaign.fallback_mask(t.image_id);
      if (!fb) {
        result.pending.push_back(t.image_id);
        continue;
      }
      ref = fb->first;
      m.provenance = Provenance::kManual;
      m.reviewer = fb->second;
      m.chosen_source = "manual-fallback";
    } else {
      continue;
    }
    const std::vector<std::uint8_t> bytes = campaign.masks().bytes(ref);
    m.file = "masks/" + t.image_id + ".png";
    m.sha256 = sha256_hex(bytes);
    write_file(out_dir / m.file, bytes);
    masks.push_back({{"image_id", m.image_id},
                     {"file", m.file},
                     {"provenance", to_string(m.provenance)},
                     {"reviewer", m.reviewer},
                     {"task_id", m.task_id},
                     {"chosen_source", m.chosen_source},
                     {"permutation_seed", m.permutation_seed},
                     {"sha256", m.sha256}});
    result.masks.push_back(std::move(m));
  }
  const json manifest = {{"schema_version", 1},
                         {"stage", to_string(campaign.stage())},
                         {"masks", masks},
                         {"pending", result.pending}};
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "manifest.json") << manifest.dump(2) << "\n";
  return result;
}

std::vector<SegMask> import_ground_truth(const std::filesystem::path& out_dir) {
  std::ifstream in(out_dir / "manifest.json");
  if (!in) throw ValidationError("no manifest.json in " + out_dir.string());
  const json manifest = json::parse(in);
  std::vector<SegMask> out;
  for (const json& m : manifest.at("masks")) {
    const std::filesystem::path p = out_dir / m.at("file").get<std::string>();
    const std::vector<std::uint8_t> bytes = read_file(p);
    if (sha256_hex(bytes) != m.at("sha256").get<std::string>()) {
      throw ValidationError("mask " + p.string() + " does not match its manifest hash");
    }
    SegMask s;
    s.image_id = m.at("image_id").get<std::string>();
    s.pixels = raster_to_gray(decode_png(bytes));
    s.provenance = parse_provenance(m.at("provenance").get<std::string>());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cxrinf::annotate
