#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "cxrinf/dataset.hpp"
#include "cxrinf/hashing.hpp"
#include "cxrinf/segmodel.hpp"

namespace cxrinf::seg {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order and assume little-endian");

constexpr char kMagic[8] = {'C', 'X', 'R', 'C', 'K', 'P', 'T', '1'};

json shape_json(const Shape& s) { return json::array({s.n, s.c, s.h, s.w}); }

Shape shape_from(const json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

void write_tensor(std::ofstream& out, const Tensor& t, std::size_t expect) {
  if (t.empty()) {
    const std::vector<double> zeros(expect, 0.0);
    out.write(reinterpret_cast<const char*>(zeros.data()),
              static_cast<std::streamsize>(expect * sizeof(double)));
  } else {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

struct Archive {
  json header;
  std::vector<char> blob;
};

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw ValidationError(path.string() + " is not a checkpoint file (bad magic)");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 30)) throw ValidationError("corrupt checkpoint header in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Archive a;
  try {
    a.header = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  a.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return a;
}

/// Locates each tensor of the archive inside the blob.
struct Entry {
  std::string name;
  Shape shape;
  bool trainable = true;
  std::size_t offset = 0;  // in doubles
};

std::vector<Entry> entries(const Archive& a, const std::filesystem::path& path) {
  std::vector<Entry> out;
  std::size_t offset = 0;
  for (const json& p : a.header.at("params")) {
    Entry e{p.at("name").get<std::string>(), shape_from(p.at("shape")),
            p.value("trainable", true), offset};
    offset += 3 * e.shape.numel();
    out.push_back(std::move(e));
  }
  if (offset * sizeof(double) != a.blob.size()) {
    throw ValidationError("checkpoint " + path.string() + " is truncated or has trailing data");
  }
  return out;
}

void copy_slice(const Archive& a, std::size_t offset, Tensor& dst) {
  std::memcpy(dst.data(), a.blob.data() + offset * sizeof(double), dst.size() * sizeof(double));
}

}  // namespace

void save_checkpoint(const ModelHandle& model, const std::filesystem::path& path) {
  json params = json::array();
  for (const Parameter& p : model.params().all()) {
    params.push_back({{"name", p.name},
                      {"group", p.group},
                      {"shape", shape_json(p.value.shape())},
                      {"trainable", p.trainable}});
  }
  json header = {{"schema_version", kConfigSchemaVersion},
                 {"config", json::parse(config_to_json(model.config()))},
                 {"head", to_string(model.head())},
                 {"provenance", model.provenance()},
                 {"optimizer", {{"kind", "adam"}, {"step", model.adam_step}}},
                 {"epochs_completed", model.epochs_completed},
                 {"params", params}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(len));
    for (const Parameter& p : model.params().all()) {
      write_tensor(out, p.value, p.value.size());
      write_tensor(out, p.adam_m, p.value.size());
      write_tensor(out, p.adam_v, p.value.size());
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelHandle load_checkpoint(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  const int version = a.header.value("schema_version", 0);
  if (version != kConfigSchemaVersion) {
    throw ValidationError("checkpoint " + path.string() + " has unsupported schema_version " +
                          std::to_string(version));
  }
  ModelConfig config = config_from_json(a.header.at("config").dump());
  const std::optional<WeightSource> pretrained = config.pretrained;
  config.pretrained.reset();
  const bool frozen = config.encoder_frozen;
  config.encoder_frozen = false;
  const std::string head = a.header.at("head").get<std::string>();
  ModelHandle model = head == "classifier" ? build_classifier(config)
                                           : build_segmentation_model(config);

  const std::vector<Entry> table = entries(a, path);
  if (table.size() != model.params().all().size()) {
    throw ValidationError("checkpoint " + path.string() + " has " +
                          std::to_string(table.size()) + " tensors, model expects " +
                          std::to_string(model.params().all().size()));
  }
  for (const Entry& e : table) {
    Parameter* p = model.params().find(e.name);
    if (p == nullptr || !(p->value.shape() == e.shape)) {
      throw ValidationError("checkpoint tensor " + e.name + " does not match the model");
    }
    const std::size_t n = e.shape.numel();
    copy_slice(a, e.offset, p->value);
    p->adam_m = Tensor(e.shape);
    p->adam_v = Tensor(e.shape);
    copy_slice(a, e.offset + n, p->adam_m);
    copy_slice(a, e.offset + 2 * n, p->adam_v);
    p->trainable = e.trainable;
  }
  model.mutable_config().pretrained = pretrained;
  model.mutable_config().encoder_frozen = frozen;
  model.set_provenance(a.header.value("provenance", std::string()));
  model.adam_step = a.header.at("optimizer").value("step", std::int64_t{0});
  model.epochs_completed = a.header.value("epochs_completed", 0);
  return model;
}

std::size_t load_encoder_weights(ModelHandle& model, const WeightSource& source) {
  const std::string who = "pretrained weights for encoder '" +
                          to_string(model.config().encoder) + "' (" + source.path + ")";
  if (!std::filesystem::exists(source.path)) {
    throw ValidationError(who + ": file not found");
  }
  if (!source.sha256.empty()) {
    const std::string actual = sha256_file(source.path);
    if (actual != source.sha256) {
      throw ValidationError(who + ": sha256 mismatch, expected " + source.sha256 + " got " +
                            actual);
    }
  }
  Archive a;
  std::vector<Entry> table;
  try {
    a = read_archive(source.path);
    table = entries(a, source.path);
  } catch (const std::exception& e) {
    throw ValidationError(who + ": " + e.what());
  }
  std::size_t copied = 0;
  for (const Entry& e : table) {
    if (e.name.rfind("encoder/", 0) != 0) continue;
    Parameter* p = model.params().find(e.name);
    if (p == nullptr || !(p->value.shape() == e.shape)) {
      throw ValidationError(who + ": tensor " + e.name + " " + e.shape.str() +
                            " is incompatible with this encoder");
    }
    copy_slice(a, e.offset, p->value);
    ++copied;
  }
  if (copied == 0) throw ValidationError(who + ": no encoder tensors found");
  return copied;
}

}  // namespace cxrinf::seg
