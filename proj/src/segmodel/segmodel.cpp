#include "cxrinf/segmodel.hpp"

#include <filesystem>
#include <stdexcept>

#include "json.hpp"

#include "cxrinf/dataset.hpp"
#include "layers.hpp"

namespace cxrinf::seg {

using nlohmann::json;
using detail::Builder;
using detail::Conv;
using detail::Encoder;
using detail::Scope;
using detail::conv_relu;

std::string to_string(DecoderKind d) {
  switch (d) {
    case DecoderKind::kUnet: return "unet";
    case DecoderKind::kUnetPlusPlus: return "unetpp";
    case DecoderKind::kDla: return "dla";
  }
  return "?";
}

std::string to_string(EncoderKind e) {
  switch (e) {
    case EncoderKind::kDenseNet121: return "densenet121";
    case EncoderKind::kCheXNet: return "chexnet";
    case EncoderKind::kInceptionV3: return "inceptionv3";
    case EncoderKind::kResNet50: return "resnet50";
  }
  return "?";
}

std::string to_string(Scale s) { return s == Scale::kPaper ? "paper" : "desk"; }

std::string to_string(HeadKind h) {
  return h == HeadKind::kSegmentationSigmoid ? "segmentation" : "classifier";
}

DecoderKind parse_decoder(const std::string& s) {
  if (s == "unet") return DecoderKind::kUnet;
  if (s == "unetpp" || s == "unet++") return DecoderKind::kUnetPlusPlus;
  if (s == "dla") return DecoderKind::kDla;
  throw ValidationError("unknown decoder '" + s + "' (expected unet, unetpp, dla)");
}

EncoderKind parse_encoder(const std::string& s) {
  if (s == "densenet121") return EncoderKind::kDenseNet121;
  if (s == "chexnet") return EncoderKind::kCheXNet;
  if (s == "inceptionv3") return EncoderKind::kInceptionV3;
  if (s == "resnet50") return EncoderKind::kResNet50;
  throw ValidationError("unknown encoder '" + s +
                        "' (expected densenet121, chexnet, inceptionv3, resnet50)");
}

Scale parse_scale(const std::string& s) {
  if (s == "paper") return Scale::kPaper;
  if (s == "desk") return Scale::kDesk;
  throw ValidationError("unknown scale '" + s + "' (expected paper, desk)");
}

void ModelConfig::validate() const {
  const int f = downsampling_factor();
  if (input_size <= 0 || input_size % f != 0) {
    throw ValidationError("input_size " + std::to_string(input_size) +
                          " must be a positive multiple of " + std::to_string(f) +
                          " for " + to_string(scale) + " scale");
  }
  if (pretrained && pretrained->path.empty()) {
    throw ValidationError("pretrained weight source has an empty path");
  }
}

std::string ModelConfig::name() const {
  return to_string(decoder) + "-" + to_string(encoder);
}

namespace {

json config_json(const ModelConfig& c) {
  json j = {{"schema_version", kConfigSchemaVersion},
            {"decoder", to_string(c.decoder)},
            {"encoder", to_string(c.encoder)},
            {"encoder_frozen", c.encoder_frozen},
            {"input_size", c.input_size},
            {"scale", to_string(c.scale)},
            {"init_seed", c.init_seed}};
  if (c.pretrained) {
    j["pretrained"] = {{"path", c.pretrained->path}, {"sha256", c.pretrained->sha256}};
  } else {
    j["pretrained"] = nullptr;
  }
  return j;
}

ModelConfig config_from(const json& j) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  const int version = j.value("schema_version", 0);
  if (version != kConfigSchemaVersion) {
    throw ValidationError("unsupported model config schema_version " +
                          std::to_string(version));
  }
  ModelConfig c;
  c.decoder = parse_decoder(j.at("decoder").get<std::string>());
  c.encoder = parse_encoder(j.at("encoder").get<std::string>());
  c.encoder_frozen = j.value("encoder_frozen", false);
  c.input_size = j.at("input_size").get<int>();
  c.scale = parse_scale(j.value("scale", std::string("desk")));
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  if (j.contains("pretrained") && !j["pretrained"].is_null()) {
    c.pretrained = WeightSource{j["pretrained"].at("path").get<std::string>(),
                                j["pretrained"].value("sha256", std::string())};
  }
  return c;
}

}  // namespace

std::string config_to_json(const ModelConfig& c) { return config_json(c).dump(2); }

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("model config is not valid JSON: ") + e.what());
  }
  try {
    return config_from(j);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed model config: ") + e.what());
  }
}

// ------------------------------------------------------------ ParamStore

std::size_t ParamStore::add(const std::string& name, const std::string& group, Shape shape,
                            double init_limit, Rng& rng) {
  if (index_.count(name) != 0) throw std::logic_error("duplicate parameter " + name);
  Parameter p;
  p.name = name;
  p.group = group;
  p.value = Tensor(shape);
  if (init_limit > 0.0) {
    for (double& v : p.value.values()) v = rng.uniform(-init_limit, init_limit);
  }
  params_.push_back(std::move(p));
  index_[name] = params_.size() - 1;
  return params_.size() - 1;
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

// -------------------------------------------------------------- decoders

namespace {

std::vector<int> decoder_widths(Scale scale, int levels) {
  std::vector<int> d;
  for (int i = 0; i < levels; ++i) {
    const int paper = 16 << i;
    d.push_back(scale == Scale::kPaper ? paper : std::max(8, paper / 8));
  }
  return d;
}

struct ConvPair {
  Conv a, b;
  Var operator()(ParamStore& ps, Var x) const {
    return conv_relu(b, ps, conv_relu(a, ps, x));
  }
};

ConvPair conv_pair(Builder& b, const std::string& name, int in, int out) {
  Scope s(b, name);
  return {b.conv("conv_a", in, out, 3), b.conv("conv_b", out, out, 3)};
}

class SegNet : public Network {
 public:
  Var forward(Graph& g, Var input) override {
    std::vector<Var> feats = encoder_->forward(params_, input);
    Var d = decode(feats);
    g.tag("decoder/out", d);
    Var logits = head_(params_, d);
    g.tag("head/logits", logits);
    Var prob = nn::sigmoid(logits);
    g.tag("head/prob", prob);
    return prob;
  }

  std::string describe() const { return describe_decoder() + "+" + encoder_->describe(); }

 protected:
  virtual Var decode(const std::vector<Var>& feats) = 0;
  virtual std::string describe_decoder() const = 0;

  void build_head(Builder& b, int in) {
    b.set_group("head");
    head_ = b.conv("conv1x1", in, 1, 1);
  }

  std::unique_ptr<Encoder> encoder_;
  Conv head_;
};

class UnetNet final : public SegNet {
 public:
  UnetNet(EncoderKind ek, Scale scale, std::uint64_t seed) {
    Builder b(params_, seed);
    encoder_ = detail::make_encoder(ek, scale, b);
    const auto& c = encoder_->channels();
    const int L = encoder_->levels();
    const auto d = decoder_widths(scale, L);
    b.set_group("decoder");
    blocks_.resize(L);
    for (int i = L - 1; i >= 0; --i) {
      const int below = i == L - 1 ? c[L] : d[i + 1];
      blocks_[i] = conv_pair(b, "up" + std::to_string(i), c[i] + below, d[i]);
    }
    build_head(b, d[0]);
  }

 protected:
  Var decode(const std::vector<Var>& f) override {
    const int L = static_cast<int>(f.size()) - 1;
    Var x = f[L];
    for (int i = L - 1; i >= 0; --i) {
      x = blocks_[i](params_, nn::concat({f[i], nn::upsample_nearest(x, 2)}));
    }
    return x;
  }
  std::string describe_decoder() const override { return "unet"; }

 private:
  std::vector<ConvPair> blocks_;
};

// Nested decoder: node (i, j) sees every earlier node on row i plus the
// upsampled node (i + 1, j - 1).
class UnetPPNet final : public SegNet {
 public:
  UnetPPNet(EncoderKind ek, Scale scale, std::uint64_t seed) {
    Builder b(params_, seed);
    encoder_ = detail::make_encoder(ek, scale, b);
    const auto& c = encoder_->channels();
    const int L = encoder_->levels();
    const auto d = decoder_widths(scale, L);
    auto width_of = [&](int i, int j) { return j == 0 ? c[i] : d[i]; };
    b.set_group("decoder");
    nodes_.assign(L, std::vector<ConvPair>(L + 1));
    for (int j = 1; j <= L; ++j) {
      for (int i = 0; i + j <= L; ++i) {
        int in = width_of(i + 1, j - 1);
        for (int k = 0; k < j; ++k) in += width_of(i, k);
        nodes_[i][j] =
            conv_pair(b, "x" + std::to_string(i) + "_" + std::to_string(j), in, d[i]);
      }
    }
    build_head(b, d[0]);
  }

 protected:
  Var decode(const std::vector<Var>& f) override {
    const int L = static_cast<int>(f.size()) - 1;
    std::vector<std::vector<Var>> x(L + 1, std::vector<Var>(L + 1, nullptr));
    for (int i = 0; i <= L; ++i) x[i][0] = f[i];
    for (int j = 1; j <= L; ++j) {
      for (int i = 0; i + j <= L; ++i) {
        std::vector<Var> parts(x[i].begin(), x[i].begin() + j);
        parts.push_back(nn::upsample_nearest(x[i + 1][j - 1], 2));
        x[i][j] = nodes_[i][j](params_, nn::concat(parts));
      }
    }
    return x[0][L];
  }
  std::string describe_decoder() const override { return "unetpp"; }

 private:
  std::vector<std::vector<ConvPair>> nodes_;
};

// Iterative deep aggregation: pass p merges every level above target level
// t = L - 1 - p down by one step, so the deepest features are refined L times
// before reaching full resolution.
class DlaNet final : public SegNet {
 public:
  DlaNet(EncoderKind ek, Scale scale, std::uint64_t seed) {
    Builder b(params_, seed);
    encoder_ = detail::make_encoder(ek, scale, b);
    const auto& c = encoder_->channels();
    const int L = encoder_->levels();
    auto d = decoder_widths(scale, L);
    d.push_back(2 * d.back());
    b.set_group("decoder");
    for (int i = 0; i <= L; ++i) {
      adapters_.push_back(b.conv("adapt" + std::to_string(i), c[i], d[i], 3));
    }
    for (int p = 0; p < L; ++p) {
      const int t = L - 1 - p;
      Scope s(b, "ida" + std::to_string(p));
      std::vector<Step> steps;
      for (int i = t + 1; i <= L; ++i) {
        Scope n(b, "node" + std::to_string(i));
        steps.push_back({b.conv("proj", d[t + 1], d[t], 3), b.conv("merge", d[t], d[t], 3)});
      }
      passes_.push_back(std::move(steps));
    }
    node_count_ = L * (L + 1) / 2;
    build_head(b, d[0]);
  }

 protected:
  Var decode(const std::vector<Var>& f) override {
    const int L = static_cast<int>(f.size()) - 1;
    std::vector<Var> layers;
    for (int i = 0; i <= L; ++i) layers.push_back(conv_relu(adapters_[i], params_, f[i]));
    for (int p = 0; p < L; ++p) {
      const int t = L - 1 - p;
      for (int i = t + 1; i <= L; ++i) {
        const Step& s = passes_[p][i - t - 1];
        Var up = nn::upsample_nearest(conv_relu(s.proj, params_, layers[i]), 2);
        layers[i] = conv_relu(s.merge, params_, nn::add(up, layers[i - 1]));
      }
    }
    return layers[L];
  }
  std::string describe_decoder() const override {
    return "dla(ida-up, " + std::to_string(node_count_) + " aggregation nodes)";
  }

 private:
  struct Step {
    Conv proj, merge;
  };
  std::vector<Conv> adapters_;
  std::vector<std::vector<Step>> passes_;
  int node_count_ = 0;
};

class ClassifierNet final : public Network {
 public:
  ClassifierNet(EncoderKind ek, Scale scale, std::uint64_t seed) {
    Builder b(params_, seed);
    encoder_ = detail::make_encoder(ek, scale, b);
    b.set_group("head");
    fc_ = b.dense("fc", encoder_->channels().back(), 2);
  }

  Var forward(Graph& g, Var input) override {
    std::vector<Var> feats = encoder_->forward(params_, input);
    Var logits = fc_(params_, nn::global_avg_pool(feats.back()));
    g.tag("head/logits", logits);
    return logits;
  }

  std::string describe() const { return "gap+dense2+" + encoder_->describe(); }

 private:
  std::unique_ptr<Encoder> encoder_;
  detail::Dense fc_;
};

std::string encoder_provenance(const ModelConfig& c, std::size_t loaded) {
  if (c.pretrained) {
    return "encoder weights from " + c.pretrained->path + " (" + std::to_string(loaded) +
           " tensors)";
  }
  if (c.encoder == EncoderKind::kCheXNet) {
    return "chexnet: no pretrained weights supplied; densenet121 topology with random "
           "initialization (seed " + std::to_string(c.init_seed) + ")";
  }
  return "random initialization (seed " + std::to_string(c.init_seed) + ")";
}

ModelHandle finish(ModelConfig config, HeadKind head, std::unique_ptr<Network> net,
                   const std::string& arch) {
  ModelHandle h(std::move(config), head, std::move(net), arch);
  std::size_t loaded = 0;
  if (h.config().pretrained) loaded = load_encoder_weights(h, *h.config().pretrained);
  if (h.config().encoder_frozen) set_encoder_frozen(h, true);
  h.set_provenance(arch + "; " + encoder_provenance(h.config(), loaded));
  return h;
}

}  // namespace

// ----------------------------------------------------------- ModelHandle

ModelHandle::ModelHandle(ModelConfig config, HeadKind head, std::unique_ptr<Network> net,
                         std::string provenance)
    : config_(std::move(config)),
      head_(head),
      net_(std::move(net)),
      provenance_(std::move(provenance)) {}

Var ModelHandle::forward(Graph& g, const Tensor& batch) {
  const Shape s = batch.shape();
  if (s.c != 1 || s.h != config_.input_size || s.w != config_.input_size) {
    throw ValidationError("model expects (N, 1, " + std::to_string(config_.input_size) +
                          ", " + std::to_string(config_.input_size) + ") input, got " +
                          s.str());
  }
  return net_->forward(g, g.constant(batch));
}

Tensor ModelHandle::infer(const Tensor& batch) {
  Graph g(GradMode::kNone);
  return forward(g, batch)->value;
}

ModelHandle build_segmentation_model(const ModelConfig& config) {
  config.validate();
  std::unique_ptr<SegNet> net;
  switch (config.decoder) {
    case DecoderKind::kUnet:
      net = std::make_unique<UnetNet>(config.encoder, config.scale, config.init_seed);
      break;
    case DecoderKind::kUnetPlusPlus:
      net = std::make_unique<UnetPPNet>(config.encoder, config.scale, config.init_seed);
      break;
    case DecoderKind::kDla:
      net = std::make_unique<DlaNet>(config.encoder, config.scale, config.init_seed);
      break;
  }
  const std::string arch = net->describe();
  return finish(config, HeadKind::kSegmentationSigmoid, std::move(net), arch);
}

ModelHandle build_classifier(const ModelConfig& config) {
  config.validate();
  auto net = std::make_unique<ClassifierNet>(config.encoder, config.scale, config.init_seed);
  const std::string arch = net->describe();
  return finish(config, HeadKind::kClassifier2Way, std::move(net), arch);
}

ModelHandle build_classifier(EncoderKind encoder, std::optional<WeightSource> pretrained,
                             Scale scale, int input_size, std::uint64_t seed) {
  ModelConfig c;
  c.encoder = encoder;
  c.pretrained = std::move(pretrained);
  c.scale = scale;
  c.input_size = input_size;
  c.init_seed = seed;
  return build_classifier(c);
}

void set_encoder_frozen(ModelHandle& model, bool frozen) {
  for (Parameter& p : model.params().all()) {
    if (p.group == "encoder") p.trainable = !frozen;
  }
  model.mutable_config().encoder_frozen = frozen;
}

ParamCounts count_params(const ModelHandle& model) {
  ParamCounts c;
  for (const Parameter& p : model.params().all()) {
    (p.trainable ? c.trainable : c.non_trainable) += p.value.size();
  }
  return c;
}

std::map<std::string, std::size_t> count_params_by_group(const ModelHandle& model) {
  std::map<std::string, std::size_t> out;
  for (const Parameter& p : model.params().all()) out[p.group] += p.value.size();
  return out;
}

}  // namespace cxrinf::seg
