#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cxrinf/autodiff.hpp"
#include "cxrinf/rng.hpp"

namespace cxrinf::seg {

enum class DecoderKind { kUnet, kUnetPlusPlus, kDla };
enum class EncoderKind { kDenseNet121, kCheXNet, kInceptionV3, kResNet50 };
enum class Scale { kPaper, kDesk };
enum class HeadKind { kSegmentationSigmoid, kClassifier2Way };

std::string to_string(DecoderKind d);
std::string to_string(EncoderKind e);
std::string to_string(Scale s);
std::string to_string(HeadKind h);
DecoderKind parse_decoder(const std::string& s);
EncoderKind parse_encoder(const std::string& s);
Scale parse_scale(const std::string& s);

/// Local weight file in checkpoint format; `sha256` empty means unchecked.
struct WeightSource {
  std::string path;
  std::string sha256;
};

inline constexpr int kConfigSchemaVersion = 1;

struct ModelConfig {
  DecoderKind decoder = DecoderKind::kUnet;
  EncoderKind encoder = EncoderKind::kDenseNet121;
  bool encoder_frozen = false;
  int input_size = 64;
  Scale scale = Scale::kDesk;
  std::optional<WeightSource> pretrained;
  std::uint64_t init_seed = 0;

  /// Number of stride-2 stages in the encoder.
  int encoder_levels() const { return scale == Scale::kPaper ? 5 : 3; }
  int downsampling_factor() const { return 1 << encoder_levels(); }
  void validate() const;
  std::string name() const;
};

std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& text);

/// Named parameter registry. Insertion order is stable and defines the
/// checkpoint layout.
class ParamStore {
 public:
  std::size_t add(const std::string& name, const std::string& group, Shape shape,
                  double init_limit, Rng& rng);
  Parameter& at(std::size_t i) { return params_.at(i); }
  const Parameter& at(std::size_t i) const { return params_.at(i); }
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// A differentiable network over its own parameter store.
class Network {
 public:
  virtual ~Network() = default;
  /// Input is (N, 1, S, S). Segmentation nets return probabilities
  /// (N, 1, S, S); classifiers return pre-softmax scores (N, 2, 1, 1).
  virtual Var forward(Graph& g, Var input) = 0;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 protected:
  ParamStore params_;
};

struct ParamCounts {
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;
};

/// Built network plus its configuration and optimizer bookkeeping.
class ModelHandle {
 public:
  ModelHandle(ModelConfig config, HeadKind head, std::unique_ptr<Network> net,
              std::string provenance);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  HeadKind head() const { return head_; }
  const std::string& provenance() const { return provenance_; }
  void set_provenance(std::string p) { provenance_ = std::move(p); }
  Network& network() { return *net_; }
  const Network& network() const { return *net_; }
  ParamStore& params() { return net_->params(); }
  const ParamStore& params() const { return net_->params(); }

  Var forward(Graph& g, const Tensor& batch);
  /// Forward pass without gradient bookkeeping.
  Tensor infer(const Tensor& batch);

  std::int64_t adam_step = 0;
  int epochs_completed = 0;

 private:
  ModelConfig config_;
  HeadKind head_;
  std::unique_ptr<Network> net_;
  std::string provenance_;
};

/// Tap holding the encoder's final feature map (the Grad-CAM default layer).
inline constexpr const char* kLastConvTap = "encoder/last_conv";

ModelHandle build_segmentation_model(const ModelConfig& config);
/// Encoder -> global average pooling -> 2-way dense head. `config.decoder` is
/// ignored.
ModelHandle build_classifier(const ModelConfig& config);
ModelHandle build_classifier(EncoderKind encoder, std::optional<WeightSource> pretrained,
                             Scale scale = Scale::kDesk, int input_size = 64,
                             std::uint64_t seed = 0);

void set_encoder_frozen(ModelHandle& model, bool frozen);
ParamCounts count_params(const ModelHandle& model);
/// Parameter counts per top-level group ("encoder", "decoder", "head").
std::map<std::string, std::size_t> count_params_by_group(const ModelHandle& model);

/// Self-describing archive: magic, header JSON (config, head, parameter
/// table, optimizer counters) and raw little-endian weight blobs.
void save_checkpoint(const ModelHandle& model, const std::filesystem::path& path);
ModelHandle load_checkpoint(const std::filesystem::path& path);

/// Copy encoder weights from a checkpoint-format file into `model`.
/// Returns the number of tensors copied.
std::size_t load_encoder_weights(ModelHandle& model, const WeightSource& source);

}  // namespace cxrinf::seg
