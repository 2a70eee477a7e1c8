#include <algorithm>
#include <optional>
#include <stdexcept>

#include "layers.hpp"

namespace cxrinf::seg::detail {
namespace {

// Widths shrink by this factor at desk scale and block repeats are capped.
constexpr int kDeskDivisor = 8;
constexpr int kDeskMaxBlocks = 2;

int width(Scale s, int paper) {
  return s == Scale::kPaper ? paper : std::max(2, paper / kDeskDivisor);
}

int repeats(Scale s, int paper) {
  return s == Scale::kPaper ? paper : std::min(paper, kDeskMaxBlocks);
}

int level_count(Scale s) { return s == Scale::kPaper ? 5 : 3; }

void tag_levels(Graph& g, const std::vector<Var>& feats) {
  for (std::size_t i = 0; i < feats.size(); ++i) {
    g.tag("encoder/level" + std::to_string(i), feats[i]);
  }
  g.tag(kLastConvTap, feats.back());
}

// ---------------------------------------------------------------- DenseNet

struct DenseLayer {
  Conv bottleneck;
  Conv conv;
};

struct DenseStage {
  std::optional<Conv> transition;  // absent for the first dense block
  std::vector<DenseLayer> layers;
};

class DenseNetEncoder final : public Encoder {
 public:
  DenseNetEncoder(Scale scale, Builder& b, std::string name) : name_(std::move(name)) {
    const int growth = width(scale, 32);
    const int w0 = width(scale, 32);
    int c = width(scale, 64);
    const int blocks[] = {6, 12, 24, 16};
    const int levels = level_count(scale);

    stem0_ = b.conv("stem0", 1, w0, 3);
    stem1_ = b.conv("stem1", w0, c, 3, 2);
    channels_ = {w0, c};
    for (int level = 2; level <= levels; ++level) {
      Scope s(b, "block" + std::to_string(level - 1));
      DenseStage stage;
      if (level > 2) {
        stage.transition = b.conv("transition", c, c / 2, 1);
        c /= 2;
      }
      const int n = repeats(scale, blocks[level - 2]);
      for (int i = 0; i < n; ++i) {
        Scope l(b, "layer" + std::to_string(i));
        DenseLayer layer;
        layer.bottleneck = b.conv("conv1x1", c, 4 * growth, 1);
        layer.conv = b.conv("conv3x3", 4 * growth, growth, 3);
        stage.layers.push_back(layer);
        c += growth;
      }
      stages_.push_back(std::move(stage));
      channels_.push_back(c);
    }
  }

  std::vector<Var> forward(ParamStore& ps, Var x) const override {
    std::vector<Var> feats;
    Var h = conv_relu(stem0_, ps, x);
    feats.push_back(h);
    h = conv_relu(stem1_, ps, h);
    feats.push_back(h);
    for (const DenseStage& stage : stages_) {
      if (stage.transition) {
        h = conv_relu(*stage.transition, ps, h);
        h = nn::avg_pool(h, 2, 2, 0);
      } else {
        h = nn::max_pool(h, 2, 2, 0);
      }
      for (const DenseLayer& layer : stage.layers) {
        Var y = conv_relu(layer.bottleneck, ps, h);
        y = conv_relu(layer.conv, ps, y);
        h = nn::concat({h, y});
      }
      feats.push_back(h);
    }
    tag_levels(*x->graph, feats);
    return feats;
  }

  std::string describe() const override { return name_; }

 private:
  std::string name_;
  Conv stem0_, stem1_;
  std::vector<DenseStage> stages_;
};

// ------------------------------------------------------------------ ResNet

struct Bottleneck {
  Conv reduce;
  Conv conv;
  Conv expand;
  std::optional<Conv> shortcut;
};

class ResNetEncoder final : public Encoder {
 public:
  ResNetEncoder(Scale scale, Builder& b) {
    const int w0 = width(scale, 32);
    int c = width(scale, 64);
    const int blocks[] = {3, 4, 6, 3};
    const int widths[] = {64, 128, 256, 512};
    const int levels = level_count(scale);

    stem0_ = b.conv("stem0", 1, w0, 3);
    stem1_ = b.conv("stem1", w0, c, 3, 2);
    channels_ = {w0, c};
    for (int level = 2; level <= levels; ++level) {
      Scope s(b, "stage" + std::to_string(level - 1));
      const int mid = width(scale, widths[level - 2]);
      const int out = 4 * mid;
      std::vector<Bottleneck> stage;
      const int n = repeats(scale, blocks[level - 2]);
      for (int i = 0; i < n; ++i) {
        Scope l(b, "unit" + std::to_string(i));
        const int stride = (i == 0 && level > 2) ? 2 : 1;
        Bottleneck u;
        u.reduce = b.conv("conv1x1a", c, mid, 1);
        u.conv = b.conv("conv3x3", mid, mid, 3, stride);
        u.expand = b.conv("conv1x1b", mid, out, 1);
        if (i == 0) u.shortcut = b.conv("shortcut", c, out, 1, stride);
        stage.push_back(u);
        c = out;
      }
      stages_.push_back(std::move(stage));
      channels_.push_back(c);
    }
  }

  std::vector<Var> forward(ParamStore& ps, Var x) const override {
    std::vector<Var> feats;
    Var h = conv_relu(stem0_, ps, x);
    feats.push_back(h);
    h = conv_relu(stem1_, ps, h);
    feats.push_back(h);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s == 0) h = nn::max_pool(h, 2, 2, 0);
      for (const Bottleneck& u : stages_[s]) {
        Var y = conv_relu(u.reduce, ps, h);
        y = conv_relu(u.conv, ps, y);
        y = u.expand(ps, y);
        Var skip = u.shortcut ? (*u.shortcut)(ps, h) : h;
        h = nn::relu(nn::add(y, skip));
      }
      feats.push_back(h);
    }
    tag_levels(*x->graph, feats);
    return feats;
  }

  std::string describe() const override { return "resnet50"; }

 private:
  Conv stem0_, stem1_;
  std::vector<std::vector<Bottleneck>> stages_;
};

// --------------------------------------------------------------- Inception

struct InceptionModule {
  Conv b1;
  Conv b3_reduce, b3;
  Conv b33_reduce, b33_a, b33_b;
  Conv pool_proj;
};

class InceptionEncoder final : public Encoder {
 public:
  InceptionEncoder(Scale scale, Builder& b) {
    const int w0 = width(scale, 32);
    const int levels = level_count(scale);
    const std::vector<std::vector<int>> module_widths = {
        {256, 288, 288}, {768, 768, 768, 768}, {1280, 2048}};

    stem0_ = b.conv("stem0", 1, w0, 3);
    stem1a_ = b.conv("stem1a", w0, width(scale, 32), 3, 2);
    stem1b_ = b.conv("stem1b", width(scale, 32), width(scale, 64), 3);
    stem2a_ = b.conv("stem2a", width(scale, 64), width(scale, 80), 1);
    stem2b_ = b.conv("stem2b", width(scale, 80), width(scale, 192), 3);
    int c = width(scale, 192);
    channels_ = {w0, width(scale, 64), c};
    for (int level = 3; level <= levels; ++level) {
      Scope s(b, "mixed" + std::to_string(level - 2));
      const auto& outs = module_widths[level - 3];
      const int n = repeats(scale, static_cast<int>(outs.size()));
      std::vector<InceptionModule> stage;
      for (int i = 0; i < n; ++i) {
        Scope l(b, "module" + std::to_string(i));
        // Desk scale keeps the last modules so the output width matches.
        const int out = width(scale, outs[outs.size() - n + i]);
        const int w1 = out / 4;
        const int w3 = out * 3 / 8;
        const int w33 = out / 4;
        const int wp = out - w1 - w3 - w33;
        InceptionModule m;
        m.b1 = b.conv("branch1x1", c, w1, 1);
        m.b3_reduce = b.conv("branch3x3_reduce", c, std::max(1, out / 4), 1);
        m.b3 = b.conv("branch3x3", std::max(1, out / 4), w3, 3);
        m.b33_reduce = b.conv("branch3x3dbl_reduce", c, std::max(1, out / 8), 1);
        m.b33_a = b.conv("branch3x3dbl_a", std::max(1, out / 8), w33, 3);
        m.b33_b = b.conv("branch3x3dbl_b", w33, w33, 3);
        m.pool_proj = b.conv("branch_pool", c, wp, 1);
        stage.push_back(m);
        c = out;
      }
      stages_.push_back(std::move(stage));
      channels_.push_back(c);
    }
  }

  std::vector<Var> forward(ParamStore& ps, Var x) const override {
    std::vector<Var> feats;
    Var h = conv_relu(stem0_, ps, x);
    feats.push_back(h);
    h = conv_relu(stem1a_, ps, h);
    h = conv_relu(stem1b_, ps, h);
    feats.push_back(h);
    h = nn::max_pool(h, 2, 2, 0);
    h = conv_relu(stem2a_, ps, h);
    h = conv_relu(stem2b_, ps, h);
    feats.push_back(h);
    for (const auto& stage : stages_) {
      h = nn::max_pool(h, 2, 2, 0);
      for (const InceptionModule& m : stage) {
        Var a = conv_relu(m.b1, ps, h);
        Var b3 = conv_relu(m.b3, ps, conv_relu(m.b3_reduce, ps, h));
        Var b33 = conv_relu(m.b33_reduce, ps, h);
        b33 = conv_relu(m.b33_b, ps, conv_relu(m.b33_a, ps, b33));
        Var p = conv_relu(m.pool_proj, ps, nn::avg_pool(h, 3, 1, 1));
        h = nn::concat({a, b3, b33, p});
      }
      feats.push_back(h);
    }
    tag_levels(*x->graph, feats);
    return feats;
  }

  std::string describe() const override { return "inceptionv3"; }

 private:
  Conv stem0_, stem1a_, stem1b_, stem2a_, stem2b_;
  std::vector<std::vector<InceptionModule>> stages_;
};

}  // namespace

std::unique_ptr<Encoder> make_encoder(EncoderKind kind, Scale scale, Builder& b) {
  b.set_group("encoder");
  switch (kind) {
    case EncoderKind::kDenseNet121:
      return std::make_unique<DenseNetEncoder>(scale, b, "densenet121");
    case EncoderKind::kCheXNet:
      return std::make_unique<DenseNetEncoder>(scale, b, "chexnet");
    case EncoderKind::kResNet50:
      return std::make_unique<ResNetEncoder>(scale, b);
    case EncoderKind::kInceptionV3:
      return std::make_unique<InceptionEncoder>(scale, b);
  }
  throw std::invalid_argument("unknown encoder kind");
}

}  // namespace cxrinf::seg::detail
