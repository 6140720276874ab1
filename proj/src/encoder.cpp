#include "crossfi/encoder.hpp"

#include <spdlog/spdlog.h>

#include "crossfi/archive.hpp"
#include "crossfi/error.hpp"

namespace crossfi {

EncoderVariant parse_encoder_variant(const std::string& s) {
  if (s == "tiny-residual") return EncoderVariant::tiny_residual;
  if (s == "paper-resnet18") return EncoderVariant::paper_resnet18;
  throw ConfigError("unknown encoder variant '" + s + "'");
}

std::string to_string(EncoderVariant v) {
  return v == EncoderVariant::tiny_residual ? "tiny-residual" : "paper-resnet18";
}

EncoderInit parse_encoder_init(const std::string& s) {
  if (s == "random-documented") return EncoderInit::random_documented;
  if (s == "imported-pretrained") return EncoderInit::imported_pretrained;
  throw ConfigError("unknown encoder init '" + s + "'");
}

std::string to_string(EncoderInit v) {
  return v == EncoderInit::random_documented ? "random-documented" : "imported-pretrained";
}

std::size_t EncoderConfig::default_d1(EncoderVariant v) {
  return v == EncoderVariant::paper_resnet18 ? defaults::kResNetD1 : defaults::kTinyD1;
}

void EncoderConfig::validate() const {
  if (d1 < 2) throw ConfigError("encoder d1 must be >= 2");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"variant", to_string(variant)}, {"d1", d1}, {"init", to_string(init)},
          {"pretrained_path", pretrained_path}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.variant = parse_encoder_variant(j.value("variant", to_string(c.variant)));
  c.d1 = j.value("d1", EncoderConfig::default_d1(c.variant));
  c.init = parse_encoder_init(j.value("init", to_string(c.init)));
  c.pretrained_path = j.value("pretrained_path", std::string());
  c.validate();
  return c;
}

namespace {

// conv3x3 -> [bn] -> relu -> conv3x3 -> [bn] (+ shortcut) -> relu
struct ResidualBlock {
  nn::Conv2d conv1, conv2, down;
  std::optional<nn::BatchNorm2d> bn1, bn2, down_bn;
  bool has_down = false;

  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, bool batch_norm, Rng& rng) {
    const bool bias = !batch_norm;
    conv1 = nn::Conv2d(in, out, 3, stride, 1, bias, rng);
    // Without normalization the residual branch starts damped.
    conv2 = nn::Conv2d(out, out, 3, 1, 1, bias, rng, batch_norm ? std::sqrt(2.0) : 0.5);
    if (batch_norm) {
      bn1.emplace(out);
      bn2.emplace(out);
    }
    if (stride != 1 || in != out) {
      has_down = true;
      down = nn::Conv2d(in, out, 1, stride, 0, bias, rng, 1.0);
      if (batch_norm) down_bn.emplace(out);
    }
  }

  ag::Var forward(const ag::Var& x, bool training) {
    ag::Var h = conv1(x);
    if (bn1) h = (*bn1)(h, training);
    h = ag::relu(h);
    h = conv2(h);
    if (bn2) h = (*bn2)(h, training);
    ag::Var skip = x;
    if (has_down) {
      skip = down(x);
      if (down_bn) skip = (*down_bn)(skip, training);
    }
    return ag::relu(ag::add(h, skip));
  }

  void collect(const std::string& p, nn::ParamList& out) const {
    conv1.collect(p + ".conv1", out);
    if (bn1) bn1->collect(p + ".bn1", out);
    conv2.collect(p + ".conv2", out);
    if (bn2) bn2->collect(p + ".bn2", out);
    if (has_down) {
      down.collect(p + ".downsample.0", out);
      if (down_bn) down_bn->collect(p + ".downsample.1", out);
    }
  }

  void collect_buffers(const std::string& p, nn::BufferList& out) {
    if (bn1) bn1->collect_buffers(p + ".bn1", out);
    if (bn2) bn2->collect_buffers(p + ".bn2", out);
    if (down_bn) down_bn->collect_buffers(p + ".downsample.1", out);
  }
};

}  // namespace

struct Encoder::Impl {
  EncoderVariant variant;
  nn::Conv2d stem;
  std::optional<nn::BatchNorm2d> stem_bn;
  std::vector<std::pair<std::string, ResidualBlock>> blocks;
  std::optional<nn::Linear> embed;
};

Encoder::Encoder(const EncoderConfig& config, std::size_t t, std::size_t d, Rng& rng)
    : config_(config), t_(t), d_(d), impl_(std::make_unique<Impl>()) {
  config_.validate();
  if (t < 1 || d < 1) throw DimensionError("encoder input must have t >= 1 and D >= 1");
  impl_->variant = config.variant;
  std::size_t features = 0;
  if (config.variant == EncoderVariant::tiny_residual) {
    impl_->stem = nn::Conv2d(2, 24, 3, 2, 1, true, rng);
    impl_->blocks.emplace_back("layer1.0", ResidualBlock(24, 24, 1, false, rng));
    impl_->blocks.emplace_back("layer2.0", ResidualBlock(24, 48, 2, false, rng));
    features = 48;
    impl_->embed.emplace(features, config.d1, rng);
  } else {
    impl_->stem = nn::Conv2d(2, 64, 7, 2, 3, false, rng);
    impl_->stem_bn.emplace(64);
    const std::size_t widths[4] = {64, 128, 256, 512};
    std::size_t in = 64;
    for (std::size_t layer = 0; layer < 4; ++layer) {
      for (std::size_t b = 0; b < 2; ++b) {
        const std::size_t stride = (layer > 0 && b == 0) ? 2 : 1;
        impl_->blocks.emplace_back("layer" + std::to_string(layer + 1) + "." + std::to_string(b),
                                   ResidualBlock(in, widths[layer], stride, true, rng));
        in = widths[layer];
      }
    }
    features = 512;
    if (config.d1 != features) impl_->embed.emplace(features, config.d1, rng);
  }

  if (config.init == EncoderInit::imported_pretrained) {
    if (!config.pretrained_path.empty() && std::filesystem::exists(config.pretrained_path)) {
      import_pretrained(config.pretrained_path);
    } else {
      spdlog::warn("pretrained weights '{}' unavailable; using fan-in scaled random init",
                   config.pretrained_path);
    }
  }
}

Encoder::~Encoder() = default;
Encoder::Encoder(Encoder&&) noexcept = default;
Encoder& Encoder::operator=(Encoder&&) noexcept = default;

ag::Var Encoder::forward(const ag::Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 2 || s[2] != t_ || s[3] != d_) {
    throw DimensionError("encoder built for [b x 2 x " + std::to_string(t_) + " x " +
                         std::to_string(d_) + "], got " + shape_str(s));
  }
  ag::Var h = impl_->stem(x);
  if (impl_->stem_bn) h = (*impl_->stem_bn)(h, training_);
  h = ag::relu(h);
  if (impl_->variant == EncoderVariant::paper_resnet18) h = ag::max_pool2d(h, 3, 2, 1);
  for (auto& [name, block] : impl_->blocks) h = block.forward(h, training_);
  h = ag::global_avg_pool(h);
  if (impl_->embed) h = (*impl_->embed)(h);
  return h;
}

nn::ParamList Encoder::parameters() const {
  nn::ParamList out;
  impl_->stem.collect("conv1", out);
  if (impl_->stem_bn) impl_->stem_bn->collect("bn1", out);
  for (const auto& [name, block] : impl_->blocks) block.collect(name, out);
  if (impl_->embed) impl_->embed->collect("embed", out);
  return out;
}

nn::BufferList Encoder::buffers() {
  nn::BufferList out;
  if (impl_->stem_bn) impl_->stem_bn->collect_buffers("bn1", out);
  for (auto& [name, block] : impl_->blocks) block.collect_buffers(name, out);
  return out;
}

void Encoder::import_pretrained(const std::filesystem::path& path) {
  if (config_.variant != EncoderVariant::paper_resnet18) {
    throw ConfigError("pretrained import is only defined for the paper-resnet18 variant");
  }
  const Archive archive = Archive::load(path);
  std::size_t loaded = 0;
  for (auto& p : parameters()) {
    if (!archive.has(p.name)) continue;
    const Tensor& src = archive.array(p.name);
    Tensor& dst = p.var.mutable_value();
    if (src.shape() == dst.shape()) {
      dst = src;
    } else if (p.name == "conv1.weight" && src.rank() == 4 && dst.rank() == 4 &&
               src.dim(0) == dst.dim(0) && src.dim(2) == dst.dim(2) && src.dim(3) == dst.dim(3)) {
      // Channel surgery: mean over the pretrained input channels, copied to
      // each of the 2 CSI channels.
      const std::size_t out_c = src.dim(0), in_c = src.dim(1), kk = src.dim(2) * src.dim(3);
      for (std::size_t o = 0; o < out_c; ++o) {
        for (std::size_t j = 0; j < kk; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < in_c; ++c) acc += src[(o * in_c + c) * kk + j];
          for (std::size_t c = 0; c < dst.dim(1); ++c) dst[(o * dst.dim(1) + c) * kk + j] = acc / static_cast<double>(in_c);
        }
      }
    } else {
      throw DimensionError("pretrained array '" + p.name + "' has shape " + shape_str(src.shape()) +
                           ", expected " + shape_str(dst.shape()));
    }
    ++loaded;
  }
  for (auto& b : buffers()) {
    if (archive.has(b.name) && archive.array(b.name).shape() == b.tensor->shape()) {
      *b.tensor = archive.array(b.name);
    }
  }
  spdlog::info("imported {} pretrained parameter arrays from {}", loaded, path.string());
}

}  // namespace crossfi
