#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossfi/defaults.hpp"
#include "crossfi/nn.hpp"

namespace crossfi {

enum class EncoderVariant { paper_resnet18, tiny_residual };
enum class EncoderInit { random_documented, imported_pretrained };

EncoderVariant parse_encoder_variant(const std::string& s);
std::string to_string(EncoderVariant v);
EncoderInit parse_encoder_init(const std::string& s);
std::string to_string(EncoderInit v);

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::tiny_residual;
  std::size_t d1 = defaults::kTinyD1;
  EncoderInit init = EncoderInit::random_documented;
  // Archive of ImageNet-style ResNet-18 weights (torchvision names) used
  // when init == imported_pretrained.
  std::string pretrained_path;

  void validate() const;
  // Natural embedding width per variant: 512 for ResNet-18, 64 for tiny.
  static std::size_t default_d1(EncoderVariant v);

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Shared twin feature extractor: [b, 2, t, D] -> [b, d1].
class Encoder {
 public:
  Encoder(const EncoderConfig& config, std::size_t t, std::size_t d, Rng& rng);
  ~Encoder();
  Encoder(Encoder&&) noexcept;
  Encoder& operator=(Encoder&&) noexcept;

  ag::Var forward(const ag::Var& x);
  ag::Var forward(const Tensor& x) { return forward(ag::constant(x)); }

  // Evaluation mode freezes normalization statistics.
  void set_training(bool training) { training_ = training; }
  bool training() const noexcept { return training_; }

  const EncoderConfig& config() const noexcept { return config_; }
  std::size_t t() const noexcept { return t_; }
  std::size_t d() const noexcept { return d_; }

  nn::ParamList parameters() const;
  nn::BufferList buffers();

  // Loads 3-channel image weights from an archive; the first convolution
  // kernel is averaged over its input channels and replicated to 2.
  void import_pretrained(const std::filesystem::path& path);

 private:
  struct Impl;
  EncoderConfig config_;
  std::size_t t_, d_;
  bool training_ = true;
  std::unique_ptr<Impl> impl_;
};

}  // namespace crossfi
