#pragma once

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "crossfi/defaults.hpp"
#include "crossfi/autograd.hpp"

namespace crossfi {

struct LossConfig {
  // Positive-pair weight; nullopt selects the per-batch `auto` rule.
  std::optional<double> alpha;
  double mmd_weight = defaults::kMmdWeight;
  std::size_t kernel_count = defaults::kMmdKernels;
  // Kernel mixture weights; empty means uniform over kernel_count.
  std::vector<double> beta;
  // Explicit Gaussian bandwidths (sigma). Empty: median pairwise distance
  // times 2^i for i centred on zero.
  std::vector<double> bandwidths;

  void validate() const;
  std::vector<double> resolved_beta() const;

  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

inline constexpr double kAutoAlphaMin = 1.0;
inline constexpr double kAutoAlphaMax = 100.0;
inline constexpr double kBandwidthFloor = 1e-8;

// alpha = #negative / #positive pairs, clamped to [1, 100].
double auto_alpha(std::size_t positives, std::size_t negatives);

// sum_ij alpha 1{same}(1 - S_ij)^2 + 1{diff} S_ij^2
ag::Var comparative_loss(const ag::Var& s, std::span<const int> labels_q,
                         std::span<const int> labels_k, std::optional<double> alpha);

// Same form with column j standing for class j.
ag::Var template_loss(const ag::Var& s, std::span<const int> labels, std::optional<double> alpha);

// sum_j beta_j MMD_j^2 with the biased (V-statistic) estimator.
ag::Var mk_mmd(const ag::Var& source, const ag::Var& target, const LossConfig& config);

// Bandwidths used by mk_mmd for a given pair of sets.
std::vector<double> mmd_bandwidths(const Tensor& source, const Tensor& target,
                                   const LossConfig& config);

}  // namespace crossfi
