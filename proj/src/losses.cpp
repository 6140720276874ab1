#include "crossfi/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "crossfi/error.hpp"
#include "crossfi/kernels.hpp"

namespace crossfi {

void LossConfig::validate() const {
  if (alpha && !(*alpha > 0.0)) throw ConfigError("alpha must be > 0 or auto");
  if (!(mmd_weight >= 0.0)) throw ConfigError("mmd_weight must be >= 0");
  if (kernel_count < 1) throw ConfigError("mmd kernel count must be >= 1");
  if (!beta.empty()) {
    if (beta.size() != kernel_count) throw ConfigError("beta must have one weight per kernel");
    double total = 0.0;
    for (double b : beta) {
      if (!(b >= 0.0)) throw ConfigError("beta weights must be >= 0");
      total += b;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("beta weights must sum to 1");
  }
  if (!bandwidths.empty() && bandwidths.size() != kernel_count) {
    throw ConfigError("explicit bandwidths must have one entry per kernel");
  }
}

std::vector<double> LossConfig::resolved_beta() const {
  if (!beta.empty()) return beta;
  return std::vector<double>(kernel_count, 1.0 / static_cast<double>(kernel_count));
}

nlohmann::json LossConfig::to_json() const {
  nlohmann::json j;
  if (alpha) j["alpha"] = *alpha;
  else j["alpha"] = "auto";
  j["mmd_weight"] = mmd_weight;
  j["mmd_kernels"] = kernel_count;
  j["beta"] = resolved_beta();
  if (!bandwidths.empty()) j["bandwidths"] = bandwidths;
  return j;
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  if (j.contains("alpha")) {
    if (j["alpha"].is_string()) {
      if (j["alpha"] != "auto") throw ConfigError("alpha must be a number or 'auto'");
    } else {
      c.alpha = j["alpha"].get<double>();
    }
  }
  c.mmd_weight = j.value("mmd_weight", c.mmd_weight);
  c.kernel_count = j.value("mmd_kernels", c.kernel_count);
  c.beta = j.value("beta", std::vector<double>{});
  c.bandwidths = j.value("bandwidths", std::vector<double>{});
  c.validate();
  return c;
}

double auto_alpha(std::size_t positives, std::size_t negatives) {
  if (positives == 0) return kAutoAlphaMax;
  const double ratio = static_cast<double>(negatives) / static_cast<double>(positives);
  return std::clamp(ratio, kAutoAlphaMin, kAutoAlphaMax);
}

namespace {

ag::Var weighted_pair_loss(const ag::Var& s, const Tensor& mask, std::optional<double> alpha) {
  std::size_t pos = 0;
  for (double m : mask.vec()) pos += m != 0.0;
  const double a = alpha ? *alpha : auto_alpha(pos, mask.numel() - pos);
  return ag::contrastive_sum(s, mask, a);
}

}  // namespace

ag::Var comparative_loss(const ag::Var& s, std::span<const int> labels_q,
                         std::span<const int> labels_k, std::optional<double> alpha) {
  if (s.value().rank() != 2 || s.dim(0) != labels_q.size() || s.dim(1) != labels_k.size()) {
    throw DimensionError("comparative_loss: scores " + shape_str(s.shape()) + " vs " +
                         std::to_string(labels_q.size()) + " query and " +
                         std::to_string(labels_k.size()) + " key labels");
  }
  Tensor mask(s.shape());
  for (std::size_t i = 0; i < labels_q.size(); ++i) {
    for (std::size_t j = 0; j < labels_k.size(); ++j) mask.at(i, j) = labels_q[i] == labels_k[j];
  }
  return weighted_pair_loss(s, mask, alpha);
}

ag::Var template_loss(const ag::Var& s, std::span<const int> labels, std::optional<double> alpha) {
  if (s.value().rank() != 2 || s.dim(0) != labels.size()) {
    throw DimensionError("template_loss: scores " + shape_str(s.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = s.dim(1);
  Tensor mask(s.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw DimensionError("template_loss: label " + std::to_string(labels[i]) +
                           " outside [0, " + std::to_string(n) + ")");
    }
    mask.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return weighted_pair_loss(s, mask, alpha);
}

std::vector<double> mmd_bandwidths(const Tensor& source, const Tensor& target,
                                   const LossConfig& config) {
  if (!config.bandwidths.empty()) {
    std::vector<double> out;
    for (double b : config.bandwidths) out.push_back(std::max(b, kBandwidthFloor));
    return out;
  }
  const std::size_t d = source.row_size();
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < source.dim(0); ++i) rows.push_back(source.data() + i * d);
  for (std::size_t i = 0; i < target.dim(0); ++i) rows.push_back(target.data() + i * d);
  std::vector<double> dists;
  const auto& kt = kernels::active();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) dists.push_back(std::sqrt(kt.sqdist(rows[i], rows[j], d)));
  }
  double median = 0.0;
  if (!dists.empty()) {
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    median = dists[dists.size() / 2];
  }
  median = std::max(median, kBandwidthFloor);
  std::vector<double> out;
  const int half = static_cast<int>(config.kernel_count) / 2;
  for (std::size_t i = 0; i < config.kernel_count; ++i) {
    const int exponent = static_cast<int>(i) - half;
    out.push_back(std::max(median * std::ldexp(1.0, exponent), kBandwidthFloor));
  }
  return out;
}

ag::Var mk_mmd(const ag::Var& source, const ag::Var& target, const LossConfig& config) {
  config.validate();
  if (source.value().rank() != 2 || target.value().rank() != 2 || source.dim(0) == 0 ||
      target.dim(0) == 0) {
    throw PreconditionError("mk_mmd: both embedding sets must be non-empty [n x d] matrices");
  }
  if (source.dim(1) != target.dim(1)) throw DimensionError("mk_mmd: embedding widths differ");

  const auto sigmas = mmd_bandwidths(source.value(), target.value(), config);
  const auto beta = config.resolved_beta();
  const ag::Var dss = ag::pairwise_sqdist(source, source);
  const ag::Var dtt = ag::pairwise_sqdist(target, target);
  const ag::Var dst = ag::pairwise_sqdist(source, target);

  ag::Var total;
  for (std::size_t j = 0; j < sigmas.size(); ++j) {
    const double g = -1.0 / (2.0 * sigmas[j] * sigmas[j]);
    ag::Var mmd = ag::add(ag::mean(ag::exp(ag::scale(dss, g))), ag::mean(ag::exp(ag::scale(dtt, g))));
    mmd = ag::sub(mmd, ag::scale(ag::mean(ag::exp(ag::scale(dst, g))), 2.0));
    ag::Var term = ag::scale(mmd, beta[j]);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return total;
}

}  // namespace crossfi
