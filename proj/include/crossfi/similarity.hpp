#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "crossfi/defaults.hpp"
#include "crossfi/encoder.hpp"
#include "crossfi/nn.hpp"

namespace crossfi {

enum class Metric { attention, gaussian, cosine };

Metric parse_metric(const std::string& name);
std::string to_string(Metric m);

struct AttentionHeadConfig {
  std::size_t heads = defaults::kHeads;
  std::size_t d2 = defaults::kD2;
  // Non-positive means sqrt(d2).
  double temperature = 0.0;

  double resolved_temperature() const;
  void validate() const;
  nlohmann::json to_json() const;
  static AttentionHeadConfig from_json(const nlohmann::json& j);
};

// Query/key projections of the multi-attention score. Query and key use
// independent parameters.
class AttentionHead {
 public:
  AttentionHead(std::size_t d1, const AttentionHeadConfig& config, Rng& rng);

  std::size_t heads() const noexcept { return wq_.size(); }
  std::size_t d1() const noexcept { return d1_; }
  double temperature() const noexcept { return temperature_; }

  // Raw parameter access, e.g. to install hand-set weights in tests.
  ag::Var& wq(std::size_t i) { return wq_.at(i); }
  ag::Var& wk(std::size_t i) { return wk_.at(i); }
  ag::Var& bq(std::size_t i) { return bq_.at(i); }
  ag::Var& bk(std::size_t i) { return bk_.at(i); }
  void set_temperature(double t);

  nn::ParamList parameters() const;

 private:
  friend ag::Var attention_similarity(const ag::Var&, const ag::Var&, const AttentionHead&);
  std::size_t d1_;
  double temperature_;
  std::vector<ag::Var> wq_, wk_, bq_, bk_;
};

// S = sigmoid((1/h) sum_i (q Wq_i + bq_i)(k Wk_i + bk_i)^T / temperature)
ag::Var attention_similarity(const ag::Var& q, const ag::Var& k, const AttentionHead& head);
// S_ij = exp(-||q_i - k_j||^2 / d1)
ag::Var gaussian_similarity(const ag::Var& q, const ag::Var& k);
// S_ij = (cos(q_i, k_j) + 1) / 2; zero-norm rows score 0.5.
ag::Var cosine_similarity(const ag::Var& q, const ag::Var& k);

// CSi-Net: shared twin encoder followed by a similarity head.
struct CsiNet {
  Encoder encoder;
  AttentionHead head;

  // Applies the selected head to already-encoded query/key embeddings.
  ag::Var score(const ag::Var& q, const ag::Var& k, Metric metric) const;
  // Encodes both batches through the shared encoder; keys (or templates)
  // go through the key branch of the head.
  ag::Var similarity(const ag::Var& batch_q, const ag::Var& batch_k, Metric metric);
  // Self-similarity of one batch, encoding it once.
  ag::Var self_similarity(const ag::Var& batch, Metric metric);

  nn::ParamList parameters() const;
};

}  // namespace crossfi
