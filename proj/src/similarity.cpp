#include "crossfi/similarity.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "crossfi/error.hpp"

namespace crossfi {

Metric parse_metric(const std::string& name) {
  if (name == "attention") return Metric::attention;
  if (name == "gaussian") return Metric::gaussian;
  if (name == "cosine") return Metric::cosine;
  throw ConfigError("unknown metric '" + name + "' (expected attention|gaussian|cosine)");
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::attention: return "attention";
    case Metric::gaussian: return "gaussian";
    case Metric::cosine: return "cosine";
  }
  return "unknown";
}

double AttentionHeadConfig::resolved_temperature() const {
  return temperature > 0.0 ? temperature : std::sqrt(static_cast<double>(d2));
}

void AttentionHeadConfig::validate() const {
  if (heads < 1) throw ConfigError("attention heads must be >= 1");
  if (d2 < 1) throw ConfigError("attention d2 must be >= 1");
}

nlohmann::json AttentionHeadConfig::to_json() const {
  return {{"heads", heads}, {"d2", d2}, {"temperature", resolved_temperature()}};
}

AttentionHeadConfig AttentionHeadConfig::from_json(const nlohmann::json& j) {
  AttentionHeadConfig c;
  c.heads = j.value("heads", c.heads);
  c.d2 = j.value("d2", c.d2);
  c.temperature = j.value("temperature", c.temperature);
  c.validate();
  return c;
}

AttentionHead::AttentionHead(std::size_t d1, const AttentionHeadConfig& config, Rng& rng)
    : d1_(d1), temperature_(config.resolved_temperature()) {
  config.validate();
  for (std::size_t i = 0; i < config.heads; ++i) {
    wq_.push_back(ag::parameter(nn::fan_in_normal({d1, config.d2}, d1, 1.0, rng)));
    wk_.push_back(ag::parameter(nn::fan_in_normal({d1, config.d2}, d1, 1.0, rng)));
    bq_.push_back(ag::parameter(Tensor(Shape{config.d2})));
    bk_.push_back(ag::parameter(Tensor(Shape{config.d2})));
  }
}

void AttentionHead::set_temperature(double t) {
  if (!(t > 0.0)) throw ConfigError("temperature must be > 0");
  temperature_ = t;
}

nn::ParamList AttentionHead::parameters() const {
  nn::ParamList out;
  for (std::size_t i = 0; i < wq_.size(); ++i) {
    const std::string p = "head." + std::to_string(i);
    out.push_back({p + ".wq", wq_[i]});
    out.push_back({p + ".bq", bq_[i]});
    out.push_back({p + ".wk", wk_[i]});
    out.push_back({p + ".bk", bk_[i]});
  }
  return out;
}

namespace {
void check_pair(const ag::Var& q, const ag::Var& k, const char* op) {
  if (q.value().rank() != 2 || k.value().rank() != 2 || q.dim(1) != k.dim(1)) {
    throw DimensionError(std::string(op) + ": query " + shape_str(q.shape()) + " and key " +
                         shape_str(k.shape()) + " must be [b x d1] with equal d1");
  }
}
}  // namespace

ag::Var attention_similarity(const ag::Var& q, const ag::Var& k, const AttentionHead& head) {
  check_pair(q, k, "attention_similarity");
  if (q.dim(1) != head.d1_) {
    throw DimensionError("attention_similarity: embeddings have d1=" + std::to_string(q.dim(1)) +
                         ", head expects " + std::to_string(head.d1_));
  }
  ag::Var logits;
  for (std::size_t i = 0; i < head.wq_.size(); ++i) {
    ag::Var pq = ag::add_rowvec(ag::matmul(q, head.wq_[i]), head.bq_[i]);
    ag::Var pk = ag::add_rowvec(ag::matmul(k, head.wk_[i]), head.bk_[i]);
    ag::Var term = ag::matmul_nt(pq, pk);
    logits = logits.defined() ? ag::add(logits, term) : term;
  }
  const double h = static_cast<double>(head.wq_.size());
  return ag::sigmoid(ag::scale(logits, 1.0 / (h * head.temperature_)));
}

ag::Var gaussian_similarity(const ag::Var& q, const ag::Var& k) {
  check_pair(q, k, "gaussian_similarity");
  const double d1 = static_cast<double>(q.dim(1));
  return ag::exp(ag::scale(ag::pairwise_sqdist(q, k), -1.0 / d1));
}

ag::Var cosine_similarity(const ag::Var& q, const ag::Var& k) {
  check_pair(q, k, "cosine_similarity");
  auto has_zero_row = [](const ag::Var& v) {
    for (std::size_t i = 0; i < v.dim(0); ++i) {
      bool zero = true;
      for (double x : v.value().row(i)) zero = zero && x == 0.0;
      if (zero) return true;
    }
    return false;
  };
  if (has_zero_row(q) || has_zero_row(k)) {
    spdlog::warn("cosine_similarity: zero-norm embedding row scored 0.5 against everything");
  }
  return ag::add_scalar(ag::scale(ag::pairwise_cosine(q, k), 0.5), 0.5);
}

ag::Var CsiNet::score(const ag::Var& q, const ag::Var& k, Metric metric) const {
  switch (metric) {
    case Metric::attention: return attention_similarity(q, k, head);
    case Metric::gaussian: return gaussian_similarity(q, k);
    case Metric::cosine: return cosine_similarity(q, k);
  }
  throw ConfigError("unknown metric");
}

ag::Var CsiNet::similarity(const ag::Var& batch_q, const ag::Var& batch_k, Metric metric) {
  const ag::Var q = encoder.forward(batch_q);
  const ag::Var k = encoder.forward(batch_k);
  return score(q, k, metric);
}

ag::Var CsiNet::self_similarity(const ag::Var& batch, Metric metric) {
  const ag::Var e = encoder.forward(batch);
  return score(e, e, metric);
}

nn::ParamList CsiNet::parameters() const {
  nn::ParamList out = encoder.parameters();
  nn::append(out, head.parameters());
  return out;
}

}  // namespace crossfi
