#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crossfi/defaults.hpp"
#include "crossfi/archive.hpp"
#include "crossfi/data.hpp"
#include "crossfi/similarity.hpp"

namespace crossfi {

// Residual scorer over a k x k similarity matrix. The matrix is zero-padded
// to k_max x k_max and treated as a 1-channel image; per-row features are
// pooled across columns and a final linear layer of width k_max with a
// sigmoid yields one quality score per pool slot (outputs beyond k masked).
class WeightNet {
 public:
  WeightNet(std::size_t k_max, Rng& rng, std::size_t channels = defaults::kWeightNetChannels);

  std::size_t k_max() const noexcept { return k_max_; }
  ag::Var forward(const ag::Var& similarity) const;
  nn::ParamList parameters() const;

 private:
  std::size_t k_max_;
  nn::Conv2d stem_, conv1_, conv2_;
  nn::Linear head_;
};

// k scores in (0, 1). Throws DimensionError for a non-square matrix and
// PoolSizeError when k exceeds the network's k_max.
ag::Var score_sample_quality(const ag::Var& similarity, const WeightNet& net);

enum class Provenance { weighted_average, selected_source_sample, selected_target_sample, support_sample, plain_average, random_sample };

std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& s);

struct TemplateSet {
  // [n, 2, t, D]
  Tensor templates;
  std::vector<Provenance> provenance;
  // Class received at least one contributing sample.
  std::vector<bool> coverage;
  // Uncovered class whose row was filled from a source template.
  std::vector<bool> fallback;

  std::size_t classes() const noexcept { return coverage.size(); }
  bool usable(std::size_t c) const { return coverage.at(c) || fallback.at(c); }
  // First class that is neither covered nor backed by a fallback, or -1.
  int first_unusable() const;

  Archive to_archive() const;
  static TemplateSet from_archive(const Archive& archive);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static TemplateSet load(const std::filesystem::path& path) { return from_archive(Archive::load(path)); }
};

// Replaces the automatic Weight-Net scoring (e.g. constant or hand-set
// weights in tests). Receives the pool self-similarity, returns k weights.
using QualityScorer = std::function<ag::Var(const ag::Var& similarity)>;

struct TemplateModel {
  CsiNet& net;
  const WeightNet& weightnet;
  Metric metric;
  std::size_t classes;
  data::SampleShape shape;
  QualityScorer scorer;  // optional override

  ag::Var score(const ag::Var& similarity) const;
};

// Weighted average over a pool already drawn.
TemplateSet weighted_templates(std::span<const data::CsiSample> pool, const TemplateModel& model);

// In-domain templates: draw k from the pool (seeded), weight by quality, average per class.
TemplateSet generate_templates_indomain(std::span<const data::CsiSample> pool, std::size_t k,
                                        const TemplateModel& model, Rng& rng);

struct ZeroShotTemplates {
  TemplateSet source;
  TemplateSet target;
};

// Per class, the pool sample with the largest quality score (strict >, so
// ties keep the first one seen).
TemplateSet select_source_templates(std::span<const data::CsiSample> pool, const TemplateModel& model);

// Target half of zero-shot generation: draws k unlabeled target inputs, maps each to
// its most similar source template and keeps the best-scoring sample per
// class.
TemplateSet select_target_templates(const TemplateSet& source, const Tensor& target_inputs,
                                    std::size_t k, const TemplateModel& model, Rng& rng);

// Zero-shot generation. `target_inputs` are unlabeled [m, 2, t, D] test inputs.
// Classes no target sample maps to fall back to their source template.
ZeroShotTemplates generate_templates_zeroshot(std::span<const data::CsiSample> train_pool,
                                              const Tensor& target_inputs, std::size_t k,
                                              const TemplateModel& model, Rng& rng);

// Few-shot templates: one-shot uses the support samples directly, k > 1
// applies the weighted in-domain average to the whole support set.
TemplateSet templates_from_support(std::span<const data::CsiSample> support, const TemplateModel& model);

// Ablation baselines.
TemplateSet plain_average_templates(std::span<const data::CsiSample> pool, std::size_t classes,
                                    data::SampleShape shape);
TemplateSet random_sample_templates(std::span<const data::CsiSample> pool, std::size_t classes,
                                    data::SampleShape shape, Rng& rng);

}  // namespace crossfi
