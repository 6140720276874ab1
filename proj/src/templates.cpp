#include "crossfi/templates.hpp"

#include <limits>

#include <spdlog/spdlog.h>

#include "crossfi/error.hpp"

namespace crossfi {

WeightNet::WeightNet(std::size_t k_max, Rng& rng, std::size_t channels)
    : k_max_(k_max),
      stem_(1, channels, 3, 1, 1, true, rng),
      conv1_(channels, channels, 3, 1, 1, true, rng),
      conv2_(channels, channels, 3, 1, 1, true, rng, 0.5),
      head_(channels * k_max, k_max, rng, 0.5) {
  if (k_max < 1) throw ConfigError("Weight-Net k_max must be >= 1");
}

ag::Var WeightNet::forward(const ag::Var& similarity) const {
  const std::size_t k = similarity.dim(0);
  ag::Var x = ag::reshape(ag::pad_to(similarity, k_max_, k_max_), {1, 1, k_max_, k_max_});
  x = ag::relu(stem_(x));
  ag::Var h = ag::relu(conv1_(x));
  x = ag::relu(ag::add(conv2_(h), x));
  ag::Var rows = ag::mean_last_axis(x);  // [1, C, k_max]
  ag::Var flat = ag::reshape(rows, {1, rows.numel()});
  ag::Var logits = head_(flat);
  return ag::sigmoid(ag::take_prefix(logits, k));
}

nn::ParamList WeightNet::parameters() const {
  nn::ParamList out;
  stem_.collect("weightnet.stem", out);
  conv1_.collect("weightnet.conv1", out);
  conv2_.collect("weightnet.conv2", out);
  head_.collect("weightnet.head", out);
  return out;
}

ag::Var score_sample_quality(const ag::Var& similarity, const WeightNet& net) {
  if (similarity.value().rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    throw DimensionError("score_sample_quality: similarity must be square, got " +
                         shape_str(similarity.shape()));
  }
  if (similarity.dim(0) > net.k_max()) {
    throw PoolSizeError("score_sample_quality: pool of " + std::to_string(similarity.dim(0)) +
                        " exceeds Weight-Net capacity " + std::to_string(net.k_max()));
  }
  return net.forward(similarity);
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::weighted_average: return "weighted-average";
    case Provenance::selected_source_sample: return "selected-source-sample";
    case Provenance::selected_target_sample: return "selected-target-sample";
    case Provenance::support_sample: return "support-sample";
    case Provenance::plain_average: return "plain-average";
    case Provenance::random_sample: return "random-sample";
  }
  return "unknown";
}

Provenance parse_provenance(const std::string& s) {
  for (auto p : {Provenance::weighted_average, Provenance::selected_source_sample,
                 Provenance::selected_target_sample, Provenance::support_sample,
                 Provenance::plain_average, Provenance::random_sample}) {
    if (to_string(p) == s) return p;
  }
  throw ArchiveError("unknown template provenance '" + s + "'");
}

int TemplateSet::first_unusable() const {
  for (std::size_t c = 0; c < classes(); ++c) {
    if (!usable(c)) return static_cast<int>(c);
  }
  return -1;
}

Archive TemplateSet::to_archive() const {
  Archive a;
  a.kind = "template-set";
  a.arrays["templates"] = templates;
  nlohmann::json prov = nlohmann::json::array();
  for (auto p : provenance) prov.push_back(to_string(p));
  a.meta["provenance"] = prov;
  a.meta["coverage"] = std::vector<bool>(coverage);
  a.meta["fallback"] = std::vector<bool>(fallback);
  return a;
}

TemplateSet TemplateSet::from_archive(const Archive& archive) {
  if (archive.kind != "template-set") throw ArchiveError("archive is not a template set");
  TemplateSet t;
  try {
    t.templates = archive.array("templates");
    for (const auto& p : archive.meta.at("provenance")) t.provenance.push_back(parse_provenance(p.get<std::string>()));
    t.coverage = archive.meta.at("coverage").get<std::vector<bool>>();
    t.fallback = archive.meta.at("fallback").get<std::vector<bool>>();
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("template archive malformed: ") + e.what());
  }
  if (t.provenance.size() != t.coverage.size() || t.fallback.size() != t.coverage.size() ||
      t.templates.rank() != 4 || t.templates.dim(0) != t.coverage.size()) {
    throw ArchiveError("template archive sizes are inconsistent");
  }
  return t;
}

ag::Var TemplateModel::score(const ag::Var& similarity) const {
  if (scorer) return scorer(similarity);
  return score_sample_quality(similarity, weightnet);
}

namespace {

TemplateSet empty_set(std::size_t classes, data::SampleShape shape, Provenance p) {
  TemplateSet t;
  t.templates = Tensor(Shape{classes, 2, shape.t, shape.d});
  t.provenance.assign(classes, p);
  t.coverage.assign(classes, false);
  t.fallback.assign(classes, false);
  return t;
}

void check_labels(std::span<const data::CsiSample> pool, std::size_t classes) {
  for (const auto& s : pool) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes) {
      throw DataError("sample label " + std::to_string(s.label) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
  }
}

void copy_row(const std::vector<double>& src, Tensor& dst, std::size_t row) {
  std::copy(src.begin(), src.end(), dst.data() + row * dst.row_size());
}

std::vector<data::CsiSample> draw(std::span<const data::CsiSample> pool, std::size_t k, Rng& rng) {
  const std::size_t n = std::min(k, pool.size());
  std::vector<data::CsiSample> out;
  for (auto i : rng.sample_without_replacement(pool.size(), n)) out.push_back(pool[i]);
  return out;
}

}  // namespace

TemplateSet weighted_templates(std::span<const data::CsiSample> pool, const TemplateModel& model) {
  if (pool.empty()) throw PreconditionError("template generation: empty pool");
  check_labels(pool, model.classes);
  ag::NoGradGuard no_grad;
  const Tensor inputs = data::stack_inputs(pool, model.shape);
  const ag::Var s = model.net.self_similarity(ag::constant(inputs), model.metric);
  const ag::Var w = model.score(s);
  const auto labels = data::gather_labels(pool);
  const ag::Var rows = ag::weighted_class_mean(w, inputs.reshaped({pool.size(), model.shape.numel()}),
                                               labels, model.classes);
  TemplateSet out = empty_set(model.classes, model.shape, Provenance::weighted_average);
  out.templates = rows.value().reshaped({model.classes, 2, model.shape.t, model.shape.d});
  for (int l : labels) out.coverage[static_cast<std::size_t>(l)] = true;
  return out;
}

TemplateSet generate_templates_indomain(std::span<const data::CsiSample> pool, std::size_t k,
                                        const TemplateModel& model, Rng& rng) {
  if (pool.empty()) throw PreconditionError("template generation: empty pool");
  const auto drawn = draw(pool, k, rng);
  return weighted_templates(drawn, model);
}

TemplateSet select_source_templates(std::span<const data::CsiSample> pool, const TemplateModel& model) {
  if (pool.empty()) throw PreconditionError("template generation: empty pool");
  check_labels(pool, model.classes);
  ag::NoGradGuard no_grad;
  const Tensor inputs = data::stack_inputs(pool, model.shape);
  const ag::Var w = model.score(model.net.self_similarity(ag::constant(inputs), model.metric));
  TemplateSet out = empty_set(model.classes, model.shape, Provenance::selected_source_sample);
  std::vector<double> best(model.classes, 0.0);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto c = static_cast<std::size_t>(pool[i].label);
    if (w.value()[i] > best[c]) {
      best[c] = w.value()[i];
      copy_row(pool[i].data, out.templates, c);
      out.coverage[c] = true;
    }
  }
  return out;
}

TemplateSet select_target_templates(const TemplateSet& source, const Tensor& target_inputs,
                                    std::size_t k, const TemplateModel& model, Rng& rng) {
  if (target_inputs.numel() == 0) throw PreconditionError("zero-shot templates: empty test pool");
  const std::size_t m = target_inputs.dim(0);
  const auto picked = rng.sample_without_replacement(m, std::min(k, m));
  const std::size_t width = model.shape.numel();
  Tensor chosen(Shape{picked.size(), 2, model.shape.t, model.shape.d});
  for (std::size_t i = 0; i < picked.size(); ++i) {
    std::copy_n(target_inputs.data() + picked[i] * width, width, chosen.data() + i * width);
  }

  ag::NoGradGuard no_grad;
  const ag::Var s = model.net.similarity(ag::constant(chosen), ag::constant(source.templates), model.metric);
  TemplateSet target = empty_set(model.classes, model.shape, Provenance::selected_target_sample);
  std::vector<double> best(model.classes, 0.0);
  for (std::size_t i = 0; i < picked.size(); ++i) {
    std::size_t y = 0;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < model.classes; ++c) {
      if (!source.coverage[c]) continue;
      if (s.value().at(i, c) > top) {
        top = s.value().at(i, c);
        y = c;
      }
    }
    if (top > best[y]) {
      best[y] = top;
      std::copy_n(chosen.data() + i * width, width, target.templates.data() + y * width);
      target.coverage[y] = true;
    }
  }
  for (std::size_t c = 0; c < model.classes; ++c) {
    if (target.coverage[c] || !source.coverage[c]) continue;
    spdlog::info("zero-shot: no target sample mapped to class {}; using its source template", c);
    std::copy_n(source.templates.data() + c * width, width, target.templates.data() + c * width);
    target.provenance[c] = source.provenance[c];
    target.fallback[c] = true;
  }
  return target;
}

ZeroShotTemplates generate_templates_zeroshot(std::span<const data::CsiSample> train_pool,
                                              const Tensor& target_inputs, std::size_t k,
                                              const TemplateModel& model, Rng& rng) {
  if (train_pool.empty() || target_inputs.numel() == 0) {
    throw PreconditionError("zero-shot templates: train and test pools must be non-empty");
  }
  ZeroShotTemplates out;
  out.source = select_source_templates(draw(train_pool, k, rng), model);
  out.target = select_target_templates(out.source, target_inputs, k, model, rng);
  return out;
}

TemplateSet templates_from_support(std::span<const data::CsiSample> support, const TemplateModel& model) {
  if (support.empty()) throw PreconditionError("templates_from_support: empty support set");
  check_labels(support, model.classes);
  std::vector<std::size_t> per_class(model.classes, 0);
  for (const auto& s : support) ++per_class[static_cast<std::size_t>(s.label)];
  const bool one_shot = std::all_of(per_class.begin(), per_class.end(), [](std::size_t n) { return n <= 1; });
  if (!one_shot) {
    return weighted_templates(support, model);
  }
  TemplateSet out = empty_set(model.classes, model.shape, Provenance::support_sample);
  for (const auto& s : support) {
    const auto c = static_cast<std::size_t>(s.label);
    copy_row(s.data, out.templates, c);
    out.coverage[c] = true;
  }
  return out;
}

TemplateSet plain_average_templates(std::span<const data::CsiSample> pool, std::size_t classes,
                                    data::SampleShape shape) {
  check_labels(pool, classes);
  TemplateSet out = empty_set(classes, shape, Provenance::plain_average);
  std::vector<std::size_t> count(classes, 0);
  const std::size_t width = shape.numel();
  for (const auto& s : pool) {
    const auto c = static_cast<std::size_t>(s.label);
    ++count[c];
    for (std::size_t j = 0; j < width; ++j) out.templates[c * width + j] += s.data[j];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) continue;
    out.coverage[c] = true;
    for (std::size_t j = 0; j < width; ++j) out.templates[c * width + j] /= static_cast<double>(count[c]);
  }
  return out;
}

TemplateSet random_sample_templates(std::span<const data::CsiSample> pool, std::size_t classes,
                                    data::SampleShape shape, Rng& rng) {
  check_labels(pool, classes);
  TemplateSet out = empty_set(classes, shape, Provenance::random_sample);
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < pool.size(); ++i) members[static_cast<std::size_t>(pool[i].label)].push_back(i);
  for (std::size_t c = 0; c < classes; ++c) {
    if (members[c].empty()) continue;
    copy_row(pool[members[c][rng.index(members[c].size())]].data, out.templates, c);
    out.coverage[c] = true;
  }
  return out;
}

}  // namespace crossfi
