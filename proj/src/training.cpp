#include "crossfi/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "crossfi/error.hpp"

namespace crossfi {

TemplateMethod parse_template_method(const std::string& s) {
  if (s == "weight-net") return TemplateMethod::weight_net;
  if (s == "plain-average" || s == "average") return TemplateMethod::plain_average;
  if (s == "random-sample" || s == "random") return TemplateMethod::random_sample;
  throw ConfigError("unknown template method '" + s + "' (expected weight-net|plain-average|random-sample)");
}

std::string to_string(TemplateMethod m) {
  switch (m) {
    case TemplateMethod::weight_net: return "weight-net";
    case TemplateMethod::plain_average: return "plain-average";
    case TemplateMethod::random_sample: return "random-sample";
  }
  return "unknown";
}

DecayMode parse_decay_mode(const std::string& s) {
  if (s == "weight-decay") return DecayMode::weight_decay;
  if (s == "lr-schedule") return DecayMode::lr_schedule;
  throw ConfigError("unknown decay mode '" + s + "' (expected weight-decay|lr-schedule)");
}

std::string to_string(DecayMode m) {
  return m == DecayMode::weight_decay ? "weight-decay" : "lr-schedule";
}

// ---- ScenarioConfig -------------------------------------------------------

Metric ScenarioConfig::resolved_metric() const {
  if (metric) return *metric;
  return scenario == data::Scenario::k_shot ? Metric::gaussian : Metric::attention;
}

std::size_t ScenarioConfig::resolved_finetune_epochs() const {
  if (finetune_epochs) return *finetune_epochs;
  const auto ft = static_cast<std::size_t>(std::llround(defaults::kFinetuneFraction * static_cast<double>(epochs)));
  return std::max<std::size_t>(ft, 1);
}

std::size_t ScenarioConfig::resolved_k_pool(std::size_t classes) const {
  return k_pool > 0 ? k_pool : defaults::kPoolPerClass * classes;
}

std::size_t ScenarioConfig::resolved_k_max(std::size_t classes) const {
  return k_max > 0 ? k_max : defaults::kWeightNetCapacityPerClass * classes;
}

data::SplitConfig ScenarioConfig::split_config() const {
  data::SplitConfig s;
  s.scenario = scenario;
  s.k = k;
  s.source_domains = source_domains;
  s.target_domains = target_domains;
  s.new_class = new_class;
  s.train_fraction = train_fraction;
  s.seed = seed;
  return s;
}

void ScenarioConfig::validate() const {
  using data::Scenario;
  const bool needs_k = scenario == Scenario::k_shot || scenario == Scenario::new_class;
  if (needs_k && k < 1) throw ConfigError("k must be >= 1 for scenario " + data::to_string(scenario));
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(lr_decay >= 0.0 && lr_decay < 1.0)) throw ConfigError("lr_decay must be in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (k_max > 0 && k_pool > k_max) throw ConfigError("k_pool must not exceed k_max");
  if (use_mmd && scenario == Scenario::in_domain) {
    throw ConfigError("use_mmd has no target domain in the in-domain scenario");
  }
  if (use_mmd && scenario == Scenario::zero_shot && !use_unlabeled_target) {
    throw ConfigError("use_mmd in zero-shot needs use_unlabeled_target");
  }
  if (use_unlabeled_target && scenario != Scenario::zero_shot) {
    throw ConfigError("use_unlabeled_target only applies to zero-shot");
  }
  if (scenario != Scenario::in_domain && scenario != Scenario::new_class) {
    for (int d : source_domains) {
      if (std::find(target_domains.begin(), target_domains.end(), d) != target_domains.end()) {
        throw ConfigError("source and target domains overlap");
      }
    }
  }
  encoder.validate();
  head.validate();
  loss.validate();
}

nlohmann::json ScenarioConfig::to_json() const {
  nlohmann::json j;
  j["scenario"] = data::to_string(scenario);
  j["k"] = k;
  j["metric"] = metric ? nlohmann::json(to_string(*metric)) : nlohmann::json(nullptr);
  j["use_mmd"] = use_mmd;
  j["use_unlabeled_target"] = use_unlabeled_target;
  j["epochs"] = epochs;
  j["finetune_epochs"] = finetune_epochs ? nlohmann::json(*finetune_epochs) : nlohmann::json(nullptr);
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["lr_decay"] = lr_decay;
  j["decay_mode"] = to_string(decay_mode);
  j["seed"] = seed;
  j["template_method"] = to_string(template_method);
  j["k_pool"] = k_pool;
  j["k_max"] = k_max;
  j["template_grad_path"] = template_grad_path;
  j["source_domains"] = source_domains;
  j["target_domains"] = target_domains;
  j["new_class"] = new_class;
  j["train_fraction"] = train_fraction;
  j["encoder"] = encoder.to_json();
  j["head"] = head.to_json();
  j["loss"] = loss.to_json();
  return j;
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    out = j[key].get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(key, e.what());
  }
}

template <typename F>
void parse_field(const nlohmann::json& j, const char* key, F&& apply) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    apply(j[key]);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(key, e.what());
  } catch (const ConfigError& e) {
    throw SchemaError(key, e.what());
  }
}

}  // namespace

ScenarioConfig ScenarioConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("<root>", "scenario config must be a JSON object");
  static const std::set<std::string> known = {
      "scenario", "k", "metric", "use_mmd", "use_unlabeled_target", "epochs", "finetune_epochs",
      "batch_size", "learning_rate", "lr_decay", "decay_mode", "seed", "template_method", "k_pool",
      "k_max", "template_grad_path", "source_domains", "target_domains", "new_class",
      "train_fraction", "encoder", "head", "loss"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw SchemaError(key, "unknown field");
  }
  ScenarioConfig c;
  parse_field(j, "scenario", [&](const auto& v) { c.scenario = data::parse_scenario(v.template get<std::string>()); });
  read_field(j, "k", c.k);
  parse_field(j, "metric", [&](const auto& v) { c.metric = parse_metric(v.template get<std::string>()); });
  read_field(j, "use_mmd", c.use_mmd);
  read_field(j, "use_unlabeled_target", c.use_unlabeled_target);
  read_field(j, "epochs", c.epochs);
  parse_field(j, "finetune_epochs", [&](const auto& v) { c.finetune_epochs = v.template get<std::size_t>(); });
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "lr_decay", c.lr_decay);
  parse_field(j, "decay_mode", [&](const auto& v) { c.decay_mode = parse_decay_mode(v.template get<std::string>()); });
  read_field(j, "seed", c.seed);
  parse_field(j, "template_method",
              [&](const auto& v) { c.template_method = parse_template_method(v.template get<std::string>()); });
  read_field(j, "k_pool", c.k_pool);
  read_field(j, "k_max", c.k_max);
  read_field(j, "template_grad_path", c.template_grad_path);
  read_field(j, "source_domains", c.source_domains);
  read_field(j, "target_domains", c.target_domains);
  read_field(j, "new_class", c.new_class);
  read_field(j, "train_fraction", c.train_fraction);
  parse_field(j, "encoder", [&](const auto& v) { c.encoder = EncoderConfig::from_json(v); });
  parse_field(j, "head", [&](const auto& v) { c.head = AttentionHeadConfig::from_json(v); });
  parse_field(j, "loss", [&](const auto& v) { c.loss = LossConfig::from_json(v); });

  auto field_of = [](const std::string& msg) -> std::string {
    for (const char* f : {"learning_rate", "lr_decay", "epochs", "batch_size", "k_pool", "use_mmd",
                          "use_unlabeled_target", "domains"}) {
      if (msg.find(f) != std::string::npos) return f;
    }
    return msg.rfind("k must", 0) == 0 ? "k" : "<config>";
  };
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(field_of(e.what()), e.what());
  }
  return c;
}

// ---- AdamW ----------------------------------------------------------------

AdamW::AdamW(nn::ParamList params, double lr, double weight_decay)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros_like(p.var.value()));
    v_.push_back(Tensor::zeros_like(p.var.value()));
  }
}

void AdamW::zero_grad() { nn::zero_grad(params_); }

void AdamW::step() {
  ++t_;
  const double b1 = defaults::kAdamBeta1, b2 = defaults::kAdamBeta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Var var = params_[i].var;
    if (!var.has_grad()) continue;
    Tensor& w = var.mutable_value();
    const Tensor& g = var.grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.numel(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + defaults::kAdamEps);
      w[j] -= lr_ * (update + weight_decay_ * w[j]);
    }
  }
}

void AdamW::save(Archive& a) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    a.arrays["adam.m/" + params_[i].name] = m_[i];
    a.arrays["adam.v/" + params_[i].name] = v_[i];
  }
  a.meta["adam"] = {{"t", t_}, {"lr", lr_}, {"weight_decay", weight_decay_}};
}

void AdamW::load(const Archive& a) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor m = a.array("adam.m/" + params_[i].name);
    Tensor v = a.array("adam.v/" + params_[i].name);
    if (m.shape() != m_[i].shape() || v.shape() != v_[i].shape()) {
      throw ArchiveError("optimizer state shape mismatch for " + params_[i].name);
    }
    m_[i] = std::move(m);
    v_[i] = std::move(v);
  }
  const auto& j = a.meta.at("adam");
  t_ = j.at("t").get<std::uint64_t>();
  lr_ = j.at("lr").get<double>();
  weight_decay_ = j.at("weight_decay").get<double>();
}

// ---- TrainState -----------------------------------------------------------

namespace {

CsiNet build_net(const ScenarioConfig& c, data::SampleShape shape) {
  Rng enc_rng = Rng::derive(c.seed, {0xE1C});
  Rng head_rng = Rng::derive(c.seed, {0x4EAD});
  return CsiNet{Encoder(c.encoder, shape.t, shape.d, enc_rng), AttentionHead(c.encoder.d1, c.head, head_rng)};
}

WeightNet build_weightnet(const ScenarioConfig& c, std::size_t classes) {
  Rng rng = Rng::derive(c.seed, {0x3E16});
  return WeightNet(c.resolved_k_max(classes), rng);
}

double weight_decay_for(const ScenarioConfig& c) {
  return c.decay_mode == DecayMode::weight_decay ? c.lr_decay : 0.0;
}

}  // namespace

TrainState::TrainState(const ScenarioConfig& cfg, data::SampleShape shp, std::size_t n)
    : config(cfg),
      shape(shp),
      classes(n),
      net(build_net(cfg, shp)),
      weightnet(build_weightnet(cfg, n)),
      rng(Rng::derive(cfg.seed, {0x7EA1})) {
  config.validate();
  if (classes < 2) throw ConfigError("at least two classes are required");
  if (config.resolved_k_pool(classes) > config.resolved_k_max(classes)) {
    throw ConfigError("k_pool must not exceed k_max");
  }
  optimizer = AdamW(parameters(), config.learning_rate, weight_decay_for(config));
}

nn::ParamList TrainState::parameters() const {
  nn::ParamList out = net.parameters();
  nn::append(out, weightnet.parameters());
  return out;
}

TemplateModel TrainState::template_model(Metric metric) {
  return TemplateModel{net, weightnet, metric, classes, shape, {}};
}

// ---- audit ----------------------------------------------------------------

const std::vector<data::CsiSample>& AuditedTestSplit::labeled() const {
  ++labeled_reads_;
  if (training_depth_ > 0) {
    ++violations_;
    spdlog::error("labeled test split read during training");
  }
  return samples_;
}

Tensor AuditedTestSplit::unlabeled_inputs(data::SampleShape shape) const {
  ++unlabeled_reads_;
  return data::stack_inputs(samples_, shape);
}

Tensor AuditedTestSplit::unlabeled_inputs(std::span<const std::size_t> indices, data::SampleShape shape) const {
  ++unlabeled_reads_;
  return data::stack_inputs(samples_, indices, shape);
}

// ---- steps ----------------------------------------------------------------

namespace {

ag::Var add_mmd(TrainState& state, const ag::Var& loss, const ag::Var& source_emb, const Tensor* target,
                StepResult& result) {
  if (!target) return loss;
  const ag::Var target_emb = state.net.encoder.forward(*target);
  const ag::Var mmd = ag::scale(mk_mmd(source_emb, target_emb, state.config.loss), state.config.loss.mmd_weight);
  result.mmd = mmd.item();
  return ag::add(loss, mmd);
}

void update(TrainState& state, const ag::Var& loss) {
  state.optimizer.zero_grad();
  ag::backward(loss);
  state.optimizer.step();
}

}  // namespace

StepResult step_comparative(TrainState& state, std::span<const data::CsiSample> batch, const Tensor* target) {
  if (batch.empty()) throw PreconditionError("step_comparative: empty batch");
  const Metric metric = state.config.resolved_metric();
  const Tensor x = data::stack_inputs(batch, state.shape);
  const auto labels = data::gather_labels(batch);
  const ag::Var e = state.net.encoder.forward(x);
  const ag::Var s = state.net.score(e, e, metric);
  StepResult result;
  ag::Var loss = comparative_loss(s, labels, labels, state.config.loss.alpha);
  loss = add_mmd(state, loss, e, target, result);
  update(state, loss);
  result.loss = loss.item();
  ++state.progress.comparative_steps;
  return result;
}

StepResult step_template(TrainState& state, std::span<const data::CsiSample> batch,
                         std::span<const data::CsiSample> pool, std::span<const int> expected,
                         const Tensor* target) {
  if (batch.empty() || pool.empty()) throw PreconditionError("step_template: empty batch or pool");
  const Metric metric = state.config.resolved_metric();
  const std::size_t n = state.classes;
  const std::size_t width = state.shape.numel();
  const Tensor pool_x = data::stack_inputs(pool, state.shape);
  const Tensor pool_rows = pool_x.reshaped({pool.size(), width});
  const auto pool_labels = data::gather_labels(pool);

  std::vector<bool> covered(n, false);
  for (int l : pool_labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n) throw DataError("pool label out of range");
    covered[static_cast<std::size_t>(l)] = true;
  }
  StepResult result;
  for (int c : expected) {
    if (!covered[static_cast<std::size_t>(c)]) {
      spdlog::warn("template step skipped: class {} absent from the template pool", c);
      ++state.progress.skipped_template_steps;
      result.skipped = true;
      return result;
    }
  }

  ag::Var templates;  // [n, width]
  switch (state.config.template_method) {
    case TemplateMethod::weight_net: {
      ag::Var s_pool = state.net.self_similarity(ag::constant(pool_x), metric);
      if (!state.config.template_grad_path) s_pool = ag::detach(s_pool);
      const ag::Var w = score_sample_quality(s_pool, state.weightnet);
      if (state.config.scenario == data::Scenario::zero_shot) {
        // argmax selection: the chosen rows enter as constants
        std::vector<double> best(n, 0.0);
        std::vector<std::size_t> pick(n, 0);
        for (std::size_t i = 0; i < pool.size(); ++i) {
          const auto c = static_cast<std::size_t>(pool_labels[i]);
          if (w.value()[i] > best[c]) {
            best[c] = w.value()[i];
            pick[c] = i;
          }
        }
        Tensor rows(Shape{n, width});
        for (std::size_t c = 0; c < n; ++c) {
          if (covered[c]) std::copy_n(pool_rows.data() + pick[c] * width, width, rows.data() + c * width);
        }
        templates = ag::constant(std::move(rows));
      } else {
        templates = ag::weighted_class_mean(w, pool_rows, pool_labels, n);
      }
      break;
    }
    case TemplateMethod::plain_average:
      templates = ag::weighted_class_mean(ag::constant(Tensor(Shape{pool.size()}, 1.0)), pool_rows, pool_labels, n);
      break;
    case TemplateMethod::random_sample: {
      std::vector<std::vector<std::size_t>> members(n);
      for (std::size_t i = 0; i < pool.size(); ++i) members[static_cast<std::size_t>(pool_labels[i])].push_back(i);
      Tensor rows(Shape{n, width});
      for (std::size_t c = 0; c < n; ++c) {
        if (members[c].empty()) continue;
        const std::size_t i = members[c][state.rng.index(members[c].size())];
        std::copy_n(pool_rows.data() + i * width, width, rows.data() + c * width);
      }
      templates = ag::constant(std::move(rows));
      break;
    }
  }

  std::vector<std::size_t> columns;
  std::vector<int> column_of(n, -1);
  for (std::size_t c = 0; c < n; ++c) {
    if (!covered[c]) continue;
    column_of[c] = static_cast<int>(columns.size());
    columns.push_back(c);
  }
  const auto batch_labels = data::gather_labels(batch);
  std::vector<int> targets;
  for (int l : batch_labels) {
    const int col = column_of.at(static_cast<std::size_t>(l));
    if (col < 0) throw PreconditionError("step_template: batch class " + std::to_string(l) + " has no template");
    targets.push_back(col);
  }

  const ag::Var t_sel = ag::reshape(ag::select_rows(templates, columns),
                                    {columns.size(), 2, state.shape.t, state.shape.d});
  const ag::Var e_batch = state.net.encoder.forward(data::stack_inputs(batch, state.shape));
  const ag::Var e_templates = state.net.encoder.forward(t_sel);
  const ag::Var s = state.net.score(e_batch, e_templates, metric);
  ag::Var loss = template_loss(s, targets, state.config.loss.alpha);
  loss = add_mmd(state, loss, e_batch, target, result);
  update(state, loss);
  result.loss = loss.item();
  ++state.progress.template_steps;
  return result;
}

// ---- schedule -------------------------------------------------------------

namespace {

std::vector<int> classes_of(std::span<const data::CsiSample> samples) {
  std::set<int> s;
  for (const auto& x : samples) s.insert(x.label);
  return {s.begin(), s.end()};
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, Phase phase, std::size_t epoch, std::size_t n) {
  Rng rng = Rng::derive(seed, {0xE90C, static_cast<std::uint64_t>(phase), epoch});
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  return idx;
}

std::vector<data::CsiSample> gather(std::span<const data::CsiSample> src, std::span<const std::size_t> idx) {
  std::vector<data::CsiSample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(src[i]);
  return out;
}

std::vector<data::CsiSample> draw_pool(TrainState& state, std::span<const data::CsiSample> src) {
  const std::size_t k = std::min(state.config.resolved_k_pool(state.classes), src.size());
  const auto idx = state.rng.sample_without_replacement(src.size(), k);
  return gather(src, idx);
}

void record(TrainState& state, const char* kind, const StepResult& r) {
  if (r.skipped) return;
  LossRecord rec;
  rec.step = state.step();
  rec.phase = state.progress.phase == Phase::finetune ? "finetune" : "pretrain";
  rec.kind = kind;
  rec.loss = r.loss;
  rec.mmd = r.mmd;
  state.log.push_back(std::move(rec));
}

void set_epoch_lr(TrainState& state) {
  const auto& c = state.config;
  double lr = c.learning_rate;
  if (c.decay_mode == DecayMode::lr_schedule) {
    lr *= std::pow(1.0 - c.lr_decay, static_cast<double>(state.progress.epoch));
  }
  state.optimizer.set_lr(lr);
}

bool has_finetune(const ScenarioConfig& c) {
  return c.scenario == data::Scenario::k_shot && c.k > 1 && c.resolved_finetune_epochs() > 0;
}

void check_splits(const ScenarioConfig& c, const TrainSplits& s) {
  using data::Scenario;
  if (s.train.empty()) throw ConfigError("scenario " + data::to_string(c.scenario) + " needs a non-empty training split");
  const bool needs_support = c.scenario == Scenario::k_shot || c.scenario == Scenario::new_class;
  if (needs_support && s.support.empty()) {
    throw ConfigError("scenario " + data::to_string(c.scenario) + " needs a support set");
  }
  if (!needs_support && !s.support.empty()) {
    throw ConfigError("scenario " + data::to_string(c.scenario) + " does not take a support set");
  }
  if (c.scenario == Scenario::zero_shot && (!s.test || s.test->size() == 0)) {
    throw ConfigError("zero-shot needs the unlabeled test split");
  }
  if (c.use_mmd && c.scenario == Scenario::new_class) {
    spdlog::warn("MK-MMD with differing train/support label sets: alignment may not help classification");
  }
}

}  // namespace

void train(TrainState& state, const TrainSplits& splits, const TrainOptions& options) {
  if (state.progress.phase == Phase::done) return;
  const auto& cfg = state.config;
  check_splits(cfg, splits);
  std::optional<AuditedTestSplit::TrainingGuard> guard;
  if (splits.test) guard.emplace(*splits.test);

  const auto train_classes = classes_of(splits.train);
  const auto support_classes = classes_of(splits.support);
  std::optional<Tensor> support_x;
  if (!splits.support.empty()) support_x = data::stack_inputs(splits.support, state.shape);

  auto pretrain_target = [&]() -> std::optional<Tensor> {
    if (!cfg.use_mmd) return std::nullopt;
    if (cfg.scenario == data::Scenario::zero_shot) {
      const std::size_t m = splits.test->size();
      const auto idx = state.rng.sample_without_replacement(m, std::min(cfg.batch_size, m));
      return splits.test->unlabeled_inputs(idx, state.shape);
    }
    return support_x;
  };

  std::uint64_t iterations = 0;
  auto budget_left = [&] { return !options.max_iterations || iterations < *options.max_iterations; };
  state.set_training(true);

  while (state.progress.phase == Phase::pretrain) {
    if (state.progress.epoch >= cfg.epochs) {
      state.progress.phase = has_finetune(cfg) ? Phase::finetune : Phase::done;
      state.progress.epoch = 0;
      state.progress.batch = 0;
      break;
    }
    const std::size_t n = splits.train.size();
    const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    if (state.progress.batch >= batches) {
      ++state.progress.epoch;
      state.progress.batch = 0;
      continue;
    }
    if (!budget_left()) return;
    set_epoch_lr(state);
    const auto order = epoch_order(cfg.seed, Phase::pretrain, state.progress.epoch, n);
    const std::size_t lo = state.progress.batch * cfg.batch_size;
    const std::size_t hi = std::min(lo + cfg.batch_size, n);
    const auto batch = gather(splits.train, std::span(order).subspan(lo, hi - lo));

    auto target = pretrain_target();
    record(state, "comparative", step_comparative(state, batch, target ? &*target : nullptr));
    const auto pool = draw_pool(state, splits.train);
    target = pretrain_target();
    record(state, "template", step_template(state, batch, pool, train_classes, target ? &*target : nullptr));
    ++state.progress.batch;
    ++iterations;
  }

  while (state.progress.phase == Phase::finetune) {
    if (state.progress.epoch >= cfg.resolved_finetune_epochs()) {
      state.progress.phase = Phase::done;
      break;
    }
    // each batch carries the whole support set, filled up from the train split
    const std::size_t fill = cfg.batch_size > splits.support.size() ? cfg.batch_size - splits.support.size() : 0;
    const std::size_t n = splits.train.size();
    const std::size_t batches = fill == 0 ? 1 : (n + fill - 1) / fill;
    if (state.progress.batch >= batches) {
      ++state.progress.epoch;
      state.progress.batch = 0;
      continue;
    }
    if (!budget_left()) return;
    set_epoch_lr(state);
    const auto order = epoch_order(cfg.seed, Phase::finetune, state.progress.epoch, n);
    std::vector<data::CsiSample> batch(splits.support.begin(), splits.support.end());
    const std::size_t lo = state.progress.batch * fill;
    for (std::size_t i = lo; i < std::min(lo + fill, n); ++i) batch.push_back(splits.train[order[i]]);

    const Tensor* target = cfg.use_mmd ? &*support_x : nullptr;
    const auto before = state.step();
    record(state, "comparative", step_comparative(state, batch, target));
    record(state, "template", step_template(state, batch, splits.support, support_classes, target));
    state.progress.finetune_steps += state.step() - before;
    ++state.progress.batch;
    ++iterations;
  }

  state.templates = final_templates(state, splits);
}

namespace {

TemplateSet method_templates(TrainState& state, std::span<const data::CsiSample> pool, bool support) {
  const Metric metric = state.config.resolved_metric();
  switch (state.config.template_method) {
    case TemplateMethod::plain_average:
      return plain_average_templates(pool, state.classes, state.shape);
    case TemplateMethod::random_sample:
      return random_sample_templates(pool, state.classes, state.shape, state.rng);
    case TemplateMethod::weight_net:
      break;
  }
  const TemplateModel model = state.template_model(metric);
  if (support) return templates_from_support(pool, model);
  const auto expected = classes_of(pool);
  TemplateSet t;
  // a pool draw can miss a class; redraw a few times before giving up
  for (int attempt = 0; attempt < 8; ++attempt) {
    t = generate_templates_indomain(pool, state.config.resolved_k_pool(state.classes), model, state.rng);
    if (std::all_of(expected.begin(), expected.end(), [&](int c) { return t.coverage[static_cast<std::size_t>(c)]; })) break;
  }
  return t;
}

}  // namespace

TemplateSet final_templates(TrainState& state, const TrainSplits& splits) {
  using data::Scenario;
  const Metric metric = state.config.resolved_metric();
  state.set_training(false);
  TemplateSet out;
  switch (state.config.scenario) {
    case Scenario::in_domain:
      out = method_templates(state, splits.train, false);
      break;
    case Scenario::k_shot:
      out = method_templates(state, splits.support, true);
      break;
    case Scenario::zero_shot: {
      const TemplateModel model = state.template_model(metric);
      const Tensor target = splits.test->unlabeled_inputs(state.shape);
      const std::size_t k = state.config.resolved_k_pool(state.classes);
      TemplateSet source;
      if (state.config.template_method == TemplateMethod::weight_net) {
        std::vector<data::CsiSample> drawn = draw_pool(state, splits.train);
        source = select_source_templates(drawn, model);
      } else {
        source = method_templates(state, splits.train, false);
      }
      out = select_target_templates(source, target, k, model, state.rng);
      break;
    }
    case Scenario::new_class: {
      out = method_templates(state, splits.train, false);
      const TemplateSet fresh = method_templates(state, splits.support, true);
      const std::size_t width = state.shape.numel();
      for (std::size_t c = 0; c < out.classes(); ++c) {
        if (!fresh.coverage[c]) continue;
        std::copy_n(fresh.templates.data() + c * width, width, out.templates.data() + c * width);
        out.provenance[c] = fresh.provenance[c];
        out.coverage[c] = true;
        out.fallback[c] = false;
      }
      break;
    }
  }
  state.set_training(true);
  return out;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

nlohmann::json progress_json(const Progress& p) {
  return {{"phase", static_cast<int>(p.phase)}, {"epoch", p.epoch}, {"batch", p.batch},
          {"comparative_steps", p.comparative_steps}, {"template_steps", p.template_steps},
          {"skipped_template_steps", p.skipped_template_steps}, {"finetune_steps", p.finetune_steps}};
}

Progress progress_from(const nlohmann::json& j) {
  Progress p;
  p.phase = static_cast<Phase>(j.at("phase").get<int>());
  p.epoch = j.at("epoch").get<std::size_t>();
  p.batch = j.at("batch").get<std::size_t>();
  p.comparative_steps = j.at("comparative_steps").get<std::uint64_t>();
  p.template_steps = j.at("template_steps").get<std::uint64_t>();
  p.skipped_template_steps = j.at("skipped_template_steps").get<std::uint64_t>();
  p.finetune_steps = j.at("finetune_steps").get<std::uint64_t>();
  return p;
}

}  // namespace

Archive checkpoint_archive(const TrainState& state) {
  Archive a;
  a.kind = "crossfi-checkpoint";
  a.meta["checkpoint_version"] = TrainState::kCheckpointVersion;
  a.meta["config"] = state.config.to_json();
  a.meta["shape"] = {{"t", state.shape.t}, {"d", state.shape.d}};
  a.meta["classes"] = state.classes;
  a.meta["progress"] = progress_json(state.progress);
  a.meta["rng"] = state.rng.state();
  for (const auto& p : state.parameters()) a.arrays["param/" + p.name] = p.var.value();
  for (const auto& b : const_cast<TrainState&>(state).net.encoder.buffers()) a.arrays["buffer/" + b.name] = *b.tensor;
  state.optimizer.save(a);
  if (state.normalizer.fitted()) {
    a.arrays["normalizer/mean"] = Tensor(Shape{state.normalizer.mean().size()}, state.normalizer.mean());
    a.arrays["normalizer/std"] = Tensor(Shape{state.normalizer.stddev().size()}, state.normalizer.stddev());
  }
  if (state.templates) {
    const Archive t = state.templates->to_archive();
    a.arrays["templates"] = t.array("templates");
    a.meta["templates"] = t.meta;
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : state.log) {
    log.push_back({r.step, r.phase, r.kind, r.loss, r.mmd ? nlohmann::json(*r.mmd) : nlohmann::json(nullptr)});
  }
  a.meta["log"] = log;
  return a;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  checkpoint_archive(state).save(path);
}

std::unique_ptr<TrainState> state_from_archive(const Archive& a) {
  if (a.kind != "crossfi-checkpoint") throw ArchiveError("archive is not a checkpoint (kind '" + a.kind + "')");
  try {
    const auto version = a.meta.at("checkpoint_version").get<std::uint32_t>();
    if (version != TrainState::kCheckpointVersion) {
      throw VersionMismatchError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(TrainState::kCheckpointVersion) + ")");
    }
    const ScenarioConfig config = ScenarioConfig::from_json(a.meta.at("config"));
    const data::SampleShape shape{a.meta.at("shape").at("t").get<std::size_t>(),
                                  a.meta.at("shape").at("d").get<std::size_t>()};
    auto state = std::make_unique<TrainState>(config, shape, a.meta.at("classes").get<std::size_t>());
    for (auto& p : state->parameters()) {
      Tensor v = a.array("param/" + p.name);
      if (v.shape() != p.var.shape()) throw ArchiveError("parameter shape mismatch for " + p.name);
      p.var.mutable_value() = std::move(v);
    }
    for (auto& b : state->net.encoder.buffers()) {
      Tensor v = a.array("buffer/" + b.name);
      if (v.shape() != b.tensor->shape()) throw ArchiveError("buffer shape mismatch for " + b.name);
      *b.tensor = std::move(v);
    }
    state->optimizer.load(a);
    state->progress = progress_from(a.meta.at("progress"));
    state->rng.set_state(a.meta.at("rng").get<std::string>());
    if (a.has("normalizer/mean")) {
      state->normalizer = data::Normalizer(a.array("normalizer/mean").vec(), a.array("normalizer/std").vec());
    }
    if (a.has("templates")) {
      Archive t;
      t.kind = "template-set";
      t.meta = a.meta.at("templates");
      t.arrays["templates"] = a.array("templates");
      state->templates = TemplateSet::from_archive(t);
    }
    for (const auto& r : a.meta.at("log")) {
      LossRecord rec{r.at(0).get<std::uint64_t>(), r.at(1).get<std::string>(), r.at(2).get<std::string>(),
                     r.at(3).get<double>(), std::nullopt};
      if (!r.at(4).is_null()) rec.mmd = r.at(4).get<double>();
      state->log.push_back(std::move(rec));
    }
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("checkpoint metadata malformed: ") + e.what());
  }
}

std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path) {
  return state_from_archive(Archive::load(path));
}

void write_loss_log(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write loss log " + path.string());
  out << "step,phase,kind,loss,mmd\n";
  out.precision(17);
  for (const auto& r : log) {
    out << r.step << ',' << r.phase << ',' << r.kind << ',' << r.loss << ',';
    if (r.mmd) out << *r.mmd;
    out << '\n';
  }
}

}  // namespace crossfi
