#include "crossfi/eval.hpp"

#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "crossfi/error.hpp"

namespace crossfi {

namespace {
constexpr std::size_t kInferenceChunk = 256;
}

std::vector<int> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2 || scores.dim(1) == 0) throw DimensionError("argmax_rows: need a non-empty matrix");
  std::vector<int> out(scores.dim(0));
  for (std::size_t i = 0; i < scores.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.dim(1); ++j) {
      if (scores.at(i, j) > scores.at(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> classify(const Tensor& inputs, const TemplateSet& templates, CsiNet& net, Metric metric) {
  const int missing = templates.first_unusable();
  if (missing >= 0) {
    throw CoverageError(missing, "class " + std::to_string(missing) + " has no template and no fallback");
  }
  if (inputs.rank() != 4) throw DimensionError("classify: inputs must be [m, 2, t, D]");
  ag::NoGradGuard no_grad;
  const bool was_training = net.encoder.training();
  net.encoder.set_training(false);
  const ag::Var keys = net.encoder.forward(templates.templates);
  const std::size_t m = inputs.dim(0);
  const std::size_t width = inputs.row_size();
  std::vector<int> out;
  out.reserve(m);
  for (std::size_t lo = 0; lo < m; lo += kInferenceChunk) {
    const std::size_t hi = std::min(lo + kInferenceChunk, m);
    Shape shape = inputs.shape();
    shape[0] = hi - lo;
    Tensor chunk(shape, std::vector<double>(inputs.data() + lo * width, inputs.data() + hi * width));
    const ag::Var s = net.score(net.encoder.forward(chunk), keys, metric);
    for (int y : argmax_rows(s.value())) out.push_back(y);
  }
  net.encoder.set_training(was_training);
  return out;
}

// ---- reports --------------------------------------------------------------

std::size_t MetricsReport::total() const {
  std::size_t n = 0;
  for (const auto& row : confusion) {
    for (auto c : row) n += c;
  }
  return n;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& a : per_class_accuracy) per_class.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"format_version", kFormatVersion}, {"accuracy", accuracy}, {"per_class_accuracy", per_class},
          {"confusion", confusion},           {"scenario", scenario}, {"seed", seed},
          {"extra", extra}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) {
      throw VersionMismatchError("metrics report format version mismatch");
    }
    r.accuracy = j.at("accuracy").get<double>();
    for (const auto& a : j.at("per_class_accuracy")) {
      r.per_class_accuracy.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
    }
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.scenario = j.at("scenario").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("metrics report malformed: ") + e.what());
  }
  return r;
}

void MetricsReport::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write metrics report " + path.string());
  out << to_json().dump(2) << '\n';
}

MetricsReport MetricsReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read metrics report " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("metrics report is not JSON: ") + e.what());
  }
}

MetricsReport make_report(std::span<const int> truth, std::span<const int> predicted, std::size_t classes,
                          const std::string& scenario, std::uint64_t seed) {
  if (truth.size() != predicted.size()) throw DimensionError("make_report: label counts differ");
  if (truth.empty()) throw DataError("evaluation on an empty test split");
  MetricsReport r;
  r.scenario = scenario;
  r.seed = seed;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes || predicted[i] < 0 ||
        static_cast<std::size_t>(predicted[i]) >= classes) {
      throw DataError("make_report: label outside [0, " + std::to_string(classes) + ")");
    }
    ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  std::size_t trace = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t row = 0;
    for (auto v : r.confusion[c]) row += v;
    trace += r.confusion[c][c];
    r.per_class_accuracy.push_back(row == 0 ? std::nullopt
                                            : std::optional<double>(static_cast<double>(r.confusion[c][c]) /
                                                                    static_cast<double>(row)));
  }
  r.accuracy = static_cast<double>(trace) / static_cast<double>(truth.size());
  return r;
}

MetricsReport evaluate(std::span<const data::CsiSample> test, const TemplateSet& templates, CsiNet& net,
                       Metric metric, std::size_t classes, const std::string& scenario, std::uint64_t seed) {
  if (test.empty()) throw DataError("evaluation on an empty test split");
  const data::SampleShape shape{net.encoder.t(), net.encoder.d()};
  const auto predicted = classify(data::stack_inputs(test, shape), templates, net, metric);
  const auto truth = data::gather_labels(test);
  return make_report(truth, predicted, classes, scenario, seed);
}

MetricsReport evaluate(const AuditedTestSplit& test, const TemplateSet& templates, CsiNet& net, Metric metric,
                       std::size_t classes, const std::string& scenario, std::uint64_t seed) {
  return evaluate(test.labeled(), templates, net, metric, classes, scenario, seed);
}

// ---- baseline -------------------------------------------------------------

MetricsReport baseline_classifier(std::span<const data::CsiSample> train, std::span<const data::CsiSample> test,
                                  const ScenarioConfig& config, data::SampleShape shape, std::size_t classes) {
  if (train.empty()) throw DataError("baseline: empty training split");
  if (test.empty()) throw DataError("baseline: empty test split");
  Rng init = Rng::derive(config.seed, {0xBA5E});
  Encoder encoder(config.encoder, shape.t, shape.d, init);
  nn::Linear head(config.encoder.d1, classes, init);
  nn::ParamList params = encoder.parameters();
  head.collect("classifier", params);
  AdamW opt(params, config.learning_rate,
            config.decay_mode == DecayMode::weight_decay ? config.lr_decay : 0.0);

  const std::size_t n = train.size();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng order_rng = Rng::derive(config.seed, {0xBA5E, epoch});
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    order_rng.shuffle(order);
    if (config.decay_mode == DecayMode::lr_schedule) {
      opt.set_lr(config.learning_rate * std::pow(1.0 - config.lr_decay, static_cast<double>(epoch)));
    }
    for (std::size_t lo = 0; lo < n; lo += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + lo, std::min(config.batch_size, n - lo));
      const ag::Var logits = head(encoder.forward(data::stack_inputs(train, idx, shape)));
      const auto labels = data::gather_labels(train, idx);
      const ag::Var loss = ag::softmax_cross_entropy(logits, labels);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
    }
  }

  ag::NoGradGuard no_grad;
  encoder.set_training(false);
  std::vector<int> predicted;
  for (std::size_t lo = 0; lo < test.size(); lo += kInferenceChunk) {
    const auto chunk = test.subspan(lo, std::min(kInferenceChunk, test.size() - lo));
    const ag::Var logits = head(encoder.forward(data::stack_inputs(chunk, shape)));
    for (int y : argmax_rows(logits.value())) predicted.push_back(y);
  }
  MetricsReport r = make_report(data::gather_labels(test), predicted, classes, "baseline", config.seed);
  return r;
}

// ---- pipeline -------------------------------------------------------------

PreparedSplits prepare_splits(const ScenarioConfig& config, const ScenarioData& data) {
  config.validate();
  PreparedSplits out;
  out.splits = data::split_scenario(data.samples, config.split_config());
  if (out.splits.train.empty()) throw DataError("scenario split produced an empty training set");
  if (out.splits.test.empty()) throw DataError("scenario split produced an empty test set");
  out.normalizer.fit(out.splits.train, data.shape);
  out.normalizer.apply(out.splits.train, data.shape);
  out.normalizer.apply(out.splits.support, data.shape);
  out.normalizer.apply(out.splits.test, data.shape);
  return out;
}

ScenarioRun run_scenario(const ScenarioConfig& config, const ScenarioData& data, const TrainOptions& options) {
  PreparedSplits prepared = prepare_splits(config, data);
  AuditedTestSplit test(std::move(prepared.splits.test));
  ScenarioRun run;
  run.state = std::make_unique<TrainState>(config, data.shape, data.classes);
  run.state->normalizer = prepared.normalizer;
  TrainSplits splits{std::move(prepared.splits.train), std::move(prepared.splits.support), &test};
  train(*run.state, splits, options);
  run.labeled_test_reads_during_training = test.violations();
  run.unlabeled_test_reads = test.unlabeled_reads();
  if (!run.state->templates) return run;  // interrupted
  const Metric metric = config.resolved_metric();
  run.report = evaluate(test, *run.state->templates, run.state->net, metric, data.classes,
                        data::to_string(config.scenario), config.seed);
  run.report.extra["metric"] = to_string(metric);
  run.report.extra["template_method"] = to_string(config.template_method);
  run.report.extra["k"] = config.k;
  run.report.extra["finetune_steps"] = run.state->progress.finetune_steps;
  run.report.extra["labeled_test_reads_during_training"] = run.labeled_test_reads_during_training;
  return run;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationEntry>& grid, const ScenarioData& data) {
  std::vector<AblationRow> rows;
  for (const auto& entry : grid) {
    AblationRow row{entry.name, entry.config, std::nullopt, {}};
    try {
      row.report = run_scenario(entry.config, data).report;
      spdlog::info("ablation {}: accuracy {:.4f}", entry.name, row.report->accuracy);
    } catch (const std::exception& e) {
      row.error = e.what();
      spdlog::warn("ablation {} failed: {}", entry.name, e.what());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_table(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write ablation table " + path.string());
  out << "name,scenario,k,metric,template_method,use_mmd,seed,status,accuracy,error\n";
  out.precision(17);
  for (const auto& r : rows) {
    std::string err = r.error;
    for (char& c : err) {
      if (c == ',' || c == '\n') c = ';';
    }
    out << r.name << ',' << data::to_string(r.config.scenario) << ',' << r.config.k << ','
        << to_string(r.config.resolved_metric()) << ',' << to_string(r.config.template_method) << ','
        << (r.config.use_mmd ? 1 : 0) << ',' << r.config.seed << ',' << (r.report ? "ok" : "failed") << ',';
    if (r.report) out << r.report->accuracy;
    out << ',' << err << '\n';
  }
}

}  // namespace crossfi
