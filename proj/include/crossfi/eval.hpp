#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossfi/training.hpp"

namespace crossfi {

// Per-row argmax; ties go to the lowest column.
std::vector<int> argmax_rows(const Tensor& scores);

// Labels for [m, 2, t, D] inputs against the templates. Throws
// CoverageError for a class with neither coverage nor fallback.
std::vector<int> classify(const Tensor& inputs, const TemplateSet& templates, CsiNet& net, Metric metric);

struct MetricsReport {
  static constexpr int kFormatVersion = 1;

  double accuracy = 0.0;
  // Empty optional for classes without test samples.
  std::vector<std::optional<double>> per_class_accuracy;
  // confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
  std::string scenario;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();

  std::size_t total() const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static MetricsReport load(const std::filesystem::path& path);
};

MetricsReport make_report(std::span<const int> truth, std::span<const int> predicted, std::size_t classes,
                          const std::string& scenario, std::uint64_t seed);

MetricsReport evaluate(std::span<const data::CsiSample> test, const TemplateSet& templates, CsiNet& net,
                       Metric metric, std::size_t classes, const std::string& scenario, std::uint64_t seed);
MetricsReport evaluate(const AuditedTestSplit& test, const TemplateSet& templates, CsiNet& net, Metric metric,
                       std::size_t classes, const std::string& scenario, std::uint64_t seed);

// Same encoder with a linear head trained by cross-entropy on `train`,
// scored on `test`. Uses the config's encoder, epochs, batch size, rate
// and seed.
MetricsReport baseline_classifier(std::span<const data::CsiSample> train, std::span<const data::CsiSample> test,
                                  const ScenarioConfig& config, data::SampleShape shape, std::size_t classes);

struct ScenarioData {
  std::vector<data::CsiSample> samples;
  data::SampleShape shape;
  std::size_t classes = 0;
};

struct ScenarioRun {
  std::unique_ptr<TrainState> state;
  MetricsReport report;
  std::size_t labeled_test_reads_during_training = 0;
  std::size_t unlabeled_test_reads = 0;
};

// Split, normalize (fitted on train), train and evaluate one scenario.
ScenarioRun run_scenario(const ScenarioConfig& config, const ScenarioData& data,
                         const TrainOptions& options = {});

// Normalized splits exactly as run_scenario builds them.
struct PreparedSplits {
  data::Splits splits;
  data::Normalizer normalizer;
};
PreparedSplits prepare_splits(const ScenarioConfig& config, const ScenarioData& data);

struct AblationEntry {
  std::string name;
  ScenarioConfig config;
};

struct AblationRow {
  std::string name;
  ScenarioConfig config;
  std::optional<MetricsReport> report;
  std::string error;  // non-empty for a failed row
};

// Runs every entry; failures become failed rows and the grid continues.
std::vector<AblationRow> run_ablation(const std::vector<AblationEntry>& grid, const ScenarioData& data);

// Header: name,scenario,k,metric,template_method,use_mmd,seed,status,accuracy,error
void write_ablation_table(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace crossfi
