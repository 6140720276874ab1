#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossfi/data.hpp"
#include "crossfi/defaults.hpp"
#include "crossfi/losses.hpp"
#include "crossfi/templates.hpp"

namespace crossfi {

enum class TemplateMethod { weight_net, plain_average, random_sample };
TemplateMethod parse_template_method(const std::string& s);
std::string to_string(TemplateMethod m);

// How the 0.01 decay is applied: decoupled weight decay or a per-epoch rate decay.
enum class DecayMode { weight_decay, lr_schedule };
DecayMode parse_decay_mode(const std::string& s);
std::string to_string(DecayMode m);

struct ScenarioConfig {
  data::Scenario scenario = data::Scenario::in_domain;
  std::size_t k = 1;
  // Unset: gaussian for k-shot, attention otherwise.
  std::optional<Metric> metric;
  bool use_mmd = false;
  bool use_unlabeled_target = false;
  std::size_t epochs = defaults::kEpochs;
  // Unset: 20% of epochs (at least one).
  std::optional<std::size_t> finetune_epochs;
  std::size_t batch_size = defaults::kBatchSize;
  double learning_rate = defaults::kLearningRate;
  double lr_decay = defaults::kDecay;
  DecayMode decay_mode = DecayMode::weight_decay;
  std::uint64_t seed = 0;
  TemplateMethod template_method = TemplateMethod::weight_net;
  // 0 selects kPoolPerClass * n / kWeightNetCapacityPerClass * n.
  std::size_t k_pool = 0;
  std::size_t k_max = 0;
  // false detaches the pool similarity before Weight-Net, cutting the
  // template-construction gradient into the encoder.
  bool template_grad_path = true;
  std::vector<int> source_domains{0};
  std::vector<int> target_domains{1};
  int new_class = -1;
  double train_fraction = defaults::kTrainFraction;
  EncoderConfig encoder;
  AttentionHeadConfig head;
  LossConfig loss;

  Metric resolved_metric() const;
  std::size_t resolved_finetune_epochs() const;
  std::size_t resolved_k_pool(std::size_t classes) const;
  std::size_t resolved_k_max(std::size_t classes) const;
  data::SplitConfig split_config() const;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Throws SchemaError naming the offending field.
  static ScenarioConfig from_json(const nlohmann::json& j);
};

// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW() = default;
  AdamW(nn::ParamList params, double lr, double weight_decay);

  void step();
  void zero_grad();
  double lr() const noexcept { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::uint64_t steps() const noexcept { return t_; }
  const nn::ParamList& params() const noexcept { return params_; }

  void save(Archive& a) const;
  void load(const Archive& a);

 private:
  nn::ParamList params_;
  std::vector<Tensor> m_, v_;
  double lr_ = defaults::kLearningRate;
  double weight_decay_ = 0.0;
  std::uint64_t t_ = 0;
};

struct LossRecord {
  std::uint64_t step = 0;
  std::string phase;  // pretrain | finetune
  std::string kind;   // comparative | template
  double loss = 0.0;
  std::optional<double> mmd;  // weighted MMD term when enabled
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

enum class Phase { pretrain, finetune, done };

struct Progress {
  Phase phase = Phase::pretrain;
  std::size_t epoch = 0;
  std::size_t batch = 0;  // next batch within the epoch
  std::uint64_t comparative_steps = 0;
  std::uint64_t template_steps = 0;
  std::uint64_t skipped_template_steps = 0;
  std::uint64_t finetune_steps = 0;
  friend bool operator==(const Progress&, const Progress&) = default;
};

struct TrainState {
  static constexpr std::uint32_t kCheckpointVersion = 1;

  ScenarioConfig config;
  data::SampleShape shape;
  std::size_t classes = 0;
  CsiNet net;
  WeightNet weightnet;
  AdamW optimizer;
  Progress progress;
  Rng rng;
  data::Normalizer normalizer;
  std::optional<TemplateSet> templates;
  std::vector<LossRecord> log;

  TrainState(const ScenarioConfig& config, data::SampleShape shape, std::size_t classes);
  TrainState(TrainState&&) = delete;

  std::uint64_t step() const noexcept { return progress.comparative_steps + progress.template_steps; }
  nn::ParamList parameters() const;
  TemplateModel template_model(Metric metric);
  void set_training(bool training) { net.encoder.set_training(training); }
};

// Test-split wrapper that counts every labeled read. Training code may only
// touch unlabeled inputs; labeled reads while a training guard is active
// are violations.
class AuditedTestSplit {
 public:
  explicit AuditedTestSplit(std::vector<data::CsiSample> samples) : samples_(std::move(samples)) {}

  std::size_t size() const noexcept { return samples_.size(); }
  const std::vector<data::CsiSample>& labeled() const;
  Tensor unlabeled_inputs(data::SampleShape shape) const;
  Tensor unlabeled_inputs(std::span<const std::size_t> indices, data::SampleShape shape) const;

  std::size_t labeled_reads() const noexcept { return labeled_reads_; }
  std::size_t unlabeled_reads() const noexcept { return unlabeled_reads_; }
  std::size_t violations() const noexcept { return violations_; }

  class TrainingGuard {
   public:
    explicit TrainingGuard(const AuditedTestSplit& s) : split_(s) { ++split_.training_depth_; }
    ~TrainingGuard() { --split_.training_depth_; }
    TrainingGuard(const TrainingGuard&) = delete;
    TrainingGuard& operator=(const TrainingGuard&) = delete;

   private:
    const AuditedTestSplit& split_;
  };

 private:
  std::vector<data::CsiSample> samples_;
  mutable std::size_t labeled_reads_ = 0;
  mutable std::size_t unlabeled_reads_ = 0;
  mutable std::size_t violations_ = 0;
  mutable int training_depth_ = 0;
};

struct StepResult {
  double loss = 0.0;
  std::optional<double> mmd;
  bool skipped = false;
};

// One optimizer update on the comparative loss of `batch` paired with
// itself, plus mmd_weight * MK-MMD against `target` when given.
StepResult step_comparative(TrainState& state, std::span<const data::CsiSample> batch,
                            const Tensor* target = nullptr);

// Regenerates templates from `pool` and takes one optimizer update on the
// template loss of `batch` (plus MK-MMD against `target` when given).
// Skipped with a warning when a class of `expected` is not covered.
StepResult step_template(TrainState& state, std::span<const data::CsiSample> batch,
                         std::span<const data::CsiSample> pool, std::span<const int> expected,
                         const Tensor* target = nullptr);

struct TrainSplits {
  std::vector<data::CsiSample> train;
  std::vector<data::CsiSample> support;
  const AuditedTestSplit* test = nullptr;
};

struct TrainOptions {
  // Stop after this many total iterations (for interrupted runs); resumed
  // by calling train again on the same state.
  std::optional<std::uint64_t> max_iterations;
};

// Runs (or continues) the scenario schedule. Leaves state.templates set to
// the inference templates once the schedule completes.
void train(TrainState& state, const TrainSplits& splits, const TrainOptions& options = {});

// Builds the inference templates for the state's scenario.
TemplateSet final_templates(TrainState& state, const TrainSplits& splits);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
Archive checkpoint_archive(const TrainState& state);
// Returns a fully restored state or throws without partial output.
std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path);
std::unique_ptr<TrainState> state_from_archive(const Archive& archive);

void write_loss_log(const std::vector<LossRecord>& log, const std::filesystem::path& path);

}  // namespace crossfi
