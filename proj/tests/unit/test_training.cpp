#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "crossfi/error.hpp"
#include "crossfi/eval.hpp"
#include "crossfi/training.hpp"
#include "support.hpp"

using namespace crossfi;
namespace fs = std::filesystem;

namespace {

struct Toy {
  ScenarioData data;
  Toy() {
    auto ds = testing::tiny_dataset(16);
    data.samples = data::dataset_samples(ds);
    data.shape = {ds.manifest.packets_per_sample, ds.manifest.subcarriers};
    data.classes = ds.manifest.classes.size();
  }
};

const Toy& toy() {
  static Toy t;
  return t;
}

ScenarioConfig small_config(data::Scenario scenario = data::Scenario::in_domain) {
  ScenarioConfig c;
  c.scenario = scenario;
  c.epochs = 1;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.seed = 5;
  c.encoder.d1 = 16;
  c.head.d2 = 8;
  c.head.heads = 2;
  return c;
}

std::vector<Tensor> snapshot(const nn::ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.var.value());
  return out;
}

bool same(const std::vector<Tensor>& a, const nn::ParamList& params) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == params[i].var.value())) return false;
  }
  return true;
}

// `per_class` domain-0 samples of every class.
std::vector<data::CsiSample> balanced_pool(std::size_t per_class) {
  std::vector<data::CsiSample> pool;
  std::vector<std::size_t> taken(4, 0);
  for (const auto& s : toy().data.samples) {
    if (s.domain == 0 && taken[s.label] < per_class) {
      ++taken[s.label];
      pool.push_back(s);
    }
  }
  return pool;
}

std::vector<data::CsiSample> first(std::size_t n, std::size_t offset = 0) {
  const auto& s = toy().data.samples;
  return {s.begin() + offset, s.begin() + offset + n};
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("crossfi_test_" + name); }

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("scenario config validation and JSON round trip") {
  auto c = small_config(data::Scenario::zero_shot);
  c.use_mmd = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.use_unlabeled_target = true;
  c.validate();
  auto back = ScenarioConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto j = small_config().to_json();
  j["epochz"] = 3;
  try {
    ScenarioConfig::from_json(j);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("epochz") != std::string::npos);
  }
  CHECK(small_config(data::Scenario::k_shot).resolved_metric() == Metric::gaussian);
  CHECK(small_config().resolved_metric() == Metric::attention);
  ScenarioConfig ten;
  ten.epochs = 10;
  CHECK(ten.resolved_finetune_epochs() == 2);
  CHECK(ten.resolved_k_pool(4) == 32);
  CHECK(ten.resolved_k_max(4) == 64);
}

TEST_CASE("zero learning rate leaves every parameter bit-unchanged") {
  TrainState state(small_config(), toy().data.shape, 4);
  state.optimizer.set_lr(0.0);
  const auto before = snapshot(state.parameters());
  auto batch = first(8);
  step_comparative(state, batch);
  auto r = step_template(state, batch, first(24), std::vector<int>{0, 1, 2, 3});
  CHECK(same(before, state.parameters()));
  CHECK(r.loss >= 0.0);
}

TEST_CASE("without MMD the comparative step reports the pure comparative loss") {
  TrainState state(small_config(), toy().data.shape, 4);
  auto batch = first(8, 30);
  double expected;
  {
    ag::NoGradGuard ng;
    auto s = state.net.self_similarity(ag::constant(data::stack_inputs(batch, state.shape)), Metric::attention);
    auto labels = data::gather_labels(batch);
    expected = comparative_loss(s, labels, labels, state.config.loss.alpha).item();
  }
  auto r = step_comparative(state, batch);
  CHECK(r.loss == expected);
  CHECK_FALSE(r.mmd.has_value());
}

TEST_CASE("one template step moves the Weight-Net parameters") {
  TrainState state(small_config(), toy().data.shape, 4);
  const auto before = snapshot(state.weightnet.parameters());
  const auto pool = balanced_pool(4);
  auto r = step_template(state, first(8), pool, std::vector<int>{0, 1, 2, 3});
  REQUIRE_FALSE(r.skipped);
  CHECK_FALSE(same(before, state.weightnet.parameters()));
}

TEST_CASE("cutting the template-construction path changes the encoder update") {
  auto run = [&](bool path) {
    auto c = small_config();
    c.template_grad_path = path;
    TrainState state(c, toy().data.shape, 4);
    REQUIRE_FALSE(step_template(state, first(8), balanced_pool(4), std::vector<int>{0, 1, 2, 3}).skipped);
    return snapshot(state.net.encoder.parameters());
  };
  const auto with = run(true), without = run(false);
  bool differs = false;
  for (std::size_t i = 0; i < with.size(); ++i) differs = differs || !(with[i] == without[i]);
  CHECK(differs);
}

TEST_CASE("a template step with an uncovered class is skipped") {
  TrainState state(small_config(), toy().data.shape, 4);
  std::vector<data::CsiSample> pool;
  for (const auto& s : toy().data.samples) {
    if (s.label != 2 && pool.size() < 12) pool.push_back(s);
  }
  const auto before = snapshot(state.parameters());
  auto r = step_template(state, first(8), pool, std::vector<int>{0, 1, 2, 3});
  CHECK(r.skipped);
  CHECK(state.progress.skipped_template_steps == 1);
  CHECK(same(before, state.parameters()));
}

TEST_CASE("training alternates comparative and template steps 1:1") {
  auto cfg = small_config();
  auto prepared = prepare_splits(cfg, toy().data);
  TrainState state(cfg, toy().data.shape, 4);
  train(state, {prepared.splits.train, {}, nullptr});
  const auto& p = state.progress;
  CHECK(p.comparative_steps == (prepared.splits.train.size() + 7) / 8);
  CHECK(p.comparative_steps == p.template_steps + p.skipped_template_steps);
  CHECK(p.phase == Phase::done);
  REQUIRE(state.templates.has_value());
  CHECK(state.templates->first_unusable() == -1);
  for (std::size_t i = 0; i < state.log.size(); ++i) {
    CHECK(state.log[i].kind == (i % 2 == 0 ? "comparative" : "template"));
  }
}

TEST_CASE("one-shot skips fine-tuning; two-shot fine-tunes") {
  auto cfg = small_config(data::Scenario::k_shot);
  cfg.k = 1;
  auto prepared = prepare_splits(cfg, toy().data);
  AuditedTestSplit test(prepared.splits.test);
  TrainState one(cfg, toy().data.shape, 4);
  train(one, {prepared.splits.train, prepared.splits.support, &test});
  CHECK(one.progress.finetune_steps == 0);
  CHECK(one.step() == 2 * one.progress.comparative_steps - one.progress.skipped_template_steps);
  for (const auto& r : one.log) CHECK(r.phase == "pretrain");
  CHECK(one.templates->provenance[0] == Provenance::support_sample);

  cfg.k = 2;
  auto p2 = prepare_splits(cfg, toy().data);
  TrainState two(cfg, toy().data.shape, 4);
  train(two, {p2.splits.train, p2.splits.support, nullptr});
  CHECK(two.progress.finetune_steps > 0);
  CHECK(test.violations() == 0);
}

TEST_CASE("comparative loss trends down on separable data") {
  auto cfg = small_config();
  TrainState state(cfg, toy().data.shape, 4);
  std::vector<data::CsiSample> src;
  for (const auto& s : toy().data.samples) {
    if (s.domain == 0) src.push_back(s);
  }
  Rng rng(3);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    std::vector<data::CsiSample> batch;
    for (auto i : rng.sample_without_replacement(src.size(), 8)) batch.push_back(src[i]);
    losses.push_back(step_comparative(state, batch).loss);
  }
  auto avg = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += losses[i];
    return s / 20;
  };
  CHECK(avg(180) < avg(0));
}

TEST_CASE("MMD against the unlabeled target is logged in zero-shot") {
  auto cfg = small_config(data::Scenario::zero_shot);
  cfg.use_mmd = true;
  cfg.use_unlabeled_target = true;
  auto run = run_scenario(cfg, toy().data);
  for (const auto& r : run.state->log) CHECK(r.mmd.has_value());
  CHECK(run.labeled_test_reads_during_training == 0);
  CHECK(run.unlabeled_test_reads > 0);
  auto path = tmp("loss_log.csv");
  write_loss_log(run.state->log, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,phase,kind,loss,mmd");
}

TEST_CASE("the audit wrapper counts labeled reads made during training") {
  AuditedTestSplit split(first(4));
  split.labeled();
  CHECK(split.labeled_reads() == 1);
  CHECK(split.violations() == 0);
  {
    AuditedTestSplit::TrainingGuard guard(split);
    auto x = split.unlabeled_inputs(toy().data.shape);
    CHECK(x.dim(0) == 4);
    split.labeled();
  }
  CHECK(split.violations() == 1);
  CHECK(split.unlabeled_reads() == 1);
}

TEST_CASE("checkpoints: byte-stable round trip, exact resume, corruption and version checks") {
  auto cfg = small_config();
  auto prepared = prepare_splits(cfg, toy().data);
  TrainSplits splits{prepared.splits.train, {}, nullptr};

  TrainState full(cfg, toy().data.shape, 4);
  full.normalizer = prepared.normalizer;
  train(full, splits);

  TrainState part(cfg, toy().data.shape, 4);
  part.normalizer = prepared.normalizer;
  train(part, splits, TrainOptions{3});
  CHECK(part.progress.phase == Phase::pretrain);
  const auto p1 = tmp("ckpt1.cfx"), p2 = tmp("ckpt2.cfx");
  save_checkpoint(part, p1);
  auto restored = load_checkpoint(p1);
  save_checkpoint(*restored, p2);
  CHECK(bytes(p1) == bytes(p2));

  train(*restored, splits);
  CHECK(restored->progress == full.progress);
  CHECK(restored->log == full.log);
  CHECK(same(snapshot(full.parameters()), restored->parameters()));
  CHECK(restored->templates->templates == full.templates->templates);

  auto raw = bytes(p1);
  raw[raw.size() / 2] ^= 0x5A;
  const auto bad = tmp("ckpt_bad.cfx");
  std::ofstream(bad, std::ios::binary) << raw;
  CHECK_THROWS_AS(load_checkpoint(bad), ArchiveError);
  std::ofstream(bad, std::ios::binary) << raw.substr(0, 40);
  CHECK_THROWS_AS(load_checkpoint(bad), ArchiveError);

  Archive a = checkpoint_archive(part);
  a.meta["checkpoint_version"] = 99;
  CHECK_THROWS_AS(state_from_archive(a), VersionMismatchError);
}

TEST_CASE("identical seeds give bit-identical runs") {
  auto cfg = small_config(data::Scenario::k_shot);
  cfg.k = 2;
  auto a = run_scenario(cfg, toy().data);
  auto b = run_scenario(cfg, toy().data);
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(same(snapshot(a.state->parameters()), b.state->parameters()));
}

TEST_CASE("lr schedule mode decays the learning rate per epoch") {
  auto cfg = small_config();
  cfg.decay_mode = DecayMode::lr_schedule;
  cfg.lr_decay = 0.5;
  cfg.epochs = 2;
  auto prepared = prepare_splits(cfg, toy().data);
  TrainState state(cfg, toy().data.shape, 4);
  train(state, {prepared.splits.train, {}, nullptr});
  CHECK(state.optimizer.lr() < cfg.learning_rate);
}

}
