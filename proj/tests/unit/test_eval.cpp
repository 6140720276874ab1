#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "crossfi/error.hpp"
#include "crossfi/eval.hpp"
#include "support.hpp"

using namespace crossfi;
using testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Net {
  Rng rng{31};
  data::SampleShape shape{4, 3};
  CsiNet net{Encoder(EncoderConfig{}, 4, 3, rng), AttentionHead(64, AttentionHeadConfig{}, rng)};
};

TemplateSet covered(Tensor templates) {
  TemplateSet t;
  const std::size_t n = templates.dim(0);
  t.templates = std::move(templates);
  t.provenance.assign(n, Provenance::support_sample);
  t.coverage.assign(n, true);
  t.fallback.assign(n, false);
  return t;
}

ScenarioData toy_data() {
  auto ds = testing::tiny_dataset(12);
  return {data::dataset_samples(ds), {ds.manifest.packets_per_sample, ds.manifest.subcarriers}, 4};
}

ScenarioConfig quick(Metric m) {
  ScenarioConfig c;
  c.epochs = 1;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.seed = 2;
  c.metric = m;
  c.encoder.d1 = 16;
  c.head.d2 = 8;
  return c;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("argmax picks the maximum and breaks ties toward the lowest class") {
  CHECK(argmax_rows(Tensor({1, 3}, std::vector<double>{0.1, 0.9, 0.3})) == std::vector<int>{1});
  CHECK(argmax_rows(Tensor({1, 2}, std::vector<double>{0.5, 0.5})) == std::vector<int>{0});
  Rng rng(1);
  auto s = random_tensor({20, 5}, rng);
  auto scaled = s;
  for (auto& v : scaled.vec()) v *= 3.7;
  CHECK(argmax_rows(s) == argmax_rows(scaled));
}

TEST_CASE("a sample equal to its class template is classified to that class (gaussian)") {
  Net n;
  auto tpl = random_tensor({3, 2, 4, 3}, n.rng);
  auto labels = classify(tpl, covered(tpl), n.net, Metric::gaussian);
  CHECK(labels == std::vector<int>{0, 1, 2});
}

TEST_CASE("classify is permutation-equivariant") {
  Net n;
  auto tpl = covered(random_tensor({3, 2, 4, 3}, n.rng));
  auto x = random_tensor({6, 2, 4, 3}, n.rng);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  Tensor xp(x.shape());
  const std::size_t w = 24;
  for (std::size_t i = 0; i < 6; ++i) std::copy_n(x.data() + perm[i] * w, w, xp.data() + i * w);
  for (Metric m : {Metric::attention, Metric::gaussian, Metric::cosine}) {
    auto a = classify(x, tpl, n.net, m), b = classify(xp, tpl, n.net, m);
    for (std::size_t i = 0; i < 6; ++i) CHECK(b[i] == a[perm[i]]);
  }
}

TEST_CASE("an unusable class is an inference error naming the class") {
  Net n;
  auto tpl = covered(random_tensor({3, 2, 4, 3}, n.rng));
  tpl.coverage[1] = false;
  try {
    classify(random_tensor({2, 2, 4, 3}, n.rng), tpl, n.net, Metric::gaussian);
    FAIL("expected a coverage error");
  } catch (const CoverageError& e) {
    CHECK(e.label() == 1);
    CHECK(std::string(e.what()).find("class 1") != std::string::npos);
  }
  tpl.fallback[1] = true;
  CHECK(classify(random_tensor({2, 2, 4, 3}, n.rng), tpl, n.net, Metric::gaussian).size() == 2);
}

TEST_CASE("reports are internally consistent") {
  const std::vector<int> truth{0, 0, 1, 1, 2, 2, 2}, perfect = truth, pred{0, 1, 1, 1, 2, 0, 2};
  auto r = make_report(truth, perfect, 4, "in-domain", 3);
  CHECK(r.accuracy == 1.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) CHECK(r.confusion[i][j] == 0);
  CHECK_FALSE(r.per_class_accuracy[3].has_value());

  auto q = make_report(truth, pred, 3, "in-domain", 3);
  std::size_t trace = 0;
  for (std::size_t i = 0; i < 3; ++i) trace += q.confusion[i][i];
  CHECK(q.accuracy == double(trace) / double(q.total()));
  CHECK(q.confusion[0][0] + q.confusion[0][1] + q.confusion[0][2] == 2);
  auto back = MetricsReport::from_json(q.to_json());
  CHECK(back.to_json() == q.to_json());
  CHECK_THROWS_AS(make_report({}, {}, 3, "x", 0), DataError);
}

TEST_CASE("a uniform random predictor lands within three sigma of chance") {
  Rng rng(77);
  std::vector<int> truth, pred;
  for (int i = 0; i < 1000; ++i) {
    truth.push_back(static_cast<int>(rng.index(6)));
    pred.push_back(static_cast<int>(rng.index(6)));
  }
  auto r = make_report(truth, pred, 6, "stub", 77);
  const double p = 1.0 / 6.0, sigma = std::sqrt(p * (1 - p) / 1000.0);
  CHECK(std::abs(r.accuracy - p) <= 3 * sigma);
}

TEST_CASE("evaluate rejects an empty split") {
  Net n;
  auto tpl = covered(random_tensor({3, 2, 4, 3}, n.rng));
  CHECK_THROWS_AS(evaluate(std::span<const data::CsiSample>{}, tpl, n.net, Metric::gaussian, 3, "x", 0), DataError);
}

TEST_CASE("ablation grids yield one row per config and record failures") {
  auto data = toy_data();
  std::vector<AblationEntry> grid;
  for (Metric m : {Metric::attention, Metric::gaussian, Metric::cosine}) grid.push_back({to_string(m), quick(m)});
  auto broken = quick(Metric::gaussian);
  broken.scenario = data::Scenario::k_shot;
  broken.k = 500;
  grid.push_back({"too-many-shots", broken});
  auto rows = run_ablation(grid, data);
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 0; i < 3; ++i) CHECK(rows[i].report.has_value());
  CHECK_FALSE(rows[3].report.has_value());
  CHECK_FALSE(rows[3].error.empty());

  const auto path = fs::temp_directory_path() / "crossfi_test_ablation.csv";
  write_ablation_table(rows, path);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  std::getline(in, line);
  CHECK(line == "name,scenario,k,metric,template_method,use_mmd,seed,status,accuracy,error");
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 4);

  auto again = run_ablation({grid[1]}, data);
  CHECK(again[0].report->to_json() == rows[1].report->to_json());
}

TEST_CASE("baseline classifier is deterministic and beats chance in-domain") {
  auto data = toy_data();
  auto cfg = quick(Metric::attention);
  cfg.epochs = 5;
  auto prepared = prepare_splits(cfg, data);
  auto a = baseline_classifier(prepared.splits.train, prepared.splits.test, cfg, data.shape, 4);
  auto b = baseline_classifier(prepared.splits.train, prepared.splits.test, cfg, data.shape, 4);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.accuracy > 0.5);
}

TEST_CASE("training-split accuracy is not below test accuracy on a converged toy run") {
  auto data = toy_data();
  auto cfg = quick(Metric::gaussian);
  cfg.epochs = 4;
  auto run = run_scenario(cfg, data);
  auto prepared = prepare_splits(cfg, data);
  auto train_report = evaluate(prepared.splits.train, *run.state->templates, run.state->net, Metric::gaussian, 4,
                               "in-domain", cfg.seed);
  CHECK(train_report.accuracy >= run.report.accuracy - 1e-12);
}

}
