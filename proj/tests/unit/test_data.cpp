#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "crossfi/data.hpp"
#include "crossfi/error.hpp"
#include "support.hpp"

using namespace crossfi;
using namespace crossfi::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("crossfi_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RawCsiRecord rec(double ts, std::vector<Complex> csi, bool present = true) {
  RawCsiRecord r;
  r.timestamp_ms = ts;
  r.present = present;
  if (present) r.csi = std::move(csi);
  return r;
}

// Frequency of the largest non-DC bin of a real series.
double peak_frequency(const std::vector<double>& x, double rate) {
  const std::size_t n = x.size();
  double mean = 0;
  for (double v : x) mean += v / static_cast<double>(n);
  double best = -1, best_f = 0;
  for (std::size_t k = 1; k < n / 2; ++k) {
    std::complex<double> acc;
    for (std::size_t i = 0; i < n; ++i) {
      acc += (x[i] - mean) * std::polar(1.0, -2.0 * std::numbers::pi * double(k * i) / double(n));
    }
    if (std::abs(acc) > best) {
      best = std::abs(acc);
      best_f = rate * double(k) / double(n);
    }
  }
  return best_f;
}

SyntheticDomainSpec clean_spec(int domain, std::uint64_t static_seed) {
  SyntheticDomainSpec s;
  s.domain_id = domain;
  s.static_seed = static_seed;
  s.class_motion_profiles = {{2.0, 0.3}, {5.0, 0.3}};
  s.noise_std = 0.0;
  s.subcarriers = 8;
  return s;
}

std::vector<double> amplitude_series(const Session& s, std::size_t sub) {
  std::vector<double> out;
  for (const auto& r : interpolate_missing(s)) out.push_back(std::abs(r.csi[sub]));
  return out;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("interpolation: midpoint, edge hold and two-slot gap") {
  auto a = interpolate_missing({rec(0, {{1, 0}}), rec(1, {}, false), rec(2, {{3, 0}})});
  CHECK(a[1].present);
  CHECK(a[1].csi[0] == Complex(2, 0));

  auto b = interpolate_missing({rec(0, {}, false), rec(1, {{5, 5}}), rec(2, {{5, 5}})});
  CHECK(b[0].csi[0] == Complex(5, 5));

  auto c = interpolate_missing({rec(0, {{1, 1}}), rec(1, {}, false), rec(2, {}, false), rec(3, {{4, 4}})});
  CHECK(std::abs(c[1].csi[0] - Complex(2, 2)) < 1e-12);
  CHECK(std::abs(c[2].csi[0] - Complex(3, 3)) < 1e-12);

  CHECK_THROWS_AS(interpolate_missing({rec(0, {}, false), rec(1, {}, false)}), EmptySessionError);
}

TEST_CASE("interpolation leaves present records bit-unchanged") {
  Session s{rec(0, {{0.1, 0.7}, {3, -2}}), rec(1, {}, false), rec(2, {{1e-9, 4}, {-1, 1}})};
  auto out = interpolate_missing(s);
  CHECK(out[0] == s[0]);
  CHECK(out[2] == s[2]);
}

TEST_CASE("preprocess: amplitude, cosine phase and window count") {
  DatasetManifest m;
  m.subcarriers = 2;
  m.packets_per_sample = 100;
  m.stride = 50;
  Session s;
  for (int i = 0; i < 300; ++i) {
    s.push_back(rec(i, {{3, 4}, std::polar(1.0, i % 2 ? std::numbers::pi : -std::numbers::pi)}));
  }
  auto w = preprocess(s, m);
  CHECK(w.size() == 5);
  CHECK(w[0].data[0] == doctest::Approx(5.0));
  CHECK(w[0].data[1] == doctest::Approx(1.0));
  CHECK(w[0].data[100 * 2 + 1] == doctest::Approx(-1.0));
  CHECK(w[0].data[100 * 2 + 3] == doctest::Approx(-1.0));
  CHECK(preprocess(s, m) == w);

  Session short_session(s.begin(), s.begin() + 50);
  CHECK(preprocess(short_session, m).empty());
}

TEST_CASE("preprocess drops windows spanning a label change") {
  DatasetManifest m;
  m.subcarriers = 1;
  m.packets_per_sample = 4;
  m.stride = 2;
  Session s;
  for (int i = 0; i < 10; ++i) {
    auto r = rec(i, {{1, 0}});
    r.label = i < 5 ? 0 : 1;
    s.push_back(r);
  }
  auto w = preprocess(s, m);
  REQUIRE(w.size() == 2);
  CHECK(w[0].label == 0);
  CHECK(w[0].start == 0);
  CHECK(w[1].label == 1);
  CHECK(w[1].start == 6);
}

TEST_CASE("normalizer requires a fit and standardizes amplitude only") {
  Normalizer n;
  CHECK_FALSE(n.fitted());
  CHECK_THROWS_AS(n.mean(), NormalizerError);
  SampleShape shape{2, 1};
  std::vector<CsiSample> train(2);
  train[0].data = {1, 3, 0.5, 0.5};
  train[1].data = {5, 7, -0.5, -0.5};
  n.fit(train, shape);
  CHECK(n.mean()[0] == doctest::Approx(4.0));
  auto s = train[0];
  n.apply(s, shape);
  CHECK(s.data[0] == doctest::Approx(-3.0 / std::sqrt(5.0)));
  CHECK(s.data[2] == 0.5);
}

TEST_CASE("manifest errors name the field") {
  auto dir = scratch("manifest");
  std::ofstream(dir / "m.json") << R"({"format_version":1,"D":2,"t":4,"stride":1,"classes":[],"domains":["a"],"sessions":[]})";
  try {
    read_manifest(dir / "m.json");
    FAIL("expected schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("classes") != std::string::npos);
  }
}

TEST_CASE("load_dataset round-trips shape and materializes gaps") {
  auto dir = scratch("load");
  DatasetManifest m;
  m.subcarriers = 52;
  m.packets_per_sample = 100;
  m.stride = 50;
  m.sample_period_ms = 10.0;
  m.classes = {"a"};
  m.domains = {"d"};
  m.sessions = {{"s.csv", 0, 0}};
  Session s;
  for (int i = 0; i < 300; ++i) {
    std::vector<Complex> csi(52);
    for (int k = 0; k < 52; ++k) csi[k] = Complex(i * 0.5 + k, -k);
    s.push_back(rec(10.0 * i, csi));
  }
  write_session(s, 52, dir / "s.csv");
  write_manifest(m, dir / "manifest.json");
  auto ds = load_dataset(dir / "manifest.json");
  REQUIRE(ds.sessions.size() == 1);
  CHECK(ds.sessions[0].size() == 300);
  CHECK(ds.sessions[0][17].csi.size() == 52);
  CHECK(ds.sessions[0] == s);

  Session gap(s.begin(), s.begin() + 12);
  gap.push_back(s[13]);  // 120 ms slot absent
  write_session(gap, 52, dir / "s.csv");
  auto ds2 = load_dataset(dir / "manifest.json");
  REQUIRE(ds2.sessions[0].size() == 14);
  CHECK_FALSE(ds2.sessions[0][12].present);
  CHECK(ds2.sessions[0][12].timestamp_ms == doctest::Approx(120.0));
}

TEST_CASE("a session row with the wrong CSI width is a dimension error") {
  auto dir = scratch("width");
  std::ofstream(dir / "s.csv") << "timestamp_ms,label,domain,present\n0,0,0,1,1,2,3,4\n10,0,0,1,1,2\n";
  CHECK_THROWS_AS(read_session(dir / "s.csv", 2), DimensionError);
}

TEST_CASE("synthesis is deterministic and carries about 2% missing slots") {
  auto spec = clean_spec(0, 5);
  auto a = synthesize_domain(spec, 10, 9);
  auto b = synthesize_domain(spec, 10, 9);
  CHECK(a == b);
  std::size_t missing = 0, total = 0;
  for (const auto& s : a) {
    for (const auto& r : s) {
      missing += !r.present;
      ++total;
    }
  }
  CHECK(missing == 2 * static_cast<std::size_t>(std::llround(0.02 * double(total / 2))));
  CHECK(synthesize_domain(spec, 10, 10) != a);
}

TEST_CASE("a DFT recovers each class's motion frequency") {
  auto sessions = synthesize_domain(clean_spec(0, 5), 20, 1);
  CHECK(peak_frequency(amplitude_series(sessions[0], 3), 32.0) == doctest::Approx(2.0).epsilon(0.06));
  CHECK(peak_frequency(amplitude_series(sessions[1], 3), 32.0) == doctest::Approx(5.0).epsilon(0.03));
}

TEST_CASE("domains with different static channels differ in mean amplitude, not frequency") {
  auto a = synthesize_domain(clean_spec(0, 5), 20, 1);
  auto b = synthesize_domain(clean_spec(1, 6), 20, 1);
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  double diff = 0;
  for (std::size_t sub = 0; sub < 8; ++sub) {
    diff += std::abs(mean(amplitude_series(a[0], sub)) - mean(amplitude_series(b[0], sub)));
  }
  CHECK(diff / 8 > 0.05);
  CHECK(peak_frequency(amplitude_series(a[1], 2), 32.0) == doctest::Approx(peak_frequency(amplitude_series(b[1], 2), 32.0)));
}

TEST_CASE("noise-free samples are linearly separable within a domain") {
  SyntheticDomainSpec spec = clean_spec(0, 5);
  spec.class_motion_profiles = default_motion_profiles(4);
  Dataset ds;
  ds.manifest.subcarriers = spec.subcarriers;
  ds.manifest.packets_per_sample = spec.packets_per_sample;
  ds.manifest.stride = spec.stride;
  ds.manifest.classes = {"a", "b", "c", "d"};
  ds.manifest.domains = {"x"};
  ds.sessions = synthesize_domain(spec, 40, 4);
  for (std::size_t c = 0; c < 4; ++c) ds.manifest.sessions.push_back({"s", 0, int(c)});
  auto samples = dataset_samples(ds);
  REQUIRE(samples.size() == 160);
  // linear probe: multiclass perceptron on the flattened samples
  const std::size_t f = samples[0].data.size();
  std::vector<std::vector<double>> w(4, std::vector<double>(f + 1, 0.0));
  auto score = [&](std::size_t c, const CsiSample& s) {
    double z = w[c][f];
    for (std::size_t i = 0; i < f; ++i) z += w[c][i] * s.data[i];
    return z;
  };
  auto predict = [&](const CsiSample& s) {
    int best = 0;
    for (int c = 1; c < 4; ++c) if (score(c, s) > score(best, s)) best = c;
    return best;
  };
  for (int epoch = 0; epoch < 200; ++epoch) {
    for (const auto& s : samples) {
      const int p = predict(s);
      if (p == s.label) continue;
      for (std::size_t i = 0; i < f; ++i) {
        w[s.label][i] += s.data[i];
        w[p][i] -= s.data[i];
      }
      w[s.label][f] += 1;
      w[p][f] -= 1;
    }
  }
  std::size_t correct = 0;
  for (const auto& s : samples) correct += predict(s) == s.label;
  CHECK(double(correct) / double(samples.size()) >= 0.99);
}

TEST_CASE("scenario splits") {
  auto ds = testing::tiny_dataset(20);
  auto samples = dataset_samples(ds);
  SplitConfig cfg;

  SUBCASE("in-domain is a chronological 90/10 split per class over the source domain") {
    auto sp = split_scenario(samples, cfg);
    CHECK(sp.support.empty());
    CHECK(sp.train.size() == 4 * 18);
    CHECK(sp.test.size() == 4 * 2);
    for (const auto& t : sp.test) {
      for (const auto& r : sp.train) {
        if (r.label == t.label) CHECK(r.start < t.start);
      }
    }
  }
  SUBCASE("1-shot cross-domain holds exactly one support sample per class") {
    cfg.scenario = Scenario::k_shot;
    cfg.k = 1;
    auto sp = split_scenario(samples, cfg);
    CHECK(sp.support.size() == 4);
    std::set<int> labels;
    for (const auto& s : sp.support) {
      labels.insert(s.label);
      CHECK(s.domain == 1);
    }
    CHECK(labels.size() == 4);
    CHECK(sp.train.size() + sp.support.size() + sp.test.size() == samples.size());
    cfg.k = 21;
    CHECK_THROWS_AS(split_scenario(samples, cfg), InsufficientSupportError);
  }
  SUBCASE("zero-shot has no support and tests on the target domain") {
    cfg.scenario = Scenario::zero_shot;
    auto sp = split_scenario(samples, cfg);
    CHECK(sp.support.empty());
    CHECK(sp.test.size() == 80);
    for (const auto& s : sp.test) CHECK(s.domain == 1);
  }
  SUBCASE("new-class holds the class out of training") {
    cfg.scenario = Scenario::new_class;
    cfg.k = 2;
    auto sp = split_scenario(samples, cfg);
    for (const auto& s : sp.train) CHECK(s.label != 3);
    CHECK(sp.support.size() == 2);
    std::size_t held = 0;
    for (const auto& s : sp.test) held += s.label == 3;
    CHECK(held == 18);
  }
  CHECK_THROWS_AS(parse_scenario("sideways"), ConfigError);
}

TEST_CASE("in-domain splits of 100 windows per class give 90 train / 10 test") {
  auto samples = dataset_samples(testing::tiny_dataset(100));
  auto sp = split_scenario(samples, SplitConfig{});
  std::vector<int> train(4), test(4);
  for (const auto& s : sp.train) ++train[s.label];
  for (const auto& s : sp.test) ++test[s.label];
  CHECK(train == std::vector<int>{90, 90, 90, 90});
  CHECK(test == std::vector<int>{10, 10, 10, 10});
}

TEST_CASE("synthetic specs are validated") {
  auto spec = clean_spec(0, 1);
  spec.noise_std = -1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  CHECK_THROWS_AS(with_tempo(default_motion_profiles(2), 0.0), ConfigError);
}

}
