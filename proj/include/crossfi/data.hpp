#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crossfi/defaults.hpp"
#include "crossfi/tensor.hpp"

namespace crossfi::data {

using Complex = std::complex<double>;

// One packet slot of a recording session.
struct RawCsiRecord {
  double timestamp_ms = 0.0;
  int label = 0;
  int domain = 0;
  bool present = true;
  std::vector<Complex> csi;  // D values when present, empty otherwise

  friend bool operator==(const RawCsiRecord&, const RawCsiRecord&) = default;
};

using Session = std::vector<RawCsiRecord>;

struct SessionEntry {
  std::string path;  // relative to the manifest directory
  int domain = 0;
  int label = 0;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;

  std::size_t subcarriers = 0;        // D
  std::size_t packets_per_sample = 0; // t
  std::size_t stride = 1;
  std::optional<double> sample_period_ms;  // inferred from timestamps when absent
  std::vector<std::string> classes;
  std::vector<std::string> domains;
  std::vector<SessionEntry> sessions;

  // Throws SchemaError naming the offending field.
  void validate() const;
};

// One preprocessed window: data is [2, t, D], channel 0 amplitude, channel 1
// cosine of phase.
struct CsiSample {
  std::vector<double> data;
  int label = 0;
  int domain = 0;
  // Chronological key: source session index and window start slot.
  std::size_t session = 0;
  std::size_t start = 0;

  friend bool operator==(const CsiSample&, const CsiSample&) = default;
};

struct SampleShape {
  std::size_t t = 0;
  std::size_t d = 0;
  std::size_t numel() const { return 2 * t * d; }
};

// ---- manifest and session files ----------------------------------------

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Session CSV: header `timestamp_ms,label,domain,present`, then one row per
// slot with 4 + 2D comma-separated fields (re, im per subcarrier); missing
// slots carry present=0 and empty CSI fields.
Session read_session(const std::filesystem::path& path, std::size_t subcarriers,
                     std::optional<double> sample_period_ms = std::nullopt);
void write_session(const Session& session, std::size_t subcarriers,
                   const std::filesystem::path& path);

struct Dataset {
  DatasetManifest manifest;
  std::vector<Session> sessions;  // manifest order
};

// Loads every session; timestamp gaps larger than 1.5 periods are
// materialized as present=false slots.
Dataset load_dataset(const std::filesystem::path& manifest_path);

// ---- preprocessing -----------------------------------------------------

// Linear per-component interpolation between present neighbours, edge hold
// at the ends. Present records are returned bit-unchanged.
Session interpolate_missing(const Session& session);

// Sliding windows of length t with the manifest stride. Windows spanning a
// label or domain change are dropped. Amplitude is not normalized here.
std::vector<CsiSample> preprocess(const Session& session, const DatasetManifest& manifest,
                                  std::size_t session_index = 0);

// Per-subcarrier amplitude standardization fitted on a training split.
class Normalizer {
 public:
  static constexpr double kStdFloor = 1e-8;

  Normalizer() = default;
  Normalizer(std::vector<double> mean, std::vector<double> stddev);

  void fit(std::span<const CsiSample> train, SampleShape shape);
  bool fitted() const noexcept { return !mean_.empty(); }
  const std::vector<double>& mean() const;
  const std::vector<double>& stddev() const;

  void apply(CsiSample& sample, SampleShape shape) const;
  void apply(std::vector<CsiSample>& samples, SampleShape shape) const;

 private:
  std::vector<double> mean_;
  std::vector<double> std_;
};

// ---- scenario splitting -------------------------------------------------

enum class Scenario { in_domain, k_shot, zero_shot, new_class };

Scenario parse_scenario(const std::string& name);
std::string to_string(Scenario s);

struct SplitConfig {
  Scenario scenario = Scenario::in_domain;
  std::size_t k = 1;
  std::vector<int> source_domains{0};
  std::vector<int> target_domains{1};
  int new_class = -1;  // -1: highest class id
  double train_fraction = defaults::kTrainFraction;
  std::uint64_t seed = 0;
};

struct Splits {
  std::vector<CsiSample> train;
  std::vector<CsiSample> support;
  std::vector<CsiSample> test;
};

Splits split_scenario(const std::vector<CsiSample>& samples, const SplitConfig& config);

// ---- synthetic generator ------------------------------------------------

struct MotionProfile {
  double frequency_hz = 1.0;
  double amplitude = 0.2;
};

struct SyntheticDomainSpec {
  int domain_id = 0;
  std::size_t n_paths = 3;
  std::uint64_t static_seed = 0;
  std::vector<MotionProfile> class_motion_profiles;
  double noise_std = 0.0;
  double sample_rate = defaults::kSampleRate;  // packets per second
  std::size_t subcarriers = defaults::kSubcarriers;
  std::size_t packets_per_sample = defaults::kPacketsPerSample;
  std::size_t stride = defaults::kStride;

  void validate() const;
};

inline constexpr double kMissingSlotFraction = 0.02;

// One session per class, long enough to yield exactly n_per_class windows.
std::vector<Session> synthesize_domain(const SyntheticDomainSpec& spec, std::size_t n_per_class,
                                       std::uint64_t seed);

// Evenly spaced default class profiles used by the CLI and tests.
std::vector<MotionProfile> default_motion_profiles(std::size_t classes);

// Scales every class frequency of `profiles` by a per-domain tempo factor.
std::vector<MotionProfile> with_tempo(std::vector<MotionProfile> profiles, double tempo);

// In-memory dataset from one spec per domain; sessions are listed as
// d<domain>_c<class>.csv in manifest order (domain-major).
Dataset synthesize_dataset(const std::vector<SyntheticDomainSpec>& specs, std::size_t n_per_class,
                           std::uint64_t seed);

// Gap-fills and windows every session of a dataset.
std::vector<CsiSample> dataset_samples(const Dataset& dataset);

// ---- batching helpers ---------------------------------------------------

// Stacks samples (by index) into a [b, 2, t, D] tensor.
Tensor stack_inputs(std::span<const CsiSample> samples, std::span<const std::size_t> indices,
                    SampleShape shape);
Tensor stack_inputs(std::span<const CsiSample> samples, SampleShape shape);
std::vector<int> gather_labels(std::span<const CsiSample> samples,
                               std::span<const std::size_t> indices);
std::vector<int> gather_labels(std::span<const CsiSample> samples);

}  // namespace crossfi::data
