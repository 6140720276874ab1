#include "crossfi/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "crossfi/error.hpp"
#include "crossfi/random.hpp"

namespace crossfi::data {
namespace fs = std::filesystem;
using nlohmann::json;

// ---- manifest ------------------------------------------------------------

void DatasetManifest::validate() const {
  if (subcarriers < 1) throw SchemaError("D", "must be >= 1");
  if (packets_per_sample < 1) throw SchemaError("t", "must be >= 1");
  if (stride < 1) throw SchemaError("stride", "must be >= 1");
  if (sample_period_ms && !(*sample_period_ms > 0.0)) {
    throw SchemaError("sample_period_ms", "must be > 0");
  }
  if (classes.empty()) throw SchemaError("classes", "must be non-empty");
  if (domains.empty()) throw SchemaError("domains", "must be non-empty");
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    const auto& s = sessions[i];
    const std::string field = "sessions[" + std::to_string(i) + "]";
    if (s.path.empty()) throw SchemaError(field + ".path", "must be non-empty");
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes.size()) {
      throw SchemaError(field + ".label", "out of range for declared classes");
    }
    if (s.domain < 0 || static_cast<std::size_t>(s.domain) >= domains.size()) {
      throw SchemaError(field + ".domain", "out of range for declared domains");
    }
  }
}

namespace {

template <typename T>
T field(const json& j, const std::string& key) {
  if (!j.contains(key)) throw SchemaError(key, "missing");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(key, "has the wrong type");
  }
}

std::size_t positive_size(const json& j, const std::string& key) {
  const auto v = field<long long>(j, key);
  if (v < 1) throw SchemaError(key, "must be >= 1");
  return static_cast<std::size_t>(v);
}

}  // namespace

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw SchemaError("<document>", std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("<document>", "must be an object");
  if (j.contains("format_version") && j["format_version"] != DatasetManifest::kFormatVersion) {
    throw SchemaError("format_version", "unsupported version");
  }

  DatasetManifest m;
  m.subcarriers = positive_size(j, "D");
  m.packets_per_sample = positive_size(j, "t");
  m.stride = positive_size(j, "stride");
  if (j.contains("sample_period_ms")) m.sample_period_ms = field<double>(j, "sample_period_ms");
  m.classes = field<std::vector<std::string>>(j, "classes");
  m.domains = field<std::vector<std::string>>(j, "domains");
  const auto sessions = field<json>(j, "sessions");
  if (!sessions.is_array()) throw SchemaError("sessions", "must be a list");
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    const std::string prefix = "sessions[" + std::to_string(i) + "].";
    const auto& s = sessions[i];
    if (!s.is_object()) throw SchemaError("sessions[" + std::to_string(i) + "]", "must be an object");
    SessionEntry e;
    try {
      e.path = field<std::string>(s, "path");
      e.domain = field<int>(s, "domain");
      e.label = field<int>(s, "label");
    } catch (const SchemaError& err) {
      throw SchemaError(prefix + err.field(), "missing or wrong type");
    }
    m.sessions.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  m.validate();
  json j;
  j["format_version"] = DatasetManifest::kFormatVersion;
  j["D"] = m.subcarriers;
  j["t"] = m.packets_per_sample;
  j["stride"] = m.stride;
  if (m.sample_period_ms) j["sample_period_ms"] = *m.sample_period_ms;
  j["classes"] = m.classes;
  j["domains"] = m.domains;
  j["sessions"] = json::array();
  for (const auto& s : m.sessions) {
    j["sessions"].push_back({{"path", s.path}, {"domain", s.domain}, {"label", s.label}});
  }
  std::ofstream os(path);
  if (!os) throw Error("cannot write manifest '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

// ---- session files ------------------------------------------------------

namespace {

constexpr std::string_view kSessionHeader = "timestamp_ms,label,domain,present";

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view text, const std::string& where) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\r')) text.remove_suffix(1);
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw DataError(where + ": cannot parse '" + std::string(text) + "'");
  }
  return v;
}

void append_number(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

}  // namespace

Session read_session(const fs::path& path, std::size_t subcarriers,
                     std::optional<double> sample_period_ms) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open session file '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw DataError(path.string() + ": empty session file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind(kSessionHeader, 0) != 0) {
    throw DataError(path.string() + ": header must start with '" + std::string(kSessionHeader) + "'");
  }

  Session rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto fields = split_commas(line);
    if (fields.size() < 4) throw DataError(where + ": expected at least 4 fields");
    RawCsiRecord r;
    r.timestamp_ms = parse_number<double>(fields[0], where);
    r.label = parse_number<int>(fields[1], where);
    r.domain = parse_number<int>(fields[2], where);
    r.present = parse_number<int>(fields[3], where) != 0;
    const std::size_t extra = fields.size() - 4;
    if (r.present) {
      if (extra != 2 * subcarriers) {
        throw DimensionError(where + ": expected " + std::to_string(2 * subcarriers) +
                             " CSI fields for D=" + std::to_string(subcarriers) + ", found " +
                             std::to_string(extra));
      }
      r.csi.resize(subcarriers);
      for (std::size_t s = 0; s < subcarriers; ++s) {
        r.csi[s] = Complex(parse_number<double>(fields[4 + 2 * s], where),
                           parse_number<double>(fields[5 + 2 * s], where));
      }
    } else {
      const bool blank = std::all_of(fields.begin() + 4, fields.end(),
                                     [](std::string_view f) { return f.empty(); });
      if ((extra != 0 && extra != 2 * subcarriers) || !blank) {
        throw DimensionError(where + ": missing slot must carry empty CSI fields");
      }
    }
    if (!rows.empty() && !(r.timestamp_ms > rows.back().timestamp_ms)) {
      throw DataError(where + ": timestamps must be strictly increasing");
    }
    rows.push_back(std::move(r));
  }

  if (rows.size() < 2) return rows;
  double period = 0.0;
  if (sample_period_ms) {
    period = *sample_period_ms;
  } else {
    std::vector<double> diffs;
    for (std::size_t i = 1; i < rows.size(); ++i) diffs.push_back(rows[i].timestamp_ms - rows[i - 1].timestamp_ms);
    std::nth_element(diffs.begin(), diffs.begin() + diffs.size() / 2, diffs.end());
    period = diffs[diffs.size() / 2];
  }
  Session out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) {
      const double gap = rows[i].timestamp_ms - rows[i - 1].timestamp_ms;
      if (gap > 1.5 * period) {
        const auto missing = static_cast<std::size_t>(std::llround(gap / period)) - 1;
        for (std::size_t m = 1; m <= missing; ++m) {
          RawCsiRecord slot;
          slot.timestamp_ms = rows[i - 1].timestamp_ms + static_cast<double>(m) * period;
          slot.label = rows[i - 1].label;
          slot.domain = rows[i - 1].domain;
          slot.present = false;
          out.push_back(std::move(slot));
        }
      }
    }
    out.push_back(rows[i]);
  }
  return out;
}

void write_session(const Session& session, std::size_t subcarriers, const fs::path& path) {
  std::string out(kSessionHeader);
  out += '\n';
  for (const auto& r : session) {
    append_number(out, r.timestamp_ms);
    out += ',' + std::to_string(r.label) + ',' + std::to_string(r.domain) + ',' + (r.present ? '1' : '0');
    if (r.present) {
      if (r.csi.size() != subcarriers) {
        throw DimensionError("record has " + std::to_string(r.csi.size()) + " CSI values, expected " +
                             std::to_string(subcarriers));
      }
      for (const auto& c : r.csi) {
        out += ',';
        append_number(out, c.real());
        out += ',';
        append_number(out, c.imag());
      }
    } else {
      out.append(2 * subcarriers, ',');
    }
    out += '\n';
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write session file '" + path.string() + "'");
  os << out;
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  for (const auto& entry : ds.manifest.sessions) {
    ds.sessions.push_back(read_session(base / entry.path, ds.manifest.subcarriers,
                                       ds.manifest.sample_period_ms));
  }
  return ds;
}

// ---- preprocessing ------------------------------------------------------

Session interpolate_missing(const Session& session) {
  std::vector<std::size_t> present;
  for (std::size_t i = 0; i < session.size(); ++i) {
    if (session[i].present) present.push_back(i);
  }
  if (present.empty()) throw EmptySessionError("session has no present records to interpolate from");
  const std::size_t d = session[present.front()].csi.size();

  Session out = session;
  std::size_t next = 0;  // index into `present` of the first present slot >= i
  for (std::size_t i = 0; i < out.size(); ++i) {
    while (next < present.size() && present[next] < i) ++next;
    if (out[i].present) continue;
    auto& slot = out[i];
    slot.present = true;
    slot.csi.assign(d, Complex{});
    if (next == 0) {
      slot.csi = session[present.front()].csi;
    } else if (next == present.size()) {
      slot.csi = session[present.back()].csi;
    } else {
      const auto& lo = session[present[next - 1]];
      const auto& hi = session[present[next]];
      const double span = static_cast<double>(present[next] - present[next - 1]);
      const double w = static_cast<double>(i - present[next - 1]) / span;
      for (std::size_t s = 0; s < d; ++s) {
        const double re = lo.csi[s].real() + w * (hi.csi[s].real() - lo.csi[s].real());
        const double im = lo.csi[s].imag() + w * (hi.csi[s].imag() - lo.csi[s].imag());
        slot.csi[s] = Complex(re, im);
      }
    }
  }
  return out;
}

std::vector<CsiSample> preprocess(const Session& session, const DatasetManifest& manifest,
                                  std::size_t session_index) {
  const std::size_t t = manifest.packets_per_sample, d = manifest.subcarriers;
  std::vector<CsiSample> out;
  if (session.size() < t) return out;
  for (const auto& r : session) {
    if (!r.present) throw PreconditionError("preprocess: session must be gap-filled first");
    if (r.csi.size() != d) {
      throw DimensionError("record has " + std::to_string(r.csi.size()) + " CSI values, manifest D=" +
                           std::to_string(d));
    }
  }
  for (std::size_t start = 0; start + t <= session.size(); start += manifest.stride) {
    const int label = session[start].label, domain = session[start].domain;
    bool uniform = true;
    for (std::size_t i = start; i < start + t && uniform; ++i) {
      uniform = session[i].label == label && session[i].domain == domain;
    }
    if (!uniform) continue;
    CsiSample sample;
    sample.label = label;
    sample.domain = domain;
    sample.session = session_index;
    sample.start = start;
    sample.data.resize(2 * t * d);
    for (std::size_t ti = 0; ti < t; ++ti) {
      const auto& csi = session[start + ti].csi;
      for (std::size_t s = 0; s < d; ++s) {
        sample.data[ti * d + s] = std::abs(csi[s]);
        sample.data[t * d + ti * d + s] = std::cos(std::arg(csi[s]));
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

Normalizer::Normalizer(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), std_(std::move(stddev)) {
  if (mean_.size() != std_.size()) throw DimensionError("normalizer mean/std length mismatch");
}

void Normalizer::fit(std::span<const CsiSample> train, SampleShape shape) {
  if (train.empty()) throw PreconditionError("normalizer: empty training split");
  std::vector<double> sum(shape.d, 0.0), sq(shape.d, 0.0);
  for (const auto& s : train) {
    if (s.data.size() != shape.numel()) throw DimensionError("normalizer: sample shape mismatch");
    for (std::size_t ti = 0; ti < shape.t; ++ti) {
      for (std::size_t c = 0; c < shape.d; ++c) sum[c] += s.data[ti * shape.d + c];
    }
  }
  const double count = static_cast<double>(train.size() * shape.t);
  mean_.assign(shape.d, 0.0);
  std_.assign(shape.d, 0.0);
  for (std::size_t c = 0; c < shape.d; ++c) mean_[c] = sum[c] / count;
  for (const auto& s : train) {
    for (std::size_t ti = 0; ti < shape.t; ++ti) {
      for (std::size_t c = 0; c < shape.d; ++c) {
        const double dv = s.data[ti * shape.d + c] - mean_[c];
        sq[c] += dv * dv;
      }
    }
  }
  for (std::size_t c = 0; c < shape.d; ++c) std_[c] = std::max(std::sqrt(sq[c] / count), kStdFloor);
}

const std::vector<double>& Normalizer::mean() const {
  if (!fitted()) throw NormalizerError("normalizer statistics requested before fit");
  return mean_;
}

const std::vector<double>& Normalizer::stddev() const {
  if (!fitted()) throw NormalizerError("normalizer statistics requested before fit");
  return std_;
}

void Normalizer::apply(CsiSample& sample, SampleShape shape) const {
  const auto& mu = mean();
  const auto& sd = stddev();
  if (mu.size() != shape.d || sample.data.size() != shape.numel()) {
    throw DimensionError("normalizer: shape mismatch");
  }
  for (std::size_t ti = 0; ti < shape.t; ++ti) {
    for (std::size_t c = 0; c < shape.d; ++c) {
      auto& v = sample.data[ti * shape.d + c];
      v = (v - mu[c]) / sd[c];
    }
  }
}

void Normalizer::apply(std::vector<CsiSample>& samples, SampleShape shape) const {
  for (auto& s : samples) apply(s, shape);
}

// ---- scenario splitting ---------------------------------------------------

Scenario parse_scenario(const std::string& name) {
  if (name == "in-domain") return Scenario::in_domain;
  if (name == "k-shot" || name == "k-shot-cross-domain") return Scenario::k_shot;
  if (name == "zero-shot" || name == "zero-shot-cross-domain") return Scenario::zero_shot;
  if (name == "new-class" || name == "k-shot-new-class") return Scenario::new_class;
  throw ConfigError("unknown scenario '" + name + "'");
}

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::in_domain: return "in-domain";
    case Scenario::k_shot: return "k-shot";
    case Scenario::zero_shot: return "zero-shot";
    case Scenario::new_class: return "new-class";
  }
  return "unknown";
}

namespace {

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

// Per-label lists of samples in chronological order.
std::map<int, std::vector<const CsiSample*>> by_label(const std::vector<const CsiSample*>& samples) {
  std::map<int, std::vector<const CsiSample*>> out;
  for (const auto* s : samples) out[s->label].push_back(s);
  for (auto& [label, list] : out) {
    std::stable_sort(list.begin(), list.end(), [](const CsiSample* a, const CsiSample* b) {
      return std::tie(a->session, a->start) < std::tie(b->session, b->start);
    });
  }
  return out;
}

void chronological_split(const std::vector<const CsiSample*>& list, double fraction,
                         std::vector<CsiSample>& train, std::vector<CsiSample>& test) {
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(list.size()) * fraction + 1e-9));
  for (std::size_t i = 0; i < list.size(); ++i) (i < n_train ? train : test).push_back(*list[i]);
}

void draw_support(const std::vector<const CsiSample*>& list, std::size_t k, int label, Rng& rng,
                  std::vector<CsiSample>& support, std::vector<CsiSample>& test) {
  if (list.size() < k) {
    throw InsufficientSupportError("class " + std::to_string(label) + " has " +
                                   std::to_string(list.size()) + " samples, fewer than k=" +
                                   std::to_string(k));
  }
  auto picked = rng.sample_without_replacement(list.size(), k);
  std::sort(picked.begin(), picked.end());
  std::vector<bool> chosen(list.size(), false);
  for (auto i : picked) chosen[i] = true;
  for (std::size_t i = 0; i < list.size(); ++i) (chosen[i] ? support : test).push_back(*list[i]);
}

}  // namespace

Splits split_scenario(const std::vector<CsiSample>& samples, const SplitConfig& config) {
  if (!(config.train_fraction > 0.0 && config.train_fraction <= 1.0)) {
    throw ConfigError("train_fraction must be in (0, 1]");
  }
  const bool needs_k = config.scenario == Scenario::k_shot || config.scenario == Scenario::new_class;
  if (needs_k && config.k < 1) throw ConfigError("k must be >= 1 for scenario " + to_string(config.scenario));

  Splits out;
  Rng rng = Rng::derive(config.seed, {0x5B117});
  std::vector<const CsiSample*> source, target;
  for (const auto& s : samples) {
    if (contains(config.source_domains, s.domain)) source.push_back(&s);
    else if (contains(config.target_domains, s.domain)) target.push_back(&s);
  }

  switch (config.scenario) {
    case Scenario::in_domain:
      for (const auto& [label, list] : by_label(source)) {
        chronological_split(list, config.train_fraction, out.train, out.test);
      }
      break;
    case Scenario::k_shot:
      for (const auto* s : source) out.train.push_back(*s);
      for (const auto& [label, list] : by_label(target)) {
        draw_support(list, config.k, label, rng, out.support, out.test);
      }
      break;
    case Scenario::zero_shot:
      for (const auto* s : source) out.train.push_back(*s);
      for (const auto* s : target) out.test.push_back(*s);
      break;
    case Scenario::new_class: {
      const auto groups = by_label(source);
      if (groups.empty()) throw DataError("new-class split: no source samples");
      const int held_out = config.new_class >= 0 ? config.new_class : groups.rbegin()->first;
      if (!groups.count(held_out)) {
        throw ConfigError("new_class " + std::to_string(held_out) + " has no samples");
      }
      for (const auto& [label, list] : groups) {
        if (label == held_out) {
          draw_support(list, config.k, label, rng, out.support, out.test);
        } else {
          chronological_split(list, config.train_fraction, out.train, out.test);
        }
      }
      break;
    }
  }
  return out;
}

// ---- synthetic generator --------------------------------------------------

void SyntheticDomainSpec::validate() const {
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (class_motion_profiles.empty()) throw ConfigError("at least one class motion profile is required");
  if (!(sample_rate > 0.0)) throw ConfigError("sample_rate must be > 0");
  if (subcarriers < 1 || packets_per_sample < 1 || stride < 1) {
    throw ConfigError("subcarriers, packets_per_sample and stride must be >= 1");
  }
}

std::vector<MotionProfile> default_motion_profiles(std::size_t classes) {
  std::vector<MotionProfile> out;
  for (std::size_t c = 0; c < classes; ++c) {
    out.push_back({2.0 + 2.0 * static_cast<double>(c), 0.20 + 0.06 * static_cast<double>(c)});
  }
  return out;
}

std::vector<Session> synthesize_domain(const SyntheticDomainSpec& spec, std::size_t n_per_class,
                                       std::uint64_t seed) {
  spec.validate();
  if (n_per_class < 1) throw PreconditionError("n_per_class must be >= 1");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const std::size_t d = spec.subcarriers;

  // Static multipath H_s(f): unit line-of-sight plus n_paths weaker echoes,
  // scaled by a domain gain. The dynamic reflector's delay and gain are
  // fixed per domain as well (body position and reflectivity).
  Rng srng = Rng::derive(spec.static_seed, {0x57A7});
  const double gain = srng.uniform(0.7, 1.3);
  const double los_phase = srng.uniform(0.0, two_pi);
  std::vector<Complex> h_static(d, Complex(1.0, 0.0));
  for (std::size_t p = 0; p < spec.n_paths; ++p) {
    const double amp = srng.uniform(0.3, 1.0) * 0.6 / static_cast<double>(spec.n_paths);
    const double delay = srng.uniform(0.5, 4.0);
    const double phase = srng.uniform(0.0, two_pi);
    for (std::size_t s = 0; s < d; ++s) {
      const double f = static_cast<double>(s) / static_cast<double>(d);
      h_static[s] += std::polar(amp, phase - two_pi * delay * f);
    }
  }
  for (auto& h : h_static) h *= std::polar(gain, los_phase);
  const double dyn_delay = srng.uniform(0.5, 4.0);
  const double dyn_phase = srng.uniform(0.0, two_pi);
  const double dyn_gain = srng.uniform(0.7, 1.3);
  std::vector<Complex> dyn_steer(d);
  for (std::size_t s = 0; s < d; ++s) {
    const double f = static_cast<double>(s) / static_cast<double>(d);
    dyn_steer[s] = std::polar(gain * dyn_gain, dyn_phase - two_pi * dyn_delay * f);
  }

  const std::size_t length = (n_per_class - 1) * spec.stride + spec.packets_per_sample;
  const double period_ms = 1000.0 / spec.sample_rate;
  std::vector<Session> sessions;
  for (std::size_t c = 0; c < spec.class_motion_profiles.size(); ++c) {
    const auto& profile = spec.class_motion_profiles[c];
    Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(spec.domain_id), c, 0x5E55});
    double motion_phase = rng.uniform(0.0, two_pi);
    const double step = two_pi * profile.frequency_hz / spec.sample_rate;

    Session session(length);
    for (std::size_t i = 0; i < length; ++i) {
      auto& r = session[i];
      r.timestamp_ms = static_cast<double>(i) * period_ms;
      r.label = static_cast<int>(c);
      r.domain = spec.domain_id;
      const double envelope = profile.amplitude * (1.0 + 0.5 * std::sin(motion_phase));
      r.csi.resize(d);
      for (std::size_t s = 0; s < d; ++s) {
        Complex noise{};
        if (spec.noise_std > 0.0) {
          const double sigma = spec.noise_std / std::numbers::sqrt2;
          noise = Complex(sigma * rng.normal(), sigma * rng.normal());
        }
        r.csi[s] = h_static[s] + envelope * dyn_steer[s] + noise;
      }
      motion_phase += step + 0.02 * rng.normal();
    }
    const auto missing = static_cast<std::size_t>(std::llround(kMissingSlotFraction * static_cast<double>(length)));
    for (auto idx : rng.sample_without_replacement(length, missing)) {
      session[idx].present = false;
      session[idx].csi.clear();
    }
    sessions.push_back(std::move(session));
  }
  return sessions;
}

std::vector<MotionProfile> with_tempo(std::vector<MotionProfile> profiles, double tempo) {
  if (!(tempo > 0.0)) throw ConfigError("tempo must be > 0");
  for (auto& p : profiles) p.frequency_hz *= tempo;
  return profiles;
}

Dataset synthesize_dataset(const std::vector<SyntheticDomainSpec>& specs, std::size_t n_per_class,
                           std::uint64_t seed) {
  if (specs.empty()) throw ConfigError("at least one domain spec is required");
  Dataset ds;
  auto& m = ds.manifest;
  const auto& first = specs.front();
  m.subcarriers = first.subcarriers;
  m.packets_per_sample = first.packets_per_sample;
  m.stride = first.stride;
  m.sample_period_ms = 1000.0 / first.sample_rate;
  for (std::size_t c = 0; c < first.class_motion_profiles.size(); ++c) m.classes.push_back("class" + std::to_string(c));
  for (const auto& spec : specs) {
    if (spec.subcarriers != first.subcarriers || spec.packets_per_sample != first.packets_per_sample ||
        spec.stride != first.stride || spec.sample_rate != first.sample_rate ||
        spec.class_motion_profiles.size() != first.class_motion_profiles.size()) {
      throw ConfigError("all domain specs must share D, t, stride, sample rate and class count");
    }
    m.domains.push_back("domain" + std::to_string(spec.domain_id));
    auto sessions = synthesize_domain(spec, n_per_class, seed);
    for (std::size_t c = 0; c < sessions.size(); ++c) {
      m.sessions.push_back({"d" + std::to_string(spec.domain_id) + "_c" + std::to_string(c) + ".csv",
                            spec.domain_id, static_cast<int>(c)});
      ds.sessions.push_back(std::move(sessions[c]));
    }
  }
  return ds;
}

std::vector<CsiSample> dataset_samples(const Dataset& dataset) {
  std::vector<CsiSample> out;
  for (std::size_t i = 0; i < dataset.sessions.size(); ++i) {
    auto windows = preprocess(interpolate_missing(dataset.sessions[i]), dataset.manifest, i);
    out.insert(out.end(), std::make_move_iterator(windows.begin()), std::make_move_iterator(windows.end()));
  }
  return out;
}

// ---- batching -------------------------------------------------------------

Tensor stack_inputs(std::span<const CsiSample> samples, std::span<const std::size_t> indices,
                    SampleShape shape) {
  Tensor out(Shape{indices.size(), 2, shape.t, shape.d});
  const std::size_t n = shape.numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = samples[indices[i]];
    if (s.data.size() != n) {
      throw DimensionError("sample has " + std::to_string(s.data.size()) + " values, expected " +
                           std::to_string(n));
    }
    std::copy(s.data.begin(), s.data.end(), out.data() + i * n);
  }
  return out;
}

Tensor stack_inputs(std::span<const CsiSample> samples, SampleShape shape) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_inputs(samples, idx, shape);
}

std::vector<int> gather_labels(std::span<const CsiSample> samples, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples[i].label);
  return out;
}

std::vector<int> gather_labels(std::span<const CsiSample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

}  // namespace crossfi::data
