#include "crossfi/wigesture.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>

#include <spdlog/spdlog.h>

#include "crossfi/error.hpp"

namespace fs = std::filesystem;

namespace crossfi::data {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  int depth = 0;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == '[') {
      ++depth;
      field += c;
    } else if (c == ']') {
      --depth;
      field += c;
    } else if (c == ',' && !quoted && depth == 0) {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

bool parse_ints(const std::string& text, std::vector<long>& out) {
  out.clear();
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    while (p < end && (*p == '[' || *p == ']' || *p == ',' || *p == ' ')) ++p;
    if (p >= end) break;
    long v = 0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc()) return false;
    out.push_back(v);
    p = next;
  }
  return !out.empty() && out.size() % 2 == 0;
}

std::vector<fs::path> sorted_dirs(const fs::path& p) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

ConversionReport convert_wigesture(const fs::path& input, const fs::path& out, const WiGestureOptions& options) {
  if (!fs::is_directory(input)) throw DataError("WiGesture input is not a directory: " + input.string());
  fs::create_directories(out);
  ConversionReport report;
  auto& m = report.manifest;
  m.packets_per_sample = options.packets_per_sample;
  m.stride = options.stride;
  m.sample_period_ms = options.sample_period_ms;

  std::map<std::string, int> class_ids;
  const auto people = sorted_dirs(input);
  for (const auto& person : people) {
    for (const auto& gesture : sorted_dirs(person)) class_ids.emplace(gesture.filename().string(), 0);
  }
  for (auto& [name, id] : class_ids) {
    id = static_cast<int>(m.classes.size());
    m.classes.push_back(name);
  }

  for (std::size_t d = 0; d < people.size(); ++d) {
    m.domains.push_back(people[d].filename().string());
    for (const auto& gesture : sorted_dirs(people[d])) {
      const int label = class_ids.at(gesture.filename().string());
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(gesture)) {
        if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& file : files) {
        std::ifstream in(file);
        std::string line;
        if (!std::getline(in, line)) continue;
        const auto header = split_csv(line);
        const auto col = [&](const std::string& name) -> std::ptrdiff_t {
          auto it = std::find(header.begin(), header.end(), name);
          return it == header.end() ? -1 : it - header.begin();
        };
        const auto ts_col = col(options.timestamp_column);
        const auto data_col = col(options.data_column);
        if (data_col < 0) throw DataError(file.string() + ": no '" + options.data_column + "' column");

        Session session;
        std::vector<long> ints;
        double t0 = 0.0;
        std::size_t row = 0;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          ++report.rows;
          const auto fields = split_csv(line);
          double ts = static_cast<double>(row) * options.sample_period_ms;
          if (ts_col >= 0 && static_cast<std::size_t>(ts_col) < fields.size()) {
            double raw = 0.0;
            const auto& f = fields[ts_col];
            if (std::from_chars(f.data(), f.data() + f.size(), raw).ec != std::errc()) {
              ++report.skipped_rows;
              continue;
            }
            ts = raw * options.timestamp_to_ms;
          }
          if (session.empty()) t0 = ts;
          ts -= t0;
          if (!session.empty() && ts <= session.back().timestamp_ms) {
            ++report.skipped_rows;
            continue;
          }
          RawCsiRecord r;
          r.timestamp_ms = ts;
          r.label = label;
          r.domain = static_cast<int>(d);
          const bool parsed =
              static_cast<std::size_t>(data_col) < fields.size() && parse_ints(fields[data_col], ints);
          if (parsed && m.subcarriers == 0) m.subcarriers = ints.size() / 2;
          if (parsed && ints.size() / 2 == m.subcarriers) {
            r.csi.resize(m.subcarriers);
            for (std::size_t s = 0; s < m.subcarriers; ++s) {
              r.csi[s] = Complex(static_cast<double>(ints[2 * s + 1]), static_cast<double>(ints[2 * s]));
            }
          } else {
            // written as a missing slot
            r.present = false;
            ++report.missing_rows;
          }
          session.push_back(std::move(r));
          ++row;
        }
        if (session.empty()) continue;
        const std::string name = "d" + std::to_string(d) + "_c" + std::to_string(label) + "_" +
                                 file.stem().string() + ".csv";
        write_session(session, m.subcarriers, out / name);
        m.sessions.push_back({name, static_cast<int>(d), label});
      }
    }
  }
  if (m.sessions.empty()) throw DataError("no WiGesture sessions found under " + input.string());
  if (report.skipped_rows + report.missing_rows > 0) {
    spdlog::warn("WiGesture: {} rows skipped, {} marked missing", report.skipped_rows, report.missing_rows);
  }
  write_manifest(m, out / "manifest.json");
  return report;
}

}  // namespace crossfi::data
