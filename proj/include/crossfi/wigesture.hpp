#pragma once

#include <filesystem>
#include <string>

#include "crossfi/data.hpp"

namespace crossfi::data {

struct WiGestureOptions {
  std::size_t packets_per_sample = 100;
  std::size_t stride = 50;
  double sample_period_ms = 10.0;  // 100 packets per second
  std::string timestamp_column = "local_timestamp";
  double timestamp_to_ms = 1e-3;  // ESP32 local timestamps are microseconds
  std::string data_column = "data";
};

struct ConversionReport {
  DatasetManifest manifest;
  std::size_t rows = 0;
  std::size_t skipped_rows = 0;  // unparseable or non-increasing timestamp
  std::size_t missing_rows = 0;  // bad CSI payload, written as missing
};

// Best-effort converter for the public WiGesture layout
// <input>/<person>/<gesture>/*.csv (ESP32 CSV with a bracketed `data`
// column of interleaved imaginary/real integers). Person directories become
// domains and gesture directories classes, both in name order. Writes one
// session file per input CSV plus manifest.json into `out`.
ConversionReport convert_wigesture(const std::filesystem::path& input, const std::filesystem::path& out,
                                   const WiGestureOptions& options = {});

}  // namespace crossfi::data
