#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "crossfi/tensor.hpp"

namespace crossfi {

// Single-file container for named float64 arrays plus a JSON metadata
// block. Layout (little-endian):
//
//   "CRFIARC1" | u32 format_version | u64 header_bytes | header JSON
//   | payload (raw doubles, arrays in header order) | u32 crc32
//
// The CRC covers every preceding byte. Arrays are kept sorted by name so
// equal contents always serialize to equal bytes.
struct Archive {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> arrays;

  const Tensor& array(const std::string& name) const;
  bool has(const std::string& name) const { return arrays.count(name) != 0; }

  std::string to_bytes() const;
  static Archive from_bytes(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);
};

}  // namespace crossfi
