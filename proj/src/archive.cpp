#include "crossfi/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "crossfi/error.hpp"

namespace crossfi {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'R', 'F', 'I', 'A', 'R', 'C', '1'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ArchiveError("archive truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint32_t crc_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace

const Tensor& Archive::array(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw ArchiveError("archive has no array '" + name + "'");
  return it->second;
}

std::string Archive::to_bytes() const {
  nlohmann::json header;
  header["kind"] = kind;
  header["meta"] = meta;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : arrays) entries.push_back({{"name", name}, {"shape", t.shape()}});
  header["arrays"] = entries;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : arrays) {
    out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
  }
  put<std::uint32_t>(out, crc_of(out.data(), out.size()));
  return out;
}

Archive Archive::from_bytes(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ArchiveError("not a crossfi archive");
  }
  std::size_t tail = bytes.size() - sizeof(std::uint32_t);
  std::size_t crc_pos = tail;
  const auto stored = get<std::uint32_t>(bytes, crc_pos);
  if (stored != crc_of(bytes.data(), tail)) throw ArchiveError("archive checksum mismatch");

  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kFormatVersion) {
    throw VersionMismatchError("archive format version " + std::to_string(version) +
                               " is incompatible with supported version " +
                               std::to_string(kFormatVersion));
  }
  const auto header_len = get<std::uint64_t>(bytes, pos);
  if (pos + header_len > tail) throw ArchiveError("archive header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("archive header unreadable: ") + e.what());
  }
  pos += header_len;

  Archive out;
  try {
    out.kind = header.at("kind").get<std::string>();
    out.meta = header.at("meta");
    for (const auto& entry : header.at("arrays")) {
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t n = shape_numel(shape);
      if (pos + n * sizeof(double) > tail) throw ArchiveError("archive payload truncated");
      std::vector<double> data(n);
      std::memcpy(data.data(), bytes.data() + pos, n * sizeof(double));
      pos += n * sizeof(double);
      out.arrays.emplace(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("archive header malformed: ") + e.what());
  }
  if (pos != tail) throw ArchiveError("archive has trailing bytes");
  return out;
}

void Archive::save(const std::filesystem::path& path) const {
  const std::string bytes = to_bytes();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError("cannot open archive '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_bytes(ss.str());
}

}  // namespace crossfi
