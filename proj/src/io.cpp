#include "noisemap/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <iterator>

namespace noisemap {

namespace {

constexpr char kVolumeMagic[4] = {'N', 'M', 'V', 'F'};
constexpr std::uint32_t kMaxHeaderBytes = 1u << 20;

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeFileError(VolumeFileError::Kind::Io, path, "cannot open for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw VolumeFileError(VolumeFileError::Kind::Io, path, "cannot open for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw VolumeFileError(VolumeFileError::Kind::Io, path, "write failed");
}

std::uint32_t load_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

struct ParsedHeader {
  Json json;
  Dims dims;
  std::size_t payload_offset = 0;
};

ParsedHeader parse_header(const std::filesystem::path& path, const std::uint8_t* bytes,
                          std::size_t size) {
  using Kind = VolumeFileError::Kind;
  if (size < 8 || std::memcmp(bytes, kVolumeMagic, 4) != 0) {
    throw VolumeFileError(Kind::BadMagic, path, "not a volume file (missing NMVF magic)");
  }
  const std::uint32_t n = load_u32_le(bytes + 4);
  if (n > kMaxHeaderBytes || 8 + static_cast<std::size_t>(n) > size) {
    throw VolumeFileError(Kind::BadHeader, path,
                          "header length " + std::to_string(n) + " exceeds file size");
  }
  ParsedHeader h;
  try {
    h.json = Json::parse(bytes + 8, bytes + 8 + n);
    if (!h.json.contains("schema_version")) {
      throw VolumeFileError(Kind::BadHeader, path, "header lacks schema_version");
    }
    const int version = h.json.at("schema_version").get<int>();
    if (version != kVolumeSchemaVersion) {
      throw VolumeFileError(Kind::UnknownSchema, path,
                            "unknown schema_version " + std::to_string(version));
    }
    const auto dtype = h.json.at("dtype").get<std::string>();
    if (dtype != "f32") {
      throw VolumeFileError(Kind::UnsupportedFormat, path, "unsupported dtype '" + dtype + "'");
    }
    const auto order = h.json.at("byte_order").get<std::string>();
    if (order != "little") {
      throw VolumeFileError(Kind::UnsupportedFormat, path,
                            "unsupported byte_order '" + order + "'");
    }
    const auto dims = h.json.at("dims").get<std::vector<std::size_t>>();
    if (dims.size() != 3 || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
      throw VolumeFileError(Kind::BadHeader, path, "dims must be three positive integers");
    }
    h.dims = {dims[0], dims[1], dims[2]};
  } catch (const Json::exception& e) {
    throw VolumeFileError(Kind::BadHeader, path, std::string("malformed header: ") + e.what());
  }
  h.payload_offset = 8 + n;
  return h;
}

}  // namespace

VolumeFileError::VolumeFileError(Kind kind, const std::filesystem::path& path,
                                 const std::string& why)
    : std::runtime_error(path.string() + ": " + why), kind_(kind), path_(path) {}

void append_f32_le(std::vector<std::uint8_t>& out, const float* values, std::size_t n) {
  const std::size_t base = out.size();
  out.resize(base + 4 * n);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + base, values, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[base + 4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
}

void read_f32_le(const std::uint8_t* bytes, float* values, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values, bytes, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<float>(load_u32_le(bytes + 4 * i));
  }
}

void write_volume(const Volume& vol, const std::filesystem::path& path,
                  const std::string& producer) {
  if (vol.data.size() != vol.dims.voxels()) {
    throw std::invalid_argument("write_volume: data size does not match dims " + vol.dims.str());
  }
  const VolumeStats stats = volume_stats(vol);
  Json header;
  header["dims"] = {vol.dims.d, vol.dims.h, vol.dims.w};
  header["dtype"] = "f32";
  header["byte_order"] = "little";
  header["stats"] = {{"mean", stats.mean}, {"std", stats.std}};
  header["producer"] = producer;
  header["schema_version"] = kVolumeSchemaVersion;
  const std::string text = header.dump();

  std::vector<std::uint8_t> bytes(kVolumeMagic, kVolumeMagic + 4);
  const auto n = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(n >> (8 * b)));
  bytes.insert(bytes.end(), text.begin(), text.end());
  append_f32_le(bytes, vol.data.data(), vol.data.size());
  spit(path, bytes.data(), bytes.size());
}

Json read_volume_header(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  return parse_header(path, bytes.data(), bytes.size()).json;
}

Volume read_volume(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const ParsedHeader h = parse_header(path, bytes.data(), bytes.size());
  const std::size_t expected = 4 * h.dims.voxels();
  const std::size_t actual = bytes.size() - h.payload_offset;
  if (actual != expected) {
    throw VolumeFileError(VolumeFileError::Kind::LengthMismatch, path,
                          "payload is " + std::to_string(actual) + " bytes but dims " +
                              h.dims.str() + " require " + std::to_string(expected));
  }
  Volume v(h.dims);
  read_f32_le(bytes.data() + h.payload_offset, v.data.data(), v.data.size());
  return v;
}

void write_json(const Json& j, const std::filesystem::path& path) {
  const std::string text = j.dump(2) + "\n";
  spit(path, text.data(), text.size());
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open for reading");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

Json RunManifest::to_json() const {
  auto hashed = [](const std::vector<std::filesystem::path>& paths,
                   const std::filesystem::path& root) {
    Json list = Json::array();
    for (const auto& p : paths) {
      const auto shown = root.empty() ? p : p.lexically_relative(root);
      Json entry{{"path", shown.generic_string()}};
      if (std::filesystem::is_regular_file(p)) entry["sha256"] = to_hex(file_sha256(p));
      list.push_back(entry);
    }
    return list;
  };
  Json j;
  j["command"] = command;
  j["config"] = config;
  j["seeds"] = Json::object();
  for (const auto& [k, v] : seeds) j["seeds"][k] = v;
  j["inputs"] = hashed(inputs, {});
  j["outputs"] = hashed(outputs, output_root);
  j["fingerprints"] = Json::object();
  for (const auto& [k, v] : fingerprints) j["fingerprints"][k] = v;
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j;
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  write_json(manifest.to_json(), path);
}

JsonLinesLog::JsonLinesLog(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw std::runtime_error(path.string() + ": cannot open log for writing");
}

void JsonLinesLog::write(const Json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error(path_.string() + ": log write failed");
}

Json epoch_record_json(const std::string& phase, const EpochRecord& rec) {
  Json j;
  j["phase"] = phase;
  j["epoch"] = rec.epoch;
  j["lr"] = rec.lr;
  auto put = [&](const char* key, double v) {
    if (std::isfinite(v)) j[key] = v;
  };
  put("train_loss", rec.train_loss);
  put("val_loss", rec.val_loss);
  put("val_mae", rec.val_mae);
  put("mean_mask", rec.mean_mask);
  put("prediction_term", rec.prediction_term);
  put("noise_term", rec.noise_term);
  return j;
}

}  // namespace noisemap
