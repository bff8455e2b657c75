#pragma once

// On-disk formats: volume files, run manifests and JSON-lines training logs.
//
// Volume file layout:
//   bytes 0..3   "NMVF"
//   bytes 4..7   header length n, little-endian u32
//   next n bytes JSON header {dims, dtype, byte_order, stats, producer, schema_version}
//   payload      D*H*W little-endian f32, row-major (z, y, x)

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "noisemap/digest.hpp"
#include "noisemap/trainer.hpp"
#include "noisemap/volume.hpp"

namespace noisemap {

using Json = nlohmann::ordered_json;

inline constexpr int kVolumeSchemaVersion = 1;

class VolumeFileError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadHeader, UnsupportedFormat, UnknownSchema, LengthMismatch };

  VolumeFileError(Kind kind, const std::filesystem::path& path, const std::string& why);
  Kind kind() const { return kind_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  Kind kind_;
  std::filesystem::path path_;
};

void write_volume(const Volume& vol, const std::filesystem::path& path,
                  const std::string& producer = "noisemap");
Volume read_volume(const std::filesystem::path& path);
// Header only; the payload is not read.
Json read_volume_header(const std::filesystem::path& path);

// JSON helpers. Files end with a newline and use two-space indentation.
void write_json(const Json& j, const std::filesystem::path& path);
Json read_json(const std::filesystem::path& path);

// Raw little-endian f32 encode/decode shared by the volume and parameter files.
void append_f32_le(std::vector<std::uint8_t>& out, const float* values, std::size_t n);
void read_f32_le(const std::uint8_t* bytes, float* values, std::size_t n);

struct RunManifest {
  std::string command;
  Json config = Json::object();
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  std::map<std::string, std::string> fingerprints;  // model name -> hex
  double wall_clock_seconds = 0.0;
  // When set, outputs are recorded relative to this directory so manifests of
  // identical runs in different places compare equal.
  std::filesystem::path output_root;

  // Hashes every input and output file that exists.
  Json to_json() const;
};

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

// Appends one compact JSON object per line; flushes after every record.
class JsonLinesLog {
 public:
  explicit JsonLinesLog(const std::filesystem::path& path);
  void write(const Json& record);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

Json epoch_record_json(const std::string& phase, const EpochRecord& rec);

}  // namespace noisemap
