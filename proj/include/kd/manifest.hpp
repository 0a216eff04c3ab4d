#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace kd {

inline constexpr const char* kToolVersion = "0.1.0";

// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

struct RunManifest {
  std::string subcommand;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
};

nlohmann::ordered_json to_json(const RunManifest& manifest);

// Writes the manifest through a temporary file and rename; input digests are
// computed at write time.
void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace kd
