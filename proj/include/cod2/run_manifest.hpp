#pragma once

// run_manifest.json: everything needed to re-run the experiment that produced a directory.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace cod2 {

inline constexpr const char* kRunManifestName = "run_manifest.json";

struct RunManifest {
  std::string command;  // synth-data | train | eval | generate | ablate
  nlohmann::json config = nlohmann::json::object();
  std::string dataset_root;
  std::string dataset_hash;
  std::string version;
  std::string git_rev;
  uint64_t seed = 0;
  std::map<std::string, std::string> outputs;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

std::string code_version();
std::string git_revision();

/// Fills version and git_rev, then (over)writes <dir>/run_manifest.json.
void write_run_manifest(const std::filesystem::path& dir, RunManifest manifest);
RunManifest read_run_manifest(const std::filesystem::path& dir);

}  // namespace cod2
