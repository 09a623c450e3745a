#include "cod2/run_manifest.hpp"

#include <fstream>
#include <stdexcept>

namespace cod2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

std::string code_version() { return COD2_VERSION; }
std::string git_revision() { return COD2_GIT_REV; }

json RunManifest::to_json() const {
  return json{{"command", command},     {"config", config},   {"dataset_root", dataset_root},
              {"dataset_hash", dataset_hash}, {"version", version}, {"git_rev", git_rev},
              {"seed", seed},           {"outputs", outputs}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.dataset_root = j.value("dataset_root", "");
  m.dataset_hash = j.value("dataset_hash", "");
  m.version = j.value("version", "");
  m.git_rev = j.value("git_rev", "");
  m.seed = j.value("seed", uint64_t{0});
  m.outputs = j.value("outputs", std::map<std::string, std::string>{});
  return m;
}

void write_run_manifest(const fs::path& dir, RunManifest manifest) {
  manifest.version = code_version();
  manifest.git_rev = git_revision();
  fs::create_directories(dir);
  std::ofstream out(dir / kRunManifestName);
  if (!out) throw std::runtime_error("cannot write " + (dir / kRunManifestName).string());
  out << manifest.to_json().dump(2) << "\n";
}

RunManifest read_run_manifest(const fs::path& dir) {
  std::ifstream in(dir / kRunManifestName);
  if (!in) throw std::runtime_error("no run manifest in " + dir.string());
  return RunManifest::from_json(json::parse(in));
}

}  // namespace cod2
