#pragma once

// Per-run record of what went in and what came out, with content hashes so a
// later run can tell whether an artifact was replaced underneath it.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "hiesql/checkpoint.hpp"
#include "hiesql/dataset.hpp"

namespace hiesql {

inline std::string canonical_path(const std::string& p) { return std::filesystem::absolute(p).lexically_normal().string(); }

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> content hash
  std::map<std::string, std::string> outputs;  // path -> content hash

  void input(const std::string& path) { inputs[canonical_path(path)] = file_hash(path); }
  void output(const std::string& path) { outputs[canonical_path(path)] = file_hash(path); }

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config_path}, {"seed", seed}, {"inputs", inputs}, {"outputs", outputs}};
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "cannot write manifest '", path, "'");
    out << to_json().dump(2) << "\n";
  }
};

inline std::string manifest_path_for(const std::string& artifact) { return artifact + ".manifest.json"; }

// If `artifact` has a sibling manifest, its recorded hash must still match.
inline void verify_artifact(const std::string& artifact) {
  const std::string mpath = manifest_path_for(artifact);
  if (!std::filesystem::exists(mpath)) return;
  const nlohmann::json j = read_json_file(mpath);
  const auto& outs = j.at("outputs");
  auto it = outs.find(canonical_path(artifact));
  if (it == outs.end()) return;
  check(it->get<std::string>() == file_hash(artifact), "'", artifact, "' does not match the hash in ", mpath);
}

}  // namespace hiesql
