#pragma once

// Named-tensor archive: a JSON manifest (name, shape, checksum, frozen flag,
// free-form metadata) followed by the raw little-endian doubles.
//
//   HIESQLCK1\n <manifest bytes as decimal>\n <manifest> <tensor data>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hiesql/nn.hpp"
#include "json.hpp"

namespace hiesql {

inline constexpr std::string_view kCheckpointMagic = "HIESQLCK1";

inline std::uint64_t tensor_checksum(const Mat& m) {
  return fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

// Content hash of a whole file, used by run manifests.
inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open '", path, "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

inline void save_checkpoint(const std::string& path, const ParamStore& ps, const nlohmann::json& meta) {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto* p : ps.all()) {
    manifest["tensors"].push_back({{"name", p->name},
                                   {"rows", p->value.rows()},
                                   {"cols", p->value.cols()},
                                   {"offset", offset},
                                   {"checksum", hex64(tensor_checksum(p->value))},
                                   {"frozen", p->frozen},
                                   {"group", p->group}});
    offset += static_cast<std::size_t>(p->value.size());
  }
  const std::string text = manifest.dump();
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  // Write next to the target and rename, so a crash never leaves a torn file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write checkpoint '", tmp, "'");
    out << kCheckpointMagic << '\n' << text.size() << '\n' << text;
    for (const auto* p : ps.all()) out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(sizeof(double) * p->value.size()));
    check(out.good(), "failed writing checkpoint '", tmp, "'");
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointTensor {
  std::string name;
  Mat value;
  bool frozen = false;
  int group = 0;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<CheckpointTensor> tensors;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "checkpoint not found: '", path, "'");
  std::string magic, len_line;
  std::getline(in, magic);
  check(magic == kCheckpointMagic, "'", path, "' is not a checkpoint archive");
  std::getline(in, len_line);
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    fail("'", path, "': corrupt manifest length");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  check(in.good(), "'", path, "': truncated manifest");
  const auto manifest = nlohmann::json::parse(text);
  Checkpoint ck;
  ck.meta = manifest.at("meta");
  for (const auto& t : manifest.at("tensors")) {
    CheckpointTensor ct;
    ct.name = t.at("name").get<std::string>();
    ct.value.resize(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(ct.value.data()), static_cast<std::streamsize>(sizeof(double) * ct.value.size()));
    check(in.good(), "'", path, "': truncated data for tensor '", ct.name, "'");
    check(hex64(tensor_checksum(ct.value)) == t.at("checksum").get<std::string>(), "'", path, "': checksum mismatch for tensor '",
          ct.name, "'");
    ct.frozen = t.at("frozen").get<bool>();
    ct.group = t.at("group").get<int>();
    ck.tensors.push_back(std::move(ct));
  }
  return ck;
}

// Copies archived values into `ps`, which must hold exactly the same tensors.
inline void restore_params(ParamStore& ps, const Checkpoint& ck, const std::string& what) {
  check(ck.tensors.size() == ps.size(), what, ": checkpoint has ", ck.tensors.size(), " tensors, model has ", ps.size());
  for (const auto& t : ck.tensors) {
    check(ps.has(t.name), what, ": unexpected tensor '", t.name, "'");
    Param& p = ps.get(t.name);
    check(p.value.rows() == t.value.rows() && p.value.cols() == t.value.cols(), what, ": shape mismatch for '", t.name, "'");
    p.value = t.value;
    p.frozen = t.frozen;
  }
}

}  // namespace hiesql
