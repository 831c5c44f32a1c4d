#pragma once

// Run manifest: config hash, tool version, wall clock and per-artifact
// SHA-256 digests.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "sul/experiments.hpp"

namespace sul {

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

struct ManifestInfo {
  std::string command;
  std::chrono::system_clock::time_point started;
  double wall_seconds = 0.0;
  int threads = 1;
};

inline Json make_manifest(const Json& config, const RunOutput& out, const ManifestInfo& info) {
  Json files = Json::array();
  for (const auto& [name, content] : out.files)
    files.push_back(Json{{"path", name}, {"bytes", content.size()}, {"sha256", sha256_hex(content)}});
  return Json{{"tool", "sul"},
              {"version", kToolVersion},
              {"command", info.command},
              {"config_sha256", sha256_hex(config.dump())},
              {"started", utc_timestamp(info.started)},
              {"wall_seconds", info.wall_seconds},
              {"threads", info.threads},
              {"files", files}};
}

/// Writes every artifact under dir, then manifest.json. Existing files with
/// the same names are replaced.
inline void write_run(const std::filesystem::path& dir, const RunOutput& out, const Json& manifest) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : out.files) {
    std::ofstream f(dir / name, std::ios::binary);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw Error("cannot write " + (dir / name).string());
  }
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
  if (!m) throw Error("cannot write manifest");
}

/// Recomputes digests of the files listed in a manifest; returns the names
/// that are missing or differ.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("no manifest in " + dir.string());
  const Json m = Json::parse(in);
  std::vector<std::string> bad;
  for (const auto& f : m.at("files")) {
    const std::string name = f.at("path").get<std::string>();
    std::ifstream g(dir / name, std::ios::binary);
    std::stringstream buf;
    buf << g.rdbuf();
    if (!g || sha256_hex(buf.str()) != f.at("sha256").get<std::string>()) bad.push_back(name);
  }
  return bad;
}

}  // namespace sul
