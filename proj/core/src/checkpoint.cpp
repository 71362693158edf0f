#include "evtrack/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace evtrack {

namespace {

constexpr char kMagic[8] = {'F', 'E', 'T', 'C', 'K', 'P', 'T', '\0'};

static_assert(sizeof(float) == 4, "checkpoint blobs are 32-bit floats");

// Blobs are written little-endian; byte-swap on big-endian hosts.
bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

void swap_if_needed(std::vector<float>& data) {
  if (host_is_little_endian()) return;
  for (float& f : data) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    u = __builtin_bswap32(u);
    std::memcpy(&f, &u, 4);
  }
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<CheckpointEntry>& entries,
                     const std::string& config_json) {
  nlohmann::json manifest;
  manifest["format"] = "evtrack-checkpoint-v1";
  manifest["dtype"] = "f32le";
  manifest["config"] =
      config_json.empty() ? nlohmann::json::object()
                          : nlohmann::json::parse(config_json);
  auto& params = manifest["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    nlohmann::json p;
    p["name"] = e.name;
    p["shape"] = e.shape;
    p["offset"] = offset;
    p["count"] = e.data.size();
    params.push_back(std::move(p));
    offset += e.data.size();
  }
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries) {
    std::vector<float> data = e.data;
    swap_if_needed(data);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * 4));
  }
  if (!out) throw InputError("save_checkpoint: short write to " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path,
                                             std::string* config_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw InputError("load_checkpoint: " + path + " is not a checkpoint");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw InputError("load_checkpoint: truncated manifest in " + path);

  nlohmann::json manifest = nlohmann::json::parse(text);
  if (config_json) *config_json = manifest.value("config", nlohmann::json::object()).dump();

  std::vector<CheckpointEntry> entries;
  for (const auto& p : manifest.at("params")) {
    CheckpointEntry e;
    e.name = p.at("name").get<std::string>();
    e.shape = p.at("shape").get<Shape>();
    e.data.resize(p.at("count").get<std::size_t>());
    entries.push_back(std::move(e));
  }
  for (auto& e : entries) {
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * 4));
    if (!in) throw InputError("load_checkpoint: truncated blob in " + path);
    swap_if_needed(e.data);
  }
  return entries;
}

}  // namespace evtrack
