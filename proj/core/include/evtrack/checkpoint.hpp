#pragma once

// Checkpoint file: 8-byte magic, u64 manifest length, JSON manifest, then a
// raw blob of little-endian 32-bit floats. The manifest lists each parameter
// name, shape and blob offset (in floats) plus an optional config echo.

#include <string>
#include <vector>

#include "evtrack/block.hpp"
#include "evtrack/nd_array.hpp"

namespace evtrack {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void save_checkpoint(const std::string& path,
                     const std::vector<CheckpointEntry>& entries,
                     const std::string& config_json = "{}");

std::vector<CheckpointEntry> load_checkpoint(const std::string& path,
                                             std::string* config_json = nullptr);

template <typename T>
std::vector<CheckpointEntry> to_entries(const ParamList<T>& params) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(params.size());
  for (const auto& p : params) {
    CheckpointEntry e;
    e.name = p.name;
    e.shape = p.var->value.shape();
    e.data.resize(p.var->value.numel());
    for (std::size_t i = 0; i < e.data.size(); ++i)
      e.data[i] = static_cast<float>(p.var->value[i]);
    entries.push_back(std::move(e));
  }
  return entries;
}

// Loads entries into an existing parameter list by name; every parameter
// must be present with a matching shape.
template <typename T>
void from_entries(const std::vector<CheckpointEntry>& entries,
                  ParamList<T>& params) {
  for (auto& p : params) {
    const CheckpointEntry* found = nullptr;
    for (const auto& e : entries)
      if (e.name == p.name) {
        found = &e;
        break;
      }
    if (!found) throw InputError("checkpoint missing parameter " + p.name);
    if (found->shape != p.var->value.shape()) {
      throw ShapeError("checkpoint parameter " + p.name + ": shape " +
                       shape_str(found->shape) + " vs model " +
                       shape_str(p.var->value.shape()));
    }
    for (std::size_t i = 0; i < found->data.size(); ++i)
      p.var->value[i] = static_cast<T>(found->data[i]);
  }
}

}  // namespace evtrack
