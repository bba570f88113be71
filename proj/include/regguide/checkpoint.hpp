#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "regguide/schedule.hpp"
#include "regguide/tinynn.hpp"

namespace regguide {

struct CheckpointMeta {
  int epoch = 0;
  double loss = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  NoisePredictor net;
  Schedule schedule;
  CheckpointMeta meta;
};

/// Self-describing JSON text with full-precision decimal floats.
std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::string& text);

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads and rejects checkpoints trained under a different configuration.
Checkpoint load_checkpoint_checked(const std::filesystem::path& path, std::uint64_t expected_hash);

}  // namespace regguide
