#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "conclu/network.hpp"

namespace conclu {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout, all integers little-endian:
//   "CCLU" | u32 version | u32 len, network config JSON |
//   u64 epoch | u64 global_step | u64 optimizer step | u32 len, RNG state |
//   u64 count | count × (u32 len, name | u32 rank | rank × u64 dim | f64 values)
// Tensors are the parameters ("<name>", "<name>#m", "<name>#v") followed by
// the buffers, in model order.
struct Checkpoint {
  net::ModelState state;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t global_step = 0;
  std::string rng_state;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace conclu
