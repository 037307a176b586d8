#pragma once

#include "mad/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mad {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// On-disk layout:
///   u64 little-endian header length
///   JSON header (arch, shapes, seed, payload table, optional metadata)
///   params as little-endian f32, then the optional prune mask as one byte per weight
///
/// Parameters are stored in single precision, so a network saved from double
/// values loads back rounded; a loaded checkpoint re-saves to identical bytes.
struct Checkpoint {
  Network net;
  std::optional<std::vector<std::uint8_t>> prune_keep;  // one entry per weight position
  nlohmann::json saliency_meta;                         // null when absent
  std::string stage;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mad
