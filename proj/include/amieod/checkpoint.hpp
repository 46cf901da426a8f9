#pragma once

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace amieod {

inline constexpr uint32_t kCheckpointVersion = 1;

/// Weights plus the state needed to resume or reproduce a run.
///
/// File layout (little-endian):
///   8 bytes  magic "AMIEODCK"
///   u32      format version
///   u32      reserved (0)
///   u64      header length H
///   H bytes  JSON header: stage, epoch, rng_state, config snapshot and one
///            {name, dtype, shape, offset, nbytes} record per tensor
///   ...      tensor data, contiguous, in header order
///   u64      FNV-1a 64 checksum of every preceding byte
///
/// Tensor names are prefixed by owner: "experts.", "detector.", "esm.".
struct Checkpoint {
  uint32_t format_version = kCheckpointVersion;
  int stage = 0;
  int epoch = 0;
  std::string rng_state;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;

  bool has_prefix(const std::string& prefix) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws UnsupportedVersion for an unknown format version and
/// CorruptCheckpoint for anything malformed, truncated or failing the checksum.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Missing file -> InvalidArgument("checkpoint not found: ...").
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Adds every parameter and buffer of `module` under `prefix`.
void export_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);
/// Copies tensors stored under `prefix` into `module`; every parameter and
/// buffer must be present with a matching shape.
void import_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);

/// FNV-1a over the raw bytes of the named tensors (for frozen-weight checks).
uint64_t weights_hash(const torch::nn::Module& module);

}  // namespace amieod
