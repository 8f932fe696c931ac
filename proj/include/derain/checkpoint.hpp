#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "derain/config.hpp"
#include "derain/net.hpp"

namespace derain {

/// Manifest and blob disagree, or a file is missing or truncated. The
/// message names the offending entry.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The checkpoint was written for a different model configuration.
class ConfigMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointFormat = "derain-checkpoint-1";

struct CheckpointMeta {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  int stage = 1;
};

/// model.* keys shared by train configs and checkpoint manifests.
void write_model_config(std::ostream& os, const ModelConfig& cfg);
ModelConfig read_model_config(KeyValueFile& kv, const ModelConfig& defaults);

/// Writes manifest.txt and params.bin (little-endian float32: parameters in
/// manifest order, then batch-norm running statistics).
void save_checkpoint(CascadeModel<float>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& dir);

/// Rebuilds the model from the manifest's configuration and fills it from
/// the blob. Nothing is returned unless every entry verifies.
CascadeModel<float> load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

/// As above, but throws ConfigMismatchError when the stored configuration
/// differs from `expected`.
CascadeModel<float> load_checkpoint(const std::filesystem::path& dir, const ModelConfig& expected,
                                    CheckpointMeta* meta = nullptr);

/// FNV-1a over the raw bytes of `values`.
std::uint64_t fnv1a(std::span<const float> values);

/// Flat little-endian float32 files with a sidecar list of named segments.
struct BlobEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // in floats
  std::uint64_t count = 0;
  std::uint64_t hash = 0;
};

void write_f32_blob(const std::filesystem::path& path,
                    const std::vector<std::span<const float>>& segments);
/// Reads the whole blob and verifies it against `entries`.
std::vector<float> read_f32_blob(const std::filesystem::path& path,
                                 const std::vector<BlobEntry>& entries);

std::string format_blob_entry(const BlobEntry& e);
BlobEntry parse_blob_entry(const std::string& text);

}  // namespace derain
