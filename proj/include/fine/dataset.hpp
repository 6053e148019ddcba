#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fine/glyphs.hpp"
#include "fine/task.hpp"
#include "fine/transform.hpp"

namespace fine {

inline constexpr int kDatasetFormatVersion = 1;

enum class SourceKind { procedural_glyph, mnist_idx };

struct SourceConfig {
  SourceKind kind = SourceKind::procedural_glyph;
  // procedural glyphs
  std::size_t class_count = 20;
  std::size_t per_class = 10;
  std::size_t image_side = 16;
  std::uint64_t glyph_seed = 1;
  // mnist-idx
  std::string idx_images;
  std::string idx_labels;

  bool operator==(const SourceConfig&) const = default;
};

enum class SplitSide { train, test };

struct GenerationConfig {
  SourceConfig source;
  std::vector<Family> families{Family::translation};
  SampleMode mode = SampleMode::grid;
  std::optional<OodSide> ood_side;  // constrained mode only
  std::size_t task_count = 100;
  std::uint64_t seed = 0;
  std::vector<std::uint16_t> train_classes;  // empty: first half of the source
  std::vector<std::uint16_t> test_classes;   // empty: second half of the source
  SplitSide split = SplitSide::train;
  bool same_class_probe = false;
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  std::size_t image_side = 0;
  std::size_t task_count = 0;
  std::vector<Family> families;
  std::string mode;      // "grid" | "constrained"
  std::string ood_side;  // "" | "train" | "test"
  std::string split;     // "train" | "test"
  std::vector<std::uint16_t> train_classes;
  std::vector<std::uint16_t> test_classes;
  std::uint64_t base_seed = 0;
  bool same_class_probe = false;
  SourceConfig source;
  std::string payload_file;
  std::size_t record_bytes = 0;
  std::string payload_digest;  // FNV-1a 64, lower-case hex

  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<IQTask> tasks;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SplitOverlapError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

class DatasetIoError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

std::size_t record_bytes(std::size_t image_side);

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::string hex64(std::uint64_t v);

// Glyphs are regenerated from their seed; IDX files are loaded.
ImageCollection load_source(const SourceConfig& cfg);

// Resolves default class splits and checks disjointness.
void resolve_split(GenerationConfig& cfg, const ImageCollection& source);

// Task i draws from the stream hash64(seed, i), so any index can be produced
// independently of the others.
IQTask generate_task(const GenerationConfig& cfg, const ImageCollection& pool, std::size_t index);

Dataset generate_dataset(GenerationConfig cfg, const ImageCollection& source);

// Serializes into <base>.json (manifest) and <base>.bin (payload) and returns
// the manifest as written.
DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& base);
Dataset read_dataset(const std::filesystem::path& base);

DatasetManifest build_dataset(const GenerationConfig& cfg, const std::filesystem::path& base);

std::vector<unsigned char> encode_payload(std::span<const IQTask> tasks);
std::vector<IQTask> decode_payload(std::span<const unsigned char> bytes, std::size_t image_side);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

// Paths of the two files making up a dataset or checkpoint.
std::filesystem::path manifest_path(const std::filesystem::path& base);
std::filesystem::path payload_path(const std::filesystem::path& base);

}  // namespace fine
