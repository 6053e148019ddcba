#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "fine/image.hpp"

namespace fine {

// Images grouped by class; images[k] all belong to class_ids[k].
struct ImageCollection {
  std::size_t side = 0;
  std::vector<std::uint16_t> class_ids;
  std::vector<std::vector<Image>> images;

  std::size_t class_count() const { return class_ids.size(); }
  std::size_t image_count() const;
  // Index into images for a class id; throws when absent.
  std::size_t slot_of(std::uint16_t class_id) const;
  // Keeps only the listed classes, in the listed order.
  ImageCollection restrict_to(std::span<const std::uint16_t> ids) const;

  bool operator==(const ImageCollection&) const = default;
};

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Reads an IDX image file and its label file; pixels are scaled to [0, 1] and
// grouped by label (ascending). Images must be square.
ImageCollection load_idx(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path);

// Writes a pair of IDX files; used by tests and fixture tooling.
void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const Image> images, std::span<const std::uint8_t> labels);

// Procedural stroke glyphs: each class is 2-4 strokes (segments or arcs);
// instances of a class jitter control points and stroke width.
ImageCollection gen_glyphs(std::size_t class_count, std::size_t per_class, std::size_t side,
                           std::uint64_t seed);

}  // namespace fine
