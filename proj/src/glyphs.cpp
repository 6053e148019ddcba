#include "fine/glyphs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <string>

#include "fine/rng.hpp"

namespace fine {

std::size_t ImageCollection::image_count() const {
  std::size_t n = 0;
  for (const auto& v : images) n += v.size();
  return n;
}

std::size_t ImageCollection::slot_of(std::uint16_t class_id) const {
  auto it = std::find(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end()) {
    throw std::out_of_range("class id " + std::to_string(class_id) + " not in collection");
  }
  return static_cast<std::size_t>(it - class_ids.begin());
}

ImageCollection ImageCollection::restrict_to(std::span<const std::uint16_t> ids) const {
  ImageCollection out;
  out.side = side;
  for (auto id : ids) {
    out.class_ids.push_back(id);
    out.images.push_back(images[slot_of(id)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IdxError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& p) {
  if (off + 4 > b.size()) throw IdxError("'" + p.string() + "' is truncated in its header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

ImageCollection load_idx(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path) {
  const auto ib = read_all(images_path);
  const auto lb = read_all(labels_path);
  if (be32(ib, 0, images_path) != kIdxImageMagic) {
    throw IdxError("'" + images_path.string() + "' has a bad magic number (expected 0x00000803)");
  }
  if (be32(lb, 0, labels_path) != kIdxLabelMagic) {
    throw IdxError("'" + labels_path.string() + "' has a bad magic number (expected 0x00000801)");
  }
  const std::size_t count = be32(ib, 4, images_path);
  const std::size_t rows = be32(ib, 8, images_path);
  const std::size_t cols = be32(ib, 12, images_path);
  const std::size_t label_count = be32(lb, 4, labels_path);
  if (count != label_count) {
    throw IdxError("image count " + std::to_string(count) + " does not match label count " +
                   std::to_string(label_count));
  }
  if (rows != cols) throw IdxError("IDX images must be square");
  if (ib.size() < 16 + count * rows * cols) throw IdxError("'" + images_path.string() + "' is truncated");
  if (lb.size() < 8 + count) throw IdxError("'" + labels_path.string() + "' is truncated");

  std::map<std::uint16_t, std::vector<Image>> grouped;
  for (std::size_t i = 0; i < count; ++i) {
    Image img(rows);
    const unsigned char* src = &ib[16 + i * rows * cols];
    for (std::size_t k = 0; k < rows * cols; ++k) img.pixels[k] = to_pixel(src[k] / 255.0);
    grouped[lb[8 + i]].push_back(std::move(img));
  }
  ImageCollection out;
  out.side = rows;
  for (auto& [label, imgs] : grouped) {
    out.class_ids.push_back(label);
    out.images.push_back(std::move(imgs));
  }
  return out;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const Image> images, std::span<const std::uint8_t> labels) {
  if (images.size() != labels.size()) throw IdxError("write_idx: images and labels differ in count");
  const std::size_t side = images.empty() ? 0 : images[0].side;
  std::ofstream im(images_path, std::ios::binary);
  std::ofstream lb(labels_path, std::ios::binary);
  if (!im || !lb) throw IdxError("write_idx: cannot open output files");
  put_be32(im, kIdxImageMagic);
  put_be32(im, static_cast<std::uint32_t>(images.size()));
  put_be32(im, static_cast<std::uint32_t>(side));
  put_be32(im, static_cast<std::uint32_t>(side));
  for (const auto& img : images) {
    for (float p : img.pixels) {
      im.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f))));
    }
  }
  put_be32(lb, kIdxLabelMagic);
  put_be32(lb, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) lb.put(static_cast<char>(l));
}

// ---------------------------------------------------------------------------
// Procedural glyphs
// ---------------------------------------------------------------------------

namespace {

struct Stroke {
  bool arc = false;
  // segment: (x0,y0)-(x1,y1); arc: center (x0,y0), radius x1, start angle y1, sweep.
  double x0, y0, x1, y1, sweep;
};

struct GlyphShape {
  std::vector<Stroke> strokes;
  double width;
};

// Coordinates are in the unit square; content stays inside [0.22, 0.78].
GlyphShape random_shape(Rng& rng) {
  GlyphShape g;
  const int n = 2 + static_cast<int>(rng.below(3));
  for (int k = 0; k < n; ++k) {
    Stroke s;
    s.arc = rng.uniform() < 0.35;
    if (s.arc) {
      s.x0 = rng.uniform(0.38, 0.62);
      s.y0 = rng.uniform(0.38, 0.62);
      s.x1 = rng.uniform(0.08, 0.16);
      s.y1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      s.sweep = rng.uniform(0.6, 1.6) * std::numbers::pi;
    } else {
      s.x0 = rng.uniform(0.25, 0.75);
      s.y0 = rng.uniform(0.25, 0.75);
      do {
        s.x1 = rng.uniform(0.25, 0.75);
        s.y1 = rng.uniform(0.25, 0.75);
      } while (std::hypot(s.x1 - s.x0, s.y1 - s.y0) < 0.2);
      s.sweep = 0.0;
    }
    g.strokes.push_back(s);
  }
  g.width = rng.uniform(0.045, 0.06);
  return g;
}

GlyphShape jitter(const GlyphShape& base, Rng& rng) {
  GlyphShape g = base;
  const double j = 0.025;
  for (auto& s : g.strokes) {
    s.x0 += rng.uniform(-j, j);
    s.y0 += rng.uniform(-j, j);
    if (s.arc) {
      s.y1 += rng.uniform(-0.15, 0.15);
    } else {
      s.x1 += rng.uniform(-j, j);
      s.y1 += rng.uniform(-j, j);
    }
  }
  g.width *= rng.uniform(0.9, 1.1);
  return g;
}

double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

Image render(const GlyphShape& g, std::size_t side) {
  Image img(side);
  const double n = static_cast<double>(side);
  const double soft = 0.7 / n;  // about one pixel of anti-aliasing
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double px = (static_cast<double>(c) + 0.5) / n;
      const double py = (static_cast<double>(r) + 0.5) / n;
      double best = 1e9;
      for (const auto& s : g.strokes) {
        if (s.arc) {
          // Polyline approximation of the arc.
          const int pieces = 12;
          for (int k = 0; k < pieces; ++k) {
            const double a0 = s.y1 + s.sweep * k / pieces;
            const double a1 = s.y1 + s.sweep * (k + 1) / pieces;
            best = std::min(best, seg_dist(px, py, s.x0 + s.x1 * std::cos(a0), s.y0 + s.x1 * std::sin(a0),
                                           s.x0 + s.x1 * std::cos(a1), s.y0 + s.x1 * std::sin(a1)));
          }
        } else {
          best = std::min(best, seg_dist(px, py, s.x0, s.y0, s.x1, s.y1));
        }
      }
      const double v = std::clamp((g.width - best) / soft + 0.5, 0.0, 1.0);
      img.at(r, c) = to_pixel(v);
    }
  }
  return img;
}

}  // namespace

ImageCollection gen_glyphs(std::size_t class_count, std::size_t per_class, std::size_t side,
                           std::uint64_t seed) {
  if (class_count < 2) throw std::invalid_argument("gen_glyphs: class_count must be at least 2");
  if (per_class < 1) throw std::invalid_argument("gen_glyphs: per_class must be at least 1");
  if (side < kMinImageSide) throw std::invalid_argument("gen_glyphs: side below minimum");
  if (class_count > 65535) throw std::invalid_argument("gen_glyphs: class ids are 16-bit");
  ImageCollection out;
  out.side = side;
  for (std::size_t k = 0; k < class_count; ++k) {
    Rng class_rng(hash64(seed, k));
    const GlyphShape base = random_shape(class_rng);
    std::vector<Image> imgs;
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng inst_rng(hash64(hash64(seed, k), i + 1));
      imgs.push_back(render(jitter(base, inst_rng), side));
    }
    out.class_ids.push_back(static_cast<std::uint16_t>(k));
    out.images.push_back(std::move(imgs));
  }
  return out;
}

}  // namespace fine
