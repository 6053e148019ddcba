#include "fine/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace fine {

using nlohmann::json;

namespace {

constexpr std::size_t kImagesPerRecord = 7;
constexpr std::size_t kParamSlots = 6;

void put_u8(std::vector<unsigned char>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_f32(std::vector<unsigned char>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>(bits >> (8 * k)));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int k = 0; k < 4; ++k) bits |= std::uint32_t{p[k]} << (8 * k);
  return std::bit_cast<float>(bits);
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_image(std::vector<unsigned char>& out, const Image& img) {
  for (float p : img.pixels) put_f32(out, p);
}

Image get_image(const unsigned char*& p, std::size_t side) {
  Image img(side);
  for (auto& px : img.pixels) {
    px = get_f32(p);
    p += 4;
  }
  return img;
}

std::string mode_name(SampleMode m) { return m == SampleMode::grid ? "grid" : "constrained"; }

std::string side_name(std::optional<OodSide> s) {
  if (!s) return "";
  return *s == OodSide::train ? "train" : "test";
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DatasetIoError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, std::span<const unsigned char> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetIoError("cannot write '" + p.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetIoError("write failed for '" + p.string() + "'");
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".json";
  return p;
}

std::filesystem::path payload_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".bin";
  return p;
}

std::size_t record_bytes(std::size_t side) {
  return kImagesPerRecord * side * side * 4 + 1 + 1 + kParamSlots * 4 + 2 * 2;
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

std::vector<unsigned char> encode_payload(std::span<const IQTask> tasks) {
  std::vector<unsigned char> out;
  if (tasks.empty()) return out;
  out.reserve(tasks.size() * record_bytes(tasks[0].side()));
  for (const auto& t : tasks) {
    put_image(out, t.x);
    put_image(out, t.y);
    put_image(out, t.x_prime);
    for (const auto& c : t.choices) put_image(out, c);
    put_u8(out, t.answer_index);
    put_u8(out, static_cast<std::uint8_t>(t.rule.family()));
    for (float f : t.rule.packed()) put_f32(out, f);
    put_u16(out, t.hint_class);
    put_u16(out, t.probe_class);
  }
  return out;
}

std::vector<IQTask> decode_payload(std::span<const unsigned char> bytes, std::size_t side) {
  const std::size_t rb = record_bytes(side);
  if (bytes.size() % rb != 0) {
    throw DatasetError("payload size " + std::to_string(bytes.size()) + " is not a multiple of the record size " +
                       std::to_string(rb));
  }
  std::vector<IQTask> tasks;
  tasks.reserve(bytes.size() / rb);
  for (std::size_t off = 0; off < bytes.size(); off += rb) {
    const unsigned char* p = bytes.data() + off;
    IQTask t;
    t.x = get_image(p, side);
    t.y = get_image(p, side);
    t.x_prime = get_image(p, side);
    for (auto& c : t.choices) c = get_image(p, side);
    t.answer_index = *p++;
    const std::uint8_t fam = *p++;
    if (fam >= kFamilyCount) throw DatasetError("record has unknown family id " + std::to_string(fam));
    std::array<float, kParamSlots> slots{};
    for (auto& s : slots) {
      s = get_f32(p);
      p += 4;
    }
    t.rule = TransformSpec::unpack(static_cast<Family>(fam), slots);
    t.hint_class = get_u16(p);
    t.probe_class = get_u16(p + 2);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

ImageCollection load_source(const SourceConfig& cfg) {
  if (cfg.kind == SourceKind::mnist_idx) return load_idx(cfg.idx_images, cfg.idx_labels);
  return gen_glyphs(cfg.class_count, cfg.per_class, cfg.image_side, cfg.glyph_seed);
}

void resolve_split(GenerationConfig& cfg, const ImageCollection& source) {
  if (cfg.train_classes.empty() && cfg.test_classes.empty()) {
    const std::size_t half = source.class_count() / 2;
    for (std::size_t k = 0; k < source.class_count(); ++k) {
      (k < half ? cfg.train_classes : cfg.test_classes).push_back(source.class_ids[k]);
    }
  }
  std::set<std::uint16_t> train(cfg.train_classes.begin(), cfg.train_classes.end());
  for (auto id : cfg.test_classes) {
    if (train.count(id)) {
      throw SplitOverlapError("class " + std::to_string(id) + " appears in both the train and test split");
    }
  }
  for (const auto* ids : {&cfg.train_classes, &cfg.test_classes}) {
    for (auto id : *ids) source.slot_of(id);
  }
}

IQTask generate_task(const GenerationConfig& cfg, const ImageCollection& pool, std::size_t index) {
  Rng rng(hash64(cfg.seed, index));
  const Family fam = cfg.families[static_cast<std::size_t>(rng.below(cfg.families.size()))];
  AssembleOptions ao;
  ao.distractor_families = cfg.families;
  ao.sample.mode = cfg.mode;
  ao.sample.side = cfg.ood_side;
  ao.sample.image_side = pool.side;
  ao.same_class_probe = cfg.same_class_probe;
  // Resample the rule when no distractor can be told apart from it.
  for (int attempt = 0;; ++attempt) {
    const TransformSpec rule = sample_spec(fam, ao.sample, rng);
    try {
      return assemble_task(pool, rule, ao, rng);
    } catch (const DegenerateDistractorError&) {
      if (attempt >= 16) throw;
    }
  }
}

Dataset generate_dataset(GenerationConfig cfg, const ImageCollection& source) {
  if (cfg.families.empty()) throw DatasetError("generation config names no transformation family");
  if (cfg.task_count == 0) throw DatasetError("task_count must be positive");
  if (cfg.mode == SampleMode::constrained && !cfg.ood_side) {
    throw DatasetError("constrained mode needs an ood side (train or test)");
  }
  resolve_split(cfg, source);
  const auto& ids = cfg.split == SplitSide::train ? cfg.train_classes : cfg.test_classes;
  const ImageCollection pool = source.restrict_to(ids);

  Dataset ds;
  ds.tasks.reserve(cfg.task_count);
  for (std::size_t i = 0; i < cfg.task_count; ++i) ds.tasks.push_back(generate_task(cfg, pool, i));

  auto& m = ds.manifest;
  m.image_side = source.side;
  m.task_count = cfg.task_count;
  m.families = cfg.families;
  m.mode = mode_name(cfg.mode);
  m.ood_side = side_name(cfg.ood_side);
  m.split = cfg.split == SplitSide::train ? "train" : "test";
  m.train_classes = cfg.train_classes;
  m.test_classes = cfg.test_classes;
  m.base_seed = cfg.seed;
  m.same_class_probe = cfg.same_class_probe;
  m.source = cfg.source;
  m.record_bytes = record_bytes(source.side);
  return ds;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["image_side"] = m.image_side;
  j["task_count"] = m.task_count;
  json fams = json::array();
  for (auto f : m.families) fams.push_back(std::string(family_name(f)));
  j["families"] = fams;
  j["mode"] = m.mode;
  j["ood_side"] = m.ood_side;
  j["split"] = {{"side", m.split}, {"train_classes", m.train_classes}, {"test_classes", m.test_classes}};
  j["base_seed"] = m.base_seed;
  j["same_class_probe"] = m.same_class_probe;
  json src;
  if (m.source.kind == SourceKind::procedural_glyph) {
    src = {{"kind", "procedural-glyph"},
           {"class_count", m.source.class_count},
           {"per_class", m.source.per_class},
           {"image_side", m.source.image_side},
           {"glyph_seed", m.source.glyph_seed}};
  } else {
    src = {{"kind", "mnist-idx"}, {"images", m.source.idx_images}, {"labels", m.source.idx_labels}};
  }
  j["source"] = src;
  j["payload"] = {{"file", m.payload_file}, {"record_bytes", m.record_bytes}, {"fnv1a64", m.payload_digest}};
  j["record_layout"] = json::array({
      {{"field", "images"}, {"type", "float32le"}, {"count", 7 * m.image_side * m.image_side},
       {"order", "x,y,x_prime,choice0,choice1,choice2,choice3; each row-major"}},
      {{"field", "answer_index"}, {"type", "uint8"}},
      {{"field", "family_id"}, {"type", "uint8"}},
      {{"field", "params"}, {"type", "float32le"}, {"count", 6}},
      {{"field", "hint_class"}, {"type", "uint16le"}},
      {{"field", "probe_class"}, {"type", "uint16le"}},
  });
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const json j = json::parse(text);
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kDatasetFormatVersion) {
      throw DatasetError("unsupported dataset format_version " + std::to_string(m.format_version));
    }
    m.image_side = j.at("image_side").get<std::size_t>();
    m.task_count = j.at("task_count").get<std::size_t>();
    for (const auto& f : j.at("families")) m.families.push_back(parse_family(f.get<std::string>()));
    m.mode = j.at("mode").get<std::string>();
    m.ood_side = j.at("ood_side").get<std::string>();
    m.split = j.at("split").at("side").get<std::string>();
    m.train_classes = j.at("split").at("train_classes").get<std::vector<std::uint16_t>>();
    m.test_classes = j.at("split").at("test_classes").get<std::vector<std::uint16_t>>();
    m.base_seed = j.at("base_seed").get<std::uint64_t>();
    m.same_class_probe = j.at("same_class_probe").get<bool>();
    const auto& src = j.at("source");
    if (src.at("kind") == "procedural-glyph") {
      m.source.kind = SourceKind::procedural_glyph;
      m.source.class_count = src.at("class_count").get<std::size_t>();
      m.source.per_class = src.at("per_class").get<std::size_t>();
      m.source.image_side = src.at("image_side").get<std::size_t>();
      m.source.glyph_seed = src.at("glyph_seed").get<std::uint64_t>();
    } else {
      m.source.kind = SourceKind::mnist_idx;
      m.source.idx_images = src.at("images").get<std::string>();
      m.source.idx_labels = src.at("labels").get<std::string>();
    }
    m.payload_file = j.at("payload").at("file").get<std::string>();
    m.record_bytes = j.at("payload").at("record_bytes").get<std::size_t>();
    m.payload_digest = j.at("payload").at("fnv1a64").get<std::string>();
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed dataset manifest: ") + e.what());
  } catch (const TransformError& e) {
    throw DatasetError(std::string("malformed dataset manifest: ") + e.what());
  }
  return m;
}

DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& base) {
  DatasetManifest m = ds.manifest;
  const auto payload = encode_payload(ds.tasks);
  m.task_count = ds.tasks.size();
  m.record_bytes = record_bytes(m.image_side);
  m.payload_file = payload_path(base).filename().string();
  m.payload_digest = hex64(fnv1a64(payload));
  write_bytes(payload_path(base), payload);
  const std::string text = manifest_to_json(m);
  write_bytes(manifest_path(base), std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  return m;
}

Dataset read_dataset(const std::filesystem::path& base) {
  const auto mbytes = read_bytes(manifest_path(base));
  Dataset ds;
  ds.manifest = manifest_from_json(std::string(mbytes.begin(), mbytes.end()));
  const auto payload = read_bytes(manifest_path(base).parent_path() / ds.manifest.payload_file);
  if (payload.size() != ds.manifest.task_count * ds.manifest.record_bytes ||
      ds.manifest.record_bytes != record_bytes(ds.manifest.image_side)) {
    throw DatasetError("payload holds " + std::to_string(payload.size()) + " bytes but the manifest declares " +
                       std::to_string(ds.manifest.task_count) + " records of " +
                       std::to_string(ds.manifest.record_bytes) + " bytes");
  }
  if (hex64(fnv1a64(payload)) != ds.manifest.payload_digest) {
    throw DatasetError("payload digest does not match the manifest");
  }
  ds.tasks = decode_payload(payload, ds.manifest.image_side);
  return ds;
}

DatasetManifest build_dataset(const GenerationConfig& cfg, const std::filesystem::path& base) {
  const ImageCollection source = load_source(cfg.source);
  return write_dataset(generate_dataset(cfg, source), base);
}

}  // namespace fine
