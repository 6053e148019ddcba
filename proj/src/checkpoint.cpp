#include "fine/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "fine/dataset.hpp"
#include "json.hpp"

namespace fine {

using nlohmann::json;

namespace {

json config_json(const ModelConfig& c) {
  return {{"image_side", c.image_side},   {"embed_dim", c.embed_dim},
          {"memory_count", c.memory_count}, {"backbone", backbone_name(c.backbone)},
          {"layer_count", c.layer_count}, {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.image_side = j.at("image_side").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.memory_count = j.at("memory_count").get<std::size_t>();
  c.backbone = parse_backbone(j.at("backbone").get<std::string>());
  c.layer_count = j.at("layer_count").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json read_manifest(const std::filesystem::path& base) {
  std::ifstream in(manifest_path(base));
  if (!in) throw CheckpointError("cannot open checkpoint manifest '" + manifest_path(base).string() + "'");
  try {
    json j = json::parse(in);
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw CheckpointError("unsupported checkpoint format_version");
    }
    return j;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const FineModel& model, const std::filesystem::path& base) {
  const auto params = model.parameters();
  std::vector<unsigned char> blob;
  json tensors = json::array();
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", blob.size()}});
    for (double v : p.tensor.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int k = 0; k < 8; ++k) blob.push_back(static_cast<unsigned char>(bits >> (8 * k)));
    }
  }
  json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["model"] = config_json(model.config());
  j["tensors"] = tensors;
  j["blob"] = {{"file", payload_path(base).filename().string()},
               {"bytes", blob.size()},
               {"dtype", "float64le"},
               {"fnv1a64", hex64(fnv1a64(blob))}};

  std::ofstream bin(payload_path(base), std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  std::ofstream man(manifest_path(base), std::ios::trunc);
  man << j.dump(2) << '\n';
  if (!bin || !man) throw CheckpointError("failed to write checkpoint '" + base.string() + "'");
}

ModelConfig read_checkpoint_config(const std::filesystem::path& base) {
  try {
    return config_from(read_manifest(base).at("model"));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

FineModel load_checkpoint(const std::filesystem::path& base) {
  const json j = read_manifest(base);
  FineModel model = [&] {
    try {
      return FineModel(config_from(j.at("model")));
    } catch (const json::exception& e) {
      throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
    }
  }();
  const auto blob_path = manifest_path(base).parent_path() / j.at("blob").at("file").get<std::string>();
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint blob '" + blob_path.string() + "'");
  const std::vector<unsigned char> blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (blob.size() != j.at("blob").at("bytes").get<std::size_t>()) {
    throw CheckpointError("checkpoint blob size differs from the manifest");
  }

  auto params = model.parameters();
  const auto& tensors = j.at("tensors");
  if (tensors.size() != params.size()) {
    throw CheckpointShapeError("checkpoint declares " + std::to_string(tensors.size()) + " tensors, model has " +
                               std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& t = tensors[k];
    const std::string name = t.at("name").get<std::string>();
    const Shape shape = t.at("shape").get<Shape>();
    if (name != params[k].name) {
      throw CheckpointShapeError("checkpoint tensor " + std::to_string(k) + " is '" + name + "', expected '" +
                                 params[k].name + "'");
    }
    if (shape != params[k].tensor.shape()) {
      throw CheckpointShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                                 ", model expects " + shape_str(params[k].tensor.shape()));
    }
    const std::size_t offset = t.at("offset").get<std::size_t>();
    auto dst = params[k].tensor.mutable_data();
    if (offset + dst.size() * 8 > blob.size()) throw CheckpointError("checkpoint tensor '" + name + "' overruns the blob");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t{blob[offset + i * 8 + static_cast<std::size_t>(b)]} << (8 * b);
      dst[i] = std::bit_cast<double>(bits);
    }
  }
  return model;
}

}  // namespace fine
