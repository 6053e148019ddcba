#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fine/checkpoint.hpp"
#include "fine/dataset.hpp"
#include "fine/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fine;

namespace {

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kDiverged = 4, kShape = 5 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options of one subcommand, each also settable from the config file under
// the same name. A value given on the command line always wins.
class Section {
 public:
  explicit Section(CLI::App* app) : app_(app) {
    add("config", config_, "JSON config file; keys are this command's flag names");
    add("seed", seed_, "Seed for all randomness");
  }

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    auto* opt = app_->add_option("--" + name, var, desc)->capture_default_str();
    setters_[name] = [opt, &var, name](const json& v) {
      if (opt->count() > 0) return;
      try {
        var = v.get<T>();
      } catch (const json::exception&) {
        throw ConfigError("config key '" + name + "' has the wrong type");
      }
    };
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    auto* opt = app_->add_flag("--" + name, var, desc)->capture_default_str();
    setters_[name] = [opt, &var, name](const json& v) {
      if (opt->count() > 0) return;
      if (!v.is_boolean()) throw ConfigError("config key '" + name + "' must be a boolean");
      var = v.get<bool>();
    };
    return opt;
  }

  // Applies the config file, if any. Top-level keys and keys inside an
  // object named after this command are accepted; anything else is an error.
  void apply_config(const std::vector<std::string>& command_names) {
    if (config_.empty()) return;
    std::ifstream in(config_);
    if (!in) throw IoError("cannot open config file '" + config_ + "' (field 'config')");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + config_ + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    json merged = json::object();
    for (const auto& [k, v] : j.items()) {
      const bool is_section = std::find(command_names.begin(), command_names.end(), k) != command_names.end();
      if (is_section) continue;
      merged[k] = v;
    }
    if (j.contains(app_->get_name())) {
      if (!j[app_->get_name()].is_object()) throw ConfigError("config section '" + app_->get_name() + "' must be an object");
      for (const auto& [k, v] : j[app_->get_name()].items()) merged[k] = v;
    }
    for (const auto& [k, v] : merged.items()) {
      if (k == "config") throw ConfigError("config key 'config' is not allowed inside a config file");
      auto it = setters_.find(k);
      if (it == setters_.end()) throw ConfigError("unknown config key '" + k + "' for '" + app_->get_name() + "'");
      it->second(v);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  CLI::App* app_;
  std::map<std::string, std::function<void(const json&)>> setters_;
  std::string config_;
  std::uint64_t seed_ = 0;
};

void require(const std::string& value, const std::string& field) {
  if (value.empty()) throw ConfigError("missing required field '" + field + "'");
}

void require_file(const fs::path& p, const std::string& field) {
  if (!fs::is_regular_file(p)) throw IoError("field '" + field + "': file '" + p.string() + "' does not exist");
}

void require_parent(const fs::path& p, const std::string& field) {
  const auto parent = fs::absolute(p).parent_path();
  if (!fs::is_directory(parent)) {
    throw IoError("field '" + field + "': directory '" + parent.string() + "' does not exist");
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write '" + p.string() + "'");
}

Dataset load_dataset(const std::string& base, const std::string& field) {
  require(base, field);
  require_file(manifest_path(base), field);
  return read_dataset(base);
}

ModelConfig model_from_flags(std::size_t side, std::size_t embed_dim, std::size_t memories, std::size_t layers,
                             const std::string& backbone, const std::string& ablate, std::uint64_t seed) {
  ModelConfig mc;
  mc.image_side = side;
  mc.embed_dim = embed_dim;
  mc.memory_count = memories;
  mc.layer_count = layers;
  try {
    mc.backbone = parse_backbone(backbone);
  } catch (const std::exception&) {
    throw ConfigError("field 'backbone' must be 'mlp' or 'nice', got '" + backbone + "'");
  }
  if (ablate == "query-as-weights") {
    mc.memory_count = 0;
  } else if (!ablate.empty()) {
    throw ConfigError("field 'ablate' accepts only 'query-as-weights', got '" + ablate + "'");
  }
  mc.seed = seed;
  return mc;
}

struct GenerateArgs {
  std::vector<std::string> families{"translation"};
  std::string mode = "grid";
  std::string constraint;
  std::size_t count = 100;
  std::string out;
  std::string split = "train";
  std::string source = "glyphs";
  std::string idx_images, idx_labels;
  std::size_t glyph_classes = 20, glyph_per_class = 10, image_side = 16;
  std::uint64_t glyph_seed = 1;
  std::vector<std::uint16_t> train_classes, test_classes;
  bool same_class_probe = false;
};

int run_generate(const GenerateArgs& a, std::uint64_t seed) {
  require(a.out, "out");
  GenerationConfig g;
  g.families.clear();
  for (const auto& f : a.families) {
    try {
      g.families.push_back(parse_family(f));
    } catch (const std::exception&) {
      throw ConfigError("field 'family': unknown family '" + f + "'");
    }
  }
  if (g.families.empty()) throw ConfigError("field 'family' must list at least one family");
  if (a.mode == "grid") {
    g.mode = SampleMode::grid;
  } else if (a.mode == "constrained") {
    g.mode = SampleMode::constrained;
  } else {
    throw ConfigError("field 'mode' must be 'grid' or 'constrained'");
  }
  if (!a.constraint.empty()) {
    if (a.constraint != "train" && a.constraint != "test") throw ConfigError("field 'constraint' must be 'train' or 'test'");
    g.mode = SampleMode::constrained;
    g.ood_side = a.constraint == "train" ? OodSide::train : OodSide::test;
  } else if (g.mode == SampleMode::constrained) {
    throw ConfigError("field 'constraint' is required in constrained mode");
  }
  if (a.split != "train" && a.split != "test") throw ConfigError("field 'split' must be 'train' or 'test'");
  g.split = a.split == "train" ? SplitSide::train : SplitSide::test;
  if (a.count == 0) throw ConfigError("field 'count' must be positive");
  g.task_count = a.count;
  g.seed = seed;
  g.train_classes = a.train_classes;
  g.test_classes = a.test_classes;
  g.same_class_probe = a.same_class_probe;
  if (a.source == "glyphs") {
    g.source.kind = SourceKind::procedural_glyph;
    g.source.class_count = a.glyph_classes;
    g.source.per_class = a.glyph_per_class;
    g.source.image_side = a.image_side;
    g.source.glyph_seed = a.glyph_seed;
  } else if (a.source == "mnist") {
    require(a.idx_images, "idx-images");
    require(a.idx_labels, "idx-labels");
    require_file(a.idx_images, "idx-images");
    require_file(a.idx_labels, "idx-labels");
    g.source.kind = SourceKind::mnist_idx;
    g.source.idx_images = a.idx_images;
    g.source.idx_labels = a.idx_labels;
  } else {
    throw ConfigError("field 'source' must be 'glyphs' or 'mnist'");
  }
  require_parent(a.out, "out");
  const auto m = build_dataset(g, a.out);
  std::printf("dataset %s: %zu tasks, side %zu, split %s, mode %s, digest %s\n", manifest_path(a.out).c_str(),
              m.task_count, m.image_side, m.split.c_str(), m.mode.c_str(), m.payload_digest.c_str());
  std::string fams;
  for (auto f : m.families) fams += std::string(fams.empty() ? "" : ",") + std::string(family_name(f));
  std::printf("families %s\n", fams.c_str());
  return kOk;
}

struct ModelArgs {
  std::size_t embed_dim = 32, memories = 16, layers = 4;
  std::string backbone = "nice", ablate;
};

struct TrainArgs {
  std::string data, out, curve;
  std::size_t epochs = 50, batch = 32, checkpoint_every = 0;
  double lr = 3e-4, clip = 10.0;
  ModelArgs model;
};

void add_model_flags(Section& s, ModelArgs& m) {
  s.add("embed-dim", m.embed_dim, "Embedding width d");
  s.add("memories", m.memories, "Entries per functional memory (0 = query-as-weights)");
  s.add("layers", m.layers, "Backbone layer count");
  s.add("backbone", m.backbone, "Backbone: nice or mlp");
  s.add("ablate", m.ablate, "Ablation: query-as-weights");
}

TrainConfig train_config(std::size_t epochs, std::size_t batch, double lr, double clip, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size_train = batch;
  tc.lr = lr;
  tc.clip_threshold = clip;
  tc.seed = seed;
  try {
    validate(tc);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return tc;
}

int run_train(const TrainArgs& a, std::uint64_t seed) {
  require(a.out, "out");
  const auto ds = load_dataset(a.data, "data");
  require_parent(a.out, "out");
  const std::string curve = a.curve.empty() ? a.out + ".loss.csv" : a.curve;
  require_parent(curve, "curve");
  TrainConfig tc = train_config(a.epochs, a.batch, a.lr, a.clip, seed);
  tc.checkpoint_every = a.checkpoint_every;
  tc.checkpoint_base = a.out;
  const ModelConfig mc = model_from_flags(ds.manifest.image_side, a.model.embed_dim, a.model.memories, a.model.layers,
                                          a.model.backbone, a.model.ablate, seed);
  FineModel model = [&] {
    try {
      return FineModel(mc);
    } catch (const ModelConfigError& e) {
      throw ConfigError(e.what());
    }
  }();
  const auto result = train(model, ds.tasks, tc, [](const EpochStats& e) {
    std::printf("epoch %zu loss %.6f train_accuracy %.4f grad_norm %.4f\n", e.epoch, e.loss_mean, e.train_accuracy,
                e.grad_norm_mean);
    std::fflush(stdout);
  });
  save_checkpoint(model, a.out);
  write_text(curve, loss_curve_csv(result));
  if (result.curve.empty()) {
    std::printf("done: 0 epochs, checkpoint %s holds the initialization\n", manifest_path(a.out).c_str());
  } else {
    const auto& last = result.curve.back();
    std::printf("done: %zu epochs, final loss %.6f, final train accuracy %.4f, checkpoint %s\n", last.epoch,
                last.loss_mean, last.train_accuracy, manifest_path(a.out).c_str());
  }
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data, out;
  std::size_t batch = 100;
};

FineModel load_model(const std::string& base) {
  require(base, "checkpoint");
  require_file(manifest_path(base), "checkpoint");
  return load_checkpoint(base);
}

int run_eval(const EvalArgs& a, std::uint64_t seed) {
  const FineModel model = load_model(a.checkpoint);
  const auto ds = load_dataset(a.data, "data");
  if (!a.out.empty()) require_parent(a.out, "out");
  if (a.batch == 0) throw ConfigError("field 'batch' must be positive");
  const auto report = evaluate(model, ds.tasks, {a.batch, seed, ds.manifest.payload_digest});
  const auto csv = report.to_csv();
  if (!a.out.empty()) write_text(a.out, csv);
  std::fputs(csv.c_str(), stdout);
  std::printf("accuracy %.4f (%zu/%zu)\n", report.accuracy, report.correct, report.count);
  return kOk;
}

struct AblateArgs {
  std::string train_data, test_data, out;
  std::vector<std::size_t> memories{16}, layers{4}, sizes;
  std::size_t repeats = 3, epochs = 50, batch = 32, embed_dim = 32;
  double lr = 3e-4, clip = 10.0;
  std::string backbone = "nice";
};

int run_ablate(const AblateArgs& a, std::uint64_t seed) {
  require(a.out, "out");
  const auto tr = load_dataset(a.train_data, "train-data");
  const auto te = load_dataset(a.test_data, "test-data");
  require_parent(a.out, "out");
  if (a.memories.empty() || a.layers.empty() || a.repeats == 0) throw ConfigError("ablation grid is empty");
  AblationGrid grid{a.memories, a.layers, a.sizes, a.repeats};
  const ModelConfig mc = model_from_flags(tr.manifest.image_side, a.embed_dim, 16, 4, a.backbone, "", seed);
  const TrainConfig tc = train_config(a.epochs, a.batch, a.lr, a.clip, seed);
  const auto result = run_ablation(grid, mc, tc, tr.tasks, te.tasks);
  write_text(a.out, result.to_csv());
  std::fputs(result.to_csv().c_str(), stdout);
  return kOk;
}

struct PhiArgs {
  std::string checkpoint, data, out;
};

int run_dump_phi(const PhiArgs& a) {
  require(a.out, "out");
  const FineModel model = load_model(a.checkpoint);
  const auto ds = load_dataset(a.data, "data");
  require_parent(a.out, "out");
  if (ds.manifest.image_side != model.config().image_side) {
    throw ShapeError("dataset image side " + std::to_string(ds.manifest.image_side) + " does not match the model's " +
                     std::to_string(model.config().image_side));
  }
  const auto rows = export_phi(model, ds.tasks, a.out);
  std::printf("wrote %zu rows of length %zu to %s\n", rows.size(), model.phi_length(), a.out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function composition over functional memories for visual IQ tasks"};
  app.require_subcommand(1);
  const std::vector<std::string> names{"generate", "train", "eval", "ablate", "dump-phi"};

  GenerateArgs gen;
  auto* gen_app = app.add_subcommand("generate", "Generate an IQ task dataset");
  Section gen_s(gen_app);
  gen_s.add("family", gen.families, "Transformation families (repeatable)");
  gen_s.add("mode", gen.mode, "Parameter sampling: grid or constrained");
  gen_s.add("constraint", gen.constraint, "Constrained side: train or test (implies constrained mode)");
  gen_s.add("count", gen.count, "Number of tasks");
  gen_s.add("out", gen.out, "Output base path; writes <out>.json and <out>.bin");
  gen_s.add("split", gen.split, "Class split to draw from: train or test");
  gen_s.add("source", gen.source, "Image source: glyphs or mnist");
  gen_s.add("idx-images", gen.idx_images, "IDX image file (mnist source)");
  gen_s.add("idx-labels", gen.idx_labels, "IDX label file (mnist source)");
  gen_s.add("glyph-classes", gen.glyph_classes, "Glyph class count");
  gen_s.add("glyph-per-class", gen.glyph_per_class, "Glyph instances per class");
  gen_s.add("image-side", gen.image_side, "Glyph image side in pixels");
  gen_s.add("glyph-seed", gen.glyph_seed, "Seed of the glyph alphabet");
  gen_s.add("train-classes", gen.train_classes, "Training class ids (default: first half)");
  gen_s.add("test-classes", gen.test_classes, "Test class ids (default: second half)");
  gen_s.flag("same-class-probe", gen.same_class_probe, "Draw the probe from the hint's class");

  TrainArgs tr;
  auto* tr_app = app.add_subcommand("train", "Train a model on a dataset");
  Section tr_s(tr_app);
  tr_s.add("data", tr.data, "Dataset base path");
  tr_s.add("out", tr.out, "Checkpoint base path");
  tr_s.add("curve", tr.curve, "Loss curve CSV (default: <out>.loss.csv)");
  tr_s.add("epochs", tr.epochs, "Training epochs");
  tr_s.add("batch", tr.batch, "Batch size");
  tr_s.add("lr", tr.lr, "Adam learning rate");
  tr_s.add("clip", tr.clip, "Global gradient-norm clip threshold");
  tr_s.add("checkpoint-every", tr.checkpoint_every, "Save <out>.epochN every N epochs (0: off)");
  add_model_flags(tr_s, tr.model);

  EvalArgs ev;
  auto* ev_app = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  Section ev_s(ev_app);
  ev_s.add("checkpoint", ev.checkpoint, "Checkpoint base path");
  ev_s.add("data", ev.data, "Dataset base path");
  ev_s.add("out", ev.out, "Report CSV path (always also printed)");
  ev_s.add("batch", ev.batch, "Evaluation batch size");

  AblateArgs ab;
  auto* ab_app = app.add_subcommand("ablate", "Train and evaluate over a grid of model sizes");
  Section ab_s(ab_app);
  ab_s.add("train-data", ab.train_data, "Training dataset base path");
  ab_s.add("test-data", ab.test_data, "Test dataset base path");
  ab_s.add("out", ab.out, "Result CSV path");
  ab_s.add("memories", ab.memories, "Memory counts to try");
  ab_s.add("layers", ab.layers, "Layer counts to try (0: 2-layer MLP)");
  ab_s.add("sizes", ab.sizes, "Training set sizes (default: all)");
  ab_s.add("repeats", ab.repeats, "Repeats per grid point");
  ab_s.add("epochs", ab.epochs, "Training epochs");
  ab_s.add("batch", ab.batch, "Batch size");
  ab_s.add("lr", ab.lr, "Adam learning rate");
  ab_s.add("clip", ab.clip, "Global gradient-norm clip threshold");
  ab_s.add("embed-dim", ab.embed_dim, "Embedding width d");
  ab_s.add("backbone", ab.backbone, "Backbone: nice or mlp");

  PhiArgs ph;
  auto* ph_app = app.add_subcommand("dump-phi", "Export composed backbone weights per task");
  Section ph_s(ph_app);
  ph_s.add("checkpoint", ph.checkpoint, "Checkpoint base path");
  ph_s.add("data", ph.data, "Dataset base path");
  ph_s.add("out", ph.out, "Output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (gen_app->parsed()) {
      gen_s.apply_config(names);
      return run_generate(gen, gen_s.seed());
    }
    if (tr_app->parsed()) {
      tr_s.apply_config(names);
      return run_train(tr, tr_s.seed());
    }
    if (ev_app->parsed()) {
      ev_s.apply_config(names);
      return run_eval(ev, ev_s.seed());
    }
    if (ab_app->parsed()) {
      ab_s.apply_config(names);
      return run_ablate(ab, ab_s.seed());
    }
    if (ph_app->parsed()) {
      ph_s.apply_config(names);
      return run_dump_phi(ph);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const DivergedError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const CheckpointShapeError& e) {
    std::fprintf(stderr, "shape mismatch: %s\n", e.what());
    return kShape;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape mismatch: %s\n", e.what());
    return kShape;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const DatasetIoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const IdxError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const DatasetError& e) {
    std::fprintf(stderr, "dataset error: %s\n", e.what());
    return kIo;
  } catch (const TaskError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kOk;
}
