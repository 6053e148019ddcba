#include "fine/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "fine/checkpoint.hpp"
#include "fine/optim.hpp"
#include "fine/rng.hpp"

namespace fine {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<const IQTask*> slice(std::span<const IQTask> tasks, std::span<const std::size_t> order,
                                 std::size_t begin, std::size_t end) {
  std::vector<const IQTask*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&tasks[order[i]]);
  return out;
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  out.write(b, 4);
}

void put_f32(std::ofstream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("phi file is truncated");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size_train < 1 || cfg.batch_size_eval < 1) {
    throw std::invalid_argument("batch sizes must be at least 1");
  }
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(cfg.clip_threshold > 0.0)) throw std::invalid_argument("clip threshold must be positive");
}

TrainResult train(FineModel& model, std::span<const IQTask> tasks, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  validate(cfg);
  if (tasks.empty()) throw std::invalid_argument("train: empty dataset");
  if (tasks[0].side() != model.config().image_side) {
    throw ShapeError("train: dataset image side " + std::to_string(tasks[0].side()) +
                     " does not match the model's " + std::to_string(model.config().image_side));
  }
  auto params = model.parameters();
  AdamState adam;
  adam.lr = cfg.lr;
  TrainResult result;
  std::vector<std::size_t> order(tasks.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(hash64(cfg.seed, epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0, norm_sum = 0.0;
    std::size_t correct = 0, batches = 0;
    for (std::size_t begin = 0; begin < tasks.size(); begin += cfg.batch_size_train) {
      const std::size_t end = std::min(tasks.size(), begin + cfg.batch_size_train);
      const auto batch = slice(tasks, order, begin, end);
      Tensor loss;
      try {
        const auto fwd = model.forward(batch);
        std::vector<Tensor> losses;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          losses.push_back(choice_loss(fwd[i].log_probs, batch[i]->answer_index));
          const auto lp = fwd[i].log_probs.data();
          if (argmax_lowest(lp) == batch[i]->answer_index) ++correct;
        }
        loss = mean(concat(losses));
        for (auto& p : params) p.tensor.mutable_grad();
        backward(loss);
      } catch (const NumericError& e) {
        throw DivergedError(std::string("training diverged at epoch ") + std::to_string(epoch + 1) + ": " +
                            e.what());
      }
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw DivergedError("training diverged: non-finite loss");
      loss_sum += lv * static_cast<double>(batch.size());
      norm_sum += clip_global_norm(params, cfg.clip_threshold);
      adam_step(params, adam);
      ++batches;
      ++result.steps;
    }
    EpochStats st;
    st.epoch = epoch + 1;
    st.loss_mean = loss_sum / static_cast<double>(tasks.size());
    st.train_accuracy = static_cast<double>(correct) / static_cast<double>(tasks.size());
    st.grad_norm_mean = norm_sum / static_cast<double>(batches);
    result.curve.push_back(st);
    if (on_epoch) on_epoch(st);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_base.empty() && (epoch + 1) % cfg.checkpoint_every == 0) {
      auto path = cfg.checkpoint_base;
      path += ".epoch" + std::to_string(epoch + 1);
      save_checkpoint(model, path);
    }
  }
  return result;
}

std::vector<std::size_t> predict(const FineModel& model, std::span<const IQTask> tasks, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<std::size_t> out;
  for (std::size_t begin = 0; begin < tasks.size(); begin += batch_size) {
    const std::size_t end = std::min(tasks.size(), begin + batch_size);
    std::vector<const IQTask*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&tasks[i]);
    for (const auto& f : model.forward(batch)) out.push_back(argmax_lowest(f.log_probs.data()));
  }
  return out;
}

EvalReport evaluate(const FineModel& model, std::span<const IQTask> tasks, const EvalOptions& opts) {
  if (tasks.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (opts.batch_size < 1) throw std::invalid_argument("evaluate: batch size must be at least 1");
  if (tasks[0].side() != model.config().image_side) {
    throw ShapeError("evaluate: dataset image side " + std::to_string(tasks[0].side()) +
                     " does not match the model's " + std::to_string(model.config().image_side));
  }
  NoGradGuard no_grad;
  std::map<Family, FamilyAccuracy> fam;
  double loss_sum = 0.0;
  EvalReport r;
  for (std::size_t begin = 0; begin < tasks.size(); begin += opts.batch_size) {
    const std::size_t end = std::min(tasks.size(), begin + opts.batch_size);
    std::vector<const IQTask*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&tasks[i]);
    const auto fwd = model.forward(batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto lp = fwd[i].log_probs.data();
      const bool ok = argmax_lowest(lp) == batch[i]->answer_index;
      loss_sum += -lp[batch[i]->answer_index];
      auto& f = fam[batch[i]->rule.family()];
      f.family = batch[i]->rule.family();
      f.count += 1;
      f.correct += ok ? 1 : 0;
      r.correct += ok ? 1 : 0;
    }
  }
  r.count = tasks.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
  r.loss_mean = loss_sum / static_cast<double>(r.count);
  for (auto& [family, f] : fam) {
    f.accuracy = static_cast<double>(f.correct) / static_cast<double>(f.count);
    r.per_family.push_back(f);
  }
  r.seed = opts.seed;
  r.dataset_digest = opts.dataset_digest;
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "scope,count,correct,accuracy,loss_mean,seed,dataset_digest\n";
  os << "overall," << count << ',' << correct << ',' << fmt("%.6f", accuracy) << ','
     << fmt("%.6f", loss_mean) << ',' << seed << ',' << dataset_digest << '\n';
  for (const auto& f : per_family) {
    os << family_name(f.family) << ',' << f.count << ',' << f.correct << ',' << fmt("%.6f", f.accuracy)
       << ",,," << '\n';
  }
  return os.str();
}

std::vector<PhiRow> compute_phi(const FineModel& model, std::span<const IQTask> tasks, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<PhiRow> rows;
  for (std::size_t begin = 0; begin < tasks.size(); begin += batch_size) {
    const std::size_t end = std::min(tasks.size(), begin + batch_size);
    std::vector<const IQTask*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&tasks[i]);
    const auto fwd = model.forward(batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      PhiRow row;
      row.family = batch[i]->rule.family();
      row.params = batch[i]->rule.packed();
      for (double v : flatten_phi(fwd[i].composed)) row.phi.push_back(static_cast<float>(v));
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<PhiRow> export_phi(const FineModel& model, std::span<const IQTask> tasks,
                               const std::filesystem::path& out_path) {
  auto rows = compute_phi(model, tasks);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + out_path.string() + "'");
  put_u32(out, kPhiMagic);
  put_u32(out, kPhiFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(rows.size()));
  put_u32(out, static_cast<std::uint32_t>(model.phi_length()));
  for (const auto& r : rows) {
    out.put(static_cast<char>(r.family));
    for (float f : r.params) put_f32(out, f);
    for (float f : r.phi) put_f32(out, f);
  }
  if (!out) throw std::runtime_error("write failed for '" + out_path.string() + "'");
  return rows;
}

std::vector<PhiRow> read_phi(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  if (get_u32(in) != kPhiMagic) throw std::runtime_error("not a phi export file");
  if (get_u32(in) != kPhiFormatVersion) throw std::runtime_error("unsupported phi format version");
  const std::uint32_t n = get_u32(in);
  const std::uint32_t len = get_u32(in);
  std::vector<PhiRow> rows(n);
  for (auto& r : rows) {
    const int fam = in.get();
    if (fam < 0 || fam >= static_cast<int>(kFamilyCount)) throw std::runtime_error("phi row has a bad family id");
    r.family = static_cast<Family>(fam);
    for (auto& p : r.params) p = std::bit_cast<float>(get_u32(in));
    r.phi.resize(len);
    for (auto& v : r.phi) v = std::bit_cast<float>(get_u32(in));
  }
  return rows;
}

std::pair<double, double> AblationResult::cell_stats(std::size_t memory_count, std::size_t layer_count,
                                                     std::size_t train_size) const {
  std::vector<double> acc;
  for (const auto& c : cells) {
    if (c.memory_count == memory_count && c.layer_count == layer_count && c.train_size == train_size) {
      acc.push_back(c.test_accuracy);
    }
  }
  if (acc.empty()) return {0.0, 0.0};
  const double m = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  double var = 0.0;
  for (double a : acc) var += (a - m) * (a - m);
  return {m, std::sqrt(var / static_cast<double>(acc.size()))};
}

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << "memory_count,layer_count,train_size,repeat,seed,train_accuracy,test_accuracy,cell_mean,cell_std\n";
  for (const auto& c : cells) {
    auto [m, s] = cell_stats(c.memory_count, c.layer_count, c.train_size);
    os << c.memory_count << ',' << c.layer_count << ',' << c.train_size << ',' << c.repeat << ',' << c.seed
       << ',' << fmt("%.6f", c.train_accuracy) << ',' << fmt("%.6f", c.test_accuracy) << ',' << fmt("%.6f", m)
       << ',' << fmt("%.6f", s) << '\n';
  }
  return os.str();
}

AblationResult run_ablation(const AblationGrid& grid, const ModelConfig& base_model,
                            const TrainConfig& base_train, std::span<const IQTask> train_tasks,
                            std::span<const IQTask> test_tasks) {
  if (grid.memory_counts.empty() || grid.layer_counts.empty() || grid.repeats == 0) {
    throw std::invalid_argument("run_ablation: empty grid");
  }
  std::vector<std::size_t> sizes = grid.train_sizes;
  if (sizes.empty()) sizes.push_back(train_tasks.size());
  AblationResult result;
  for (std::size_t s : grid.memory_counts) {
    for (std::size_t layers : grid.layer_counts) {
      for (std::size_t n : sizes) {
        if (n == 0 || n > train_tasks.size()) {
          throw std::invalid_argument("run_ablation: train size " + std::to_string(n) + " outside the training set");
        }
        for (std::size_t r = 0; r < grid.repeats; ++r) {
          ModelConfig mc = base_model;
          mc.memory_count = s;
          if (layers == 0) {
            mc.backbone = BackboneKind::mlp;
            mc.layer_count = 2;
          } else {
            mc.layer_count = layers;
          }
          const std::uint64_t seed = hash64(base_train.seed, r);
          mc.seed = seed;
          TrainConfig tc = base_train;
          tc.seed = seed;
          tc.checkpoint_every = 0;
          FineModel model(mc);
          const auto subset = train_tasks.first(n);
          const auto tr = train(model, subset, tc);
          AblationCell cell;
          cell.memory_count = s;
          cell.layer_count = layers;
          cell.train_size = n;
          cell.repeat = r;
          cell.seed = seed;
          cell.train_accuracy = tr.curve.empty() ? 0.0 : tr.curve.back().train_accuracy;
          cell.test_accuracy = evaluate(model, test_tasks, {tc.batch_size_eval, seed, ""}).accuracy;
          result.cells.push_back(cell);
        }
      }
    }
  }
  return result;
}

std::string loss_curve_csv(const TrainResult& result) {
  std::ostringstream os;
  os << "epoch,loss_mean,train_accuracy,grad_norm_mean\n";
  for (const auto& e : result.curve) {
    os << e.epoch << ',' << fmt("%.8f", e.loss_mean) << ',' << fmt("%.6f", e.train_accuracy) << ','
       << fmt("%.6f", e.grad_norm_mean) << '\n';
  }
  return os.str();
}

}  // namespace fine
