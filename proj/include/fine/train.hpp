#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fine/model.hpp"
#include "fine/task.hpp"

namespace fine {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size_train = 32;
  std::size_t batch_size_eval = 100;
  double lr = 3e-4;
  double clip_threshold = 10.0;
  std::uint64_t seed = 0;
  // Save <checkpoint_base>.epochN every this many epochs; 0 disables.
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_base;
};

void validate(const TrainConfig& cfg);

struct EpochStats {
  std::size_t epoch = 0;
  double loss_mean = 0.0;
  double train_accuracy = 0.0;
  double grad_norm_mean = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  std::uint64_t steps = 0;
};

class DivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Per batch: forward every task, mean cross-entropy, backward, clip, Adam.
TrainResult train(FineModel& model, std::span<const IQTask> tasks, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

struct FamilyAccuracy {
  Family family = Family::translation;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;

  bool operator==(const FamilyAccuracy&) const = default;
};

struct EvalReport {
  double accuracy = 0.0;
  std::size_t count = 0;
  std::size_t correct = 0;
  double loss_mean = 0.0;
  std::vector<FamilyAccuracy> per_family;  // families present, in id order
  std::uint64_t seed = 0;
  std::string dataset_digest;

  bool operator==(const EvalReport&) const = default;
  std::string to_csv() const;
};

struct EvalOptions {
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
  std::string dataset_digest;
};

EvalReport evaluate(const FineModel& model, std::span<const IQTask> tasks, const EvalOptions& opts = {});

// Predicted choice per task, in order.
std::vector<std::size_t> predict(const FineModel& model, std::span<const IQTask> tasks,
                                 std::size_t batch_size = 100);

inline constexpr std::uint32_t kPhiMagic = 0x49485046;  // "FPHI" little-endian
inline constexpr std::uint32_t kPhiFormatVersion = 1;

struct PhiRow {
  Family family = Family::translation;
  std::array<float, 6> params{};
  std::vector<float> phi;
};

// File: "FPHI", u32 version, u32 rows, u32 phi length, then per row
// u8 family id, 6 float32 params, phi as float32; all little-endian.
std::vector<PhiRow> compute_phi(const FineModel& model, std::span<const IQTask> tasks, std::size_t batch_size = 100);
std::vector<PhiRow> export_phi(const FineModel& model, std::span<const IQTask> tasks,
                               const std::filesystem::path& out_path);
std::vector<PhiRow> read_phi(const std::filesystem::path& path);

struct AblationGrid {
  std::vector<std::size_t> memory_counts{16};
  std::vector<std::size_t> layer_counts{4};
  std::vector<std::size_t> train_sizes;  // empty: the whole training set
  std::size_t repeats = 3;
};

struct AblationCell {
  std::size_t memory_count = 0;
  std::size_t layer_count = 0;
  std::size_t train_size = 0;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double train_accuracy = 0.0;
};

struct AblationResult {
  std::vector<AblationCell> cells;  // grid order, repeats innermost

  // Mean and population std of test accuracy over repeats of one grid point.
  std::pair<double, double> cell_stats(std::size_t memory_count, std::size_t layer_count,
                                       std::size_t train_size) const;
  std::string to_csv() const;
};

// One model per (memory count, layer count, train size, repeat). Repeat r
// seeds both model init and shuffling with hash64(base seed, r), so every
// grid point sees the same seeds. A layer count of 0 selects the 2-layer MLP
// backbone.
AblationResult run_ablation(const AblationGrid& grid, const ModelConfig& base_model,
                            const TrainConfig& base_train, std::span<const IQTask> train_tasks,
                            std::span<const IQTask> test_tasks);

std::string loss_curve_csv(const TrainResult& result);

}  // namespace fine
