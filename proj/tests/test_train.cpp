#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "fine/checkpoint.hpp"
#include "fine/dataset.hpp"
#include "fine/train.hpp"

using namespace fine;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(std::uint64_t seed = 3) {
  ModelConfig c;
  c.image_side = 8;
  c.embed_dim = 8;
  c.memory_count = 4;
  c.layer_count = 2;
  c.seed = seed;
  return c;
}

std::vector<IQTask> tasks_for(std::size_t n, std::uint64_t seed = 1,
                              std::vector<Family> fams = {Family::reflection, Family::rotation,
                                                          Family::blackwhite}) {
  GenerationConfig g;
  g.source.class_count = 8;
  g.source.per_class = 3;
  g.source.image_side = 8;
  g.families = std::move(fams);
  g.task_count = n;
  g.seed = seed;
  return generate_dataset(g, load_source(g.source)).tasks;
}

std::vector<double> flat_params(const FineModel& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

TrainConfig quick(std::size_t epochs, std::uint64_t seed = 5) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size_train = 8;
  c.lr = 1e-3;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Train, ZeroEpochsLeavesParametersUnchanged) {
  FineModel m(small_model());
  const auto before = flat_params(m);
  const auto tasks = tasks_for(16);
  const auto r = train(m, tasks, quick(0));
  EXPECT_TRUE(r.curve.empty());
  EXPECT_EQ(r.steps, 0u);
  EXPECT_EQ(flat_params(m), before);
}

TEST(Train, InvalidConfigRejected) {
  TrainConfig c = quick(1);
  c.batch_size_train = 0;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = quick(1);
  c.lr = -1;
  EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(Train, OverfitsSingleBatch) {
  FineModel m(small_model());
  const auto tasks = tasks_for(8);
  TrainConfig c = quick(500);  // one batch per epoch, so 500 optimizer steps
  c.lr = 3e-3;
  const auto r = train(m, tasks, c);
  EXPECT_EQ(r.steps, 500u);
  EXPECT_EQ(evaluate(m, tasks).accuracy, 1.0);
}

TEST(Train, InitialLossNearUniform) {
  FineModel m(small_model());
  const auto tasks = tasks_for(200);
  const auto rep = evaluate(m, tasks);
  EXPECT_NEAR(rep.loss_mean, std::log(4.0), 0.3);
}

TEST(Train, AlwaysFirstChoiceIsNearQuarter) {
  const auto tasks = tasks_for(1000, 9);
  std::size_t hits = 0;
  for (const auto& t : tasks) hits += t.answer_index == 0;
  EXPECT_NEAR(hits / 1000.0, 0.25, 0.05);
}

TEST(Train, LossDecreasesAndCurveIsDeterministic) {
  const auto tasks = tasks_for(64);
  FineModel a(small_model()), b(small_model());
  const auto ra = train(a, tasks, quick(6));
  const auto rb = train(b, tasks, quick(6));
  ASSERT_EQ(ra.curve.size(), 6u);
  EXPECT_EQ(ra.steps, 48u);
  EXPECT_LT(ra.curve.back().loss_mean, ra.curve.front().loss_mean);
  EXPECT_EQ(loss_curve_csv(ra), loss_curve_csv(rb));
  EXPECT_EQ(flat_params(a), flat_params(b));
  FineModel c(small_model());
  const auto rc = train(c, tasks, quick(6, 77));
  EXPECT_NE(loss_curve_csv(ra), loss_curve_csv(rc));
}

TEST(Train, CheckpointsEveryNEpochs) {
  const auto dir = fs::temp_directory_path() / "fine_train_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  FineModel m(small_model());
  TrainConfig c = quick(4);
  c.checkpoint_every = 2;
  c.checkpoint_base = dir / "run";
  train(m, tasks_for(16), c);
  EXPECT_TRUE(fs::exists(dir / "run.epoch2.json"));
  EXPECT_TRUE(fs::exists(dir / "run.epoch4.bin"));
  EXPECT_FALSE(fs::exists(dir / "run.epoch3.json"));
  EXPECT_EQ(flat_params(load_checkpoint(dir / "run.epoch4")), flat_params(m));
}

TEST(Eval, RepeatableAndPerFamilyCountsAddUp) {
  FineModel m(small_model());
  const auto tasks = tasks_for(150);
  EvalOptions o;
  o.batch_size = 7;
  o.seed = 11;
  o.dataset_digest = "abc";
  const auto r1 = evaluate(m, tasks, o);
  const auto r2 = evaluate(m, tasks, o);
  EXPECT_EQ(r1, r2);
  EXPECT_EQ(r1.to_csv(), r2.to_csv());
  std::size_t n = 0, c = 0;
  for (std::size_t i = 0; i < r1.per_family.size(); ++i) {
    n += r1.per_family[i].count;
    c += r1.per_family[i].correct;
    if (i > 0) {
      EXPECT_LT(r1.per_family[i - 1].family, r1.per_family[i].family);
    }
  }
  EXPECT_EQ(n, 150u);
  EXPECT_EQ(c, r1.correct);
  EXPECT_DOUBLE_EQ(r1.accuracy, static_cast<double>(r1.correct) / 150.0);
  // Batch size does not change the outcome.
  o.batch_size = 150;
  EXPECT_EQ(evaluate(m, tasks, o).correct, r1.correct);
}

TEST(Eval, PredictionsMatchReport) {
  FineModel m(small_model());
  const auto tasks = tasks_for(40);
  const auto pred = predict(m, tasks, 9);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) correct += pred[i] == tasks[i].answer_index;
  EXPECT_EQ(evaluate(m, tasks).correct, correct);
}

TEST(Eval, CsvLayout) {
  FineModel m(small_model());
  EvalOptions o;
  o.seed = 2;
  o.dataset_digest = "00ff";
  const auto csv = evaluate(m, tasks_for(20), o).to_csv();
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "scope,count,correct,accuracy,loss_mean,seed,dataset_digest");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("overall,20,", 0), 0u);
  EXPECT_NE(line.find(",2,00ff"), std::string::npos);
}

TEST(Eval, ImageSideMismatchIsShapeError) {
  FineModel m(small_model());
  GenerationConfig g;
  g.source.class_count = 4;
  g.source.per_class = 2;
  g.source.image_side = 12;
  g.families = {Family::reflection};
  g.task_count = 3;
  const auto tasks = generate_dataset(g, load_source(g.source)).tasks;
  EXPECT_THROW(evaluate(m, tasks), ShapeError);
}

TEST(Eval, CheckpointRoundTripGivesIdenticalReport) {
  const auto dir = fs::temp_directory_path() / "fine_eval_ckpt";
  fs::create_directories(dir);
  FineModel m(small_model());
  const auto tasks = tasks_for(32);
  train(m, tasks, quick(2));
  save_checkpoint(m, dir / "m");
  const auto back = load_checkpoint(dir / "m");
  EXPECT_EQ(evaluate(m, tasks), evaluate(back, tasks));
}

TEST(Phi, ExportShapeAndDeterminism) {
  const auto dir = fs::temp_directory_path() / "fine_phi";
  fs::create_directories(dir);
  FineModel m(small_model());
  auto tasks = tasks_for(12);
  tasks[5] = tasks[2];  // same hint pair twice
  const auto rows = export_phi(m, tasks, dir / "phi.bin");
  ASSERT_EQ(rows.size(), 12u);
  for (const auto& r : rows) EXPECT_EQ(r.phi.size(), m.phi_length());
  EXPECT_EQ(rows[5].phi, rows[2].phi);
  EXPECT_NE(rows[1].phi, rows[2].phi);
  EXPECT_EQ(rows[3].family, tasks[3].rule.family());
  const auto back = read_phi(dir / "phi.bin");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].phi, rows[i].phi);
    EXPECT_EQ(back[i].params, rows[i].params);
  }
  EXPECT_EQ(fs::file_size(dir / "phi.bin"), 16u + 12u * (1 + 24 + 4 * m.phi_length()));
}

TEST(Ablation, GridShapeAndCellEquivalence) {
  const auto train_tasks = tasks_for(24, 1);
  const auto test_tasks = tasks_for(20, 2);
  AblationGrid grid;
  grid.memory_counts = {0, 2};
  grid.layer_counts = {2};
  grid.train_sizes = {8, 16};
  grid.repeats = 2;
  const auto base_model = small_model();
  const auto base_train = quick(2);
  const auto res = run_ablation(grid, base_model, base_train, train_tasks, test_tasks);
  ASSERT_EQ(res.cells.size(), 8u);
  std::istringstream in(res.to_csv());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 9u);

  // Cell (memories 2, layers 2, size 16, repeat 1) reproduced by hand.
  const auto& cell = res.cells[7];
  EXPECT_EQ(cell.memory_count, 2u);
  EXPECT_EQ(cell.train_size, 16u);
  EXPECT_EQ(cell.repeat, 1u);
  ModelConfig mc = base_model;
  mc.memory_count = 2;
  mc.seed = cell.seed;
  TrainConfig tc = base_train;
  tc.seed = cell.seed;
  FineModel m(mc);
  train(m, std::span(train_tasks).first(16), tc);
  EXPECT_DOUBLE_EQ(evaluate(m, test_tasks).accuracy, cell.test_accuracy);

  const auto [mean, sd] = res.cell_stats(2, 2, 16);
  const double a = res.cells[6].test_accuracy, b = res.cells[7].test_accuracy;
  EXPECT_DOUBLE_EQ(mean, (a + b) / 2);
  EXPECT_NEAR(sd, std::abs(a - b) / 2, 1e-15);
}

TEST(Ablation, ZeroMemoriesUsesQueryAsWeights) {
  ModelConfig c = small_model();
  c.memory_count = 0;
  FineModel m(c);
  EXPECT_TRUE(m.query_as_weights());
  for (const auto& p : m.parameters()) EXPECT_EQ(p.name.rfind("memory.", 0), std::string::npos);
  const auto tasks = tasks_for(16);
  const auto r = train(m, tasks, quick(2));
  EXPECT_EQ(r.curve.size(), 2u);
}
