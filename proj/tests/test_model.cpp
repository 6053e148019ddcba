#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fine/checkpoint.hpp"
#include "fine/dataset.hpp"
#include "fine/model.hpp"
#include "fine/optim.hpp"
#include "fine/pinv.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "model_gradcheck.hpp"

using namespace fine;
using fine::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_side = 8;
  c.embed_dim = 8;
  c.memory_count = 3;
  c.layer_count = 2;
  c.seed = 4;
  return c;
}

std::vector<IQTask> tiny_tasks(std::size_t n, std::size_t side = 8, std::uint64_t seed = 1) {
  GenerationConfig g;
  g.source.class_count = 6;
  g.source.per_class = 2;
  g.source.image_side = side;
  g.families = {Family::reflection, Family::rotation};
  g.task_count = n;
  g.seed = seed;
  return generate_dataset(g, load_source(g.source)).tasks;
}

MemoryBanks banks_from(std::vector<Tensor> keys, std::vector<Tensor> values) {
  FunctionalMemory m;
  m.d_out = keys[0].size(0);
  m.d_in = keys[0].size(1);
  m.keys = std::move(keys);
  m.values = std::move(values);
  return MemoryBanks::stack(m);
}

}  // namespace

TEST(Encoder, DeterministicWithConfiguredWidth) {
  FineModel m(tiny_config());
  const auto t = tiny_tasks(1);
  const auto a = m.encode(t[0].x);
  const auto b = m.encode(t[0].x);
  ASSERT_EQ(a.shape(), (Shape{8}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_THROW(m.encode(Image(16)), ShapeError);
}

TEST(Encoder, BatchMatchesSingle) {
  FineModel m(tiny_config());
  const auto t = tiny_tasks(1);
  std::vector<const Image*> imgs{&t[0].x, &t[0].y};
  const auto batch = m.encode_batch(imgs);
  const auto single = m.encode(t[0].y);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(batch[8 + i], single[i], 1e-14);
}

TEST(Encoder, GradientMatchesFiniteDifferences) {
  FineModel m(tiny_config());
  const auto t = tiny_tasks(1);
  std::vector<Tensor> leaves;
  for (const auto& p : m.parameters())
    if (p.name.rfind("encoder.", 0) == 0) leaves.push_back(p.tensor);
  ASSERT_EQ(leaves.size(), 8u);
  EXPECT_LT(fine::testing::max_grad_rel_error([&] { return sum(m.encode(t[0].x)); }, leaves, 1e-6), 1e-4);
}

TEST(Analogy, SelfInnerProduct) {
  auto q = random_tensor({3, 4}, 1);
  auto banks = banks_from({random_tensor({3, 4}, 2)}, {q});
  double sq = 0;
  for (double v : q.data()) sq += v * v;
  EXPECT_NEAR(analogy_weights(q, banks)[0], sq / std::sqrt(12.0), 1e-14);
}

TEST(Analogy, DisjointSupportGivesZero) {
  auto q = Tensor::from({2, 2}, {1, 2, 0, 0});
  auto v = Tensor::from({2, 2}, {0, 0, 3, 4});
  auto banks = banks_from({q, q}, {v, q});
  const auto a = analogy_weights(q, banks);
  EXPECT_EQ(a[0], 0.0);
  EXPECT_GT(a[1], 0.0);
}

TEST(Analogy, LinearInQuery) {
  auto q = random_tensor({3, 3}, 3);
  auto banks = banks_from({random_tensor({3, 3}, 4), random_tensor({3, 3}, 5)},
                          {random_tensor({3, 3}, 6), random_tensor({3, 3}, 7)});
  const auto a = analogy_weights(q, banks);
  const auto a4 = analogy_weights(scalar_mul(q, 4.0), banks);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a4[i], 4.0 * a[i]);
  EXPECT_THROW(analogy_weights(random_tensor({2, 3}, 8), banks), ShapeError);
}

TEST(Compose, OneHotZeroAndSum) {
  std::vector<Tensor> keys{random_tensor({2, 3}, 9), random_tensor({2, 3}, 10), random_tensor({2, 3}, 11)};
  auto banks = banks_from(keys, keys);
  const auto w1 = compose_weight(Tensor::vector({0, 1, 0}), banks);
  ASSERT_EQ(w1.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(w1[i], keys[1][i]);
  const auto w0 = compose_weight(Tensor::vector({0, 0, 0}), banks);
  for (double v : w0.data()) EXPECT_EQ(v, 0.0);
  const auto w12 = compose_weight(Tensor::vector({1, 1, 0}), banks);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(w12[i], keys[0][i] + keys[1][i]);
  EXPECT_THROW(compose_weight(Tensor::vector({1, 1}), banks), ShapeError);
}

TEST(Compose, Linearity) {
  std::vector<Tensor> keys{Tensor::from({1, 2}, {0.5, -1.25}), Tensor::from({1, 2}, {2.0, 0.75})};
  auto banks = banks_from(keys, keys);
  auto a = Tensor::vector({0.5, 1.5});
  auto b = Tensor::vector({-2.0, 0.25});
  const auto lhs = compose_weight(a + b, banks);
  const auto rhs = compose_weight(a, banks) + compose_weight(b, banks);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(lhs[i], rhs[i]);
}

TEST(ComposeFunction, QueryAsWeightsMapsInputToPseudoOutput) {
  ModelConfig c = tiny_config();
  c.memory_count = 0;
  c.backbone = BackboneKind::mlp;
  FineModel m(c);
  EXPECT_TRUE(m.query_as_weights());
  auto x = random_tensor({8}, 12);
  auto y = random_tensor({8}, 13);
  const auto comp = m.compose_function(x, y);
  ASSERT_EQ(comp.weights.size(), 2u);
  const auto y0 = m.gammas()[0].apply(y);
  const auto wx = matmul(comp.weights[0], x);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(wx[i], y0[i], 1e-12);
  // Second layer sees tanh of the first layer's output.
  const auto x1 = tanh(wx);
  const auto w1x1 = matmul(comp.weights[1], x1);
  const auto y1 = m.gammas()[1].apply(y);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(w1x1[i], y1[i], 1e-12);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(comp.output[i], y1[i], 1e-12);
}

TEST(ComposeFunction, OneHotMemorySelectsKey) {
  ModelConfig c = tiny_config();
  c.backbone = BackboneKind::mlp;
  FineModel m(c);
  auto x = random_tensor({8}, 14);
  auto y = random_tensor({8}, 15);
  // Engineer memory 0 so that layer 0's coefficients are one-hot at j = 2.
  const auto q = build_query(x, m.gammas()[0].apply(y));
  double qq = 0;
  for (double v : q.data()) qq += v * v;
  const auto& mem = m.memories()[0];
  for (std::size_t i = 0; i < mem.size(); ++i) {
    Tensor vt = mem.values[i];  // shares storage with the model
    auto vd = vt.mutable_data();
    for (std::size_t k = 0; k < vd.size(); ++k) vd[k] = i == 2 ? q[k] * std::sqrt(64.0) / qq : 0.0;
  }
  const auto comp = m.compose_function(x, y);
  for (std::size_t k = 0; k < 64; ++k) EXPECT_NEAR(comp.weights[0][k], mem.keys[2][k], 1e-12);
}

TEST(ComposeFunction, MemoryGradientsMatchFiniteDifferences) {
  FineModel m(tiny_config());
  auto x = random_tensor({8}, 16);
  auto y = random_tensor({8}, 17);
  std::vector<Tensor> leaves;
  for (const auto& p : m.parameters())
    if (p.name.rfind("memory.", 0) == 0) leaves.push_back(p.tensor);
  EXPECT_EQ(leaves.size(), 6u);  // one memory for the coupling pair, three keys and three values
  auto w = random_tensor({8}, 18);
  EXPECT_LT(fine::testing::max_grad_rel_error([&] { return sum(m.compose_function(x, y).output * w); }, leaves, 1e-6),
            1e-4);
}

TEST(Nice, ZeroWeightsAreIdentity) {
  auto v = random_tensor({6}, 19);
  std::vector<Tensor> ws{Tensor::zeros({3, 3}), Tensor::zeros({3, 3})};
  const auto out = nice_forward(v, ws);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out[i], v[i]);
}

TEST(Nice, RoundTrip) {
  for (std::uint64_t k = 0; k < 100; ++k) {
    auto v = random_tensor({8}, 100 + k, -3, 3);
    std::vector<Tensor> ws;
    for (int l = 0; l < 4; ++l) ws.push_back(random_tensor({4, 4}, 1000 + 4 * k + l, -2, 2));
    const auto back = nice_inverse(nice_forward(v, ws), ws);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_LT(std::abs(back[i] - v[i]), 1e-10);
  }
}

TEST(Nice, EachLayerChangesOnlyOneHalf) {
  auto v = random_tensor({8}, 20);
  std::vector<Tensor> w0{random_tensor({4, 4}, 21)};
  const auto one = nice_forward(v, w0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(one[i], v[i]);
  std::vector<Tensor> w01{w0[0], random_tensor({4, 4}, 22)};
  const auto two = nice_forward(v, w01);
  for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(two[i], one[i]);
}

TEST(Nice, SingleLayerHandComputation) {
  auto v = Tensor::vector({0.5, -1.0, 2.0, 3.0});
  std::vector<Tensor> w{Tensor::from({2, 2}, {1, 2, 3, 4})};
  const auto out = nice_forward(v, w);
  const double t0 = std::tanh(0.5), t1 = std::tanh(-1.0);
  EXPECT_NEAR(out[2], 2.0 + t0 + 2 * t1, 1e-15);
  EXPECT_NEAR(out[3], 3.0 + 3 * t0 + 4 * t1, 1e-15);
  const auto back = nice_inverse(out, w);
  EXPECT_NEAR(back[2], 2.0, 1e-15);
}

TEST(Nice, OddDimensionRejected) {
  std::vector<Tensor> w{Tensor::zeros({2, 2})};
  EXPECT_THROW(nice_forward(Tensor::vector({1, 2, 3}), w), ShapeError);
  ModelConfig c = tiny_config();
  c.embed_dim = 7;
  EXPECT_THROW(FineModel{c}, ModelConfigError);
  c = tiny_config();
  c.layer_count = 3;
  EXPECT_THROW(FineModel{c}, ModelConfigError);
}

TEST(Head, Equidistant) {
  auto y = Tensor::vector({0, 0});
  std::vector<Tensor> ch{Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({-1, 0}), Tensor::vector({0, -1})};
  const auto p = choice_probabilities(y, ch, Tensor::full({2}, 1.0));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[i], 0.25, 1e-15);
}

TEST(Head, MatchingChoiceDominates) {
  auto y = Tensor::vector({1, 2});
  const double far = std::sqrt(std::log(27.0));
  std::vector<Tensor> ch{Tensor::vector({1 + far, 2}), Tensor::vector({1, 2}), Tensor::vector({1, 2 - far}),
                         Tensor::vector({1 - far, 2})};
  const auto p = choice_probabilities(y, ch, Tensor::full({2}, 1.0));
  EXPECT_GT(p[1], 0.9);
}

TEST(Head, UnitAlphaIsSquaredEuclidean) {
  auto y = Tensor::vector({0.3, -0.2, 0.1});
  std::vector<Tensor> ch{Tensor::vector({1, 0, 0}), Tensor::vector({0, 2, 0}), Tensor::vector({0, 0, 3}),
                         Tensor::vector({0.3, -0.2, 0.1})};
  const auto lp = choice_log_probabilities(y, ch, Tensor::full({3}, 1.0));
  // log p_i - log p_3 = -(eta_i - eta_3) with eta_3 = 0.
  for (std::size_t i = 0; i < 3; ++i) {
    double eta = 0;
    for (std::size_t k = 0; k < 3; ++k) eta += (ch[i][k] - y[k]) * (ch[i][k] - y[k]);
    EXPECT_NEAR(lp[i] - lp[3], -eta, 1e-12);
  }
}

TEST(Head, ShiftInvariance) {
  // Moving y* along a direction where alpha is zero adds the same constant to every eta.
  auto alpha = Tensor::vector({1.0, 0.0});
  std::vector<Tensor> ch{Tensor::vector({1, 0}), Tensor::vector({2, 0}), Tensor::vector({3, 0}), Tensor::vector({4, 0})};
  const auto p1 = choice_probabilities(Tensor::vector({0, 0}), ch, alpha);
  const auto p2 = choice_probabilities(Tensor::vector({0, 5}), ch, alpha);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p1[i], p2[i], 1e-15);
}

TEST(Model, ParameterNamesUniqueAndComplete) {
  FineModel m(tiny_config());
  std::set<std::string> names;
  for (const auto& p : m.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    EXPECT_TRUE(p.tensor.requires_grad());
  }
  for (const char* n : {"encoder.conv1.weight", "encoder.conv3.bias", "encoder.fc.weight", "gamma.0.weight",
                        "gamma.1.bias", "memory.0.key.0", "memory.0.value.2", "head.alpha_raw"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  EXPECT_FALSE(names.count("memory.1.key.0"));  // the coupling pair shares memory 0
}

TEST(Model, SolveTaskContract) {
  FineModel m(tiny_config());
  for (const auto& t : tiny_tasks(10)) {
    const auto s = m.solve_task(t);
    double total = 0;
    for (double p : s.probabilities) {
      EXPECT_GE(p, 0.0);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_LT(s.predicted_index, 4u);
    EXPECT_EQ(s.phi.size(), m.phi_length());
  }
  EXPECT_EQ(m.phi_length(), 2u * 4 * 4);
  ModelConfig big;
  EXPECT_EQ(FineModel(big).phi_length(), 4u * 16 * 16);
  big.backbone = BackboneKind::mlp;
  big.layer_count = 2;
  EXPECT_EQ(FineModel(big).phi_length(), 2u * 32 * 32);
}

TEST(Model, ArgmaxLowestIndexTieBreak) {
  const std::vector<double> v{0.1, 0.4, 0.4, 0.1};
  EXPECT_EQ(argmax_lowest(v), 1u);
}

TEST(Model, AlphaStaysNonNegativeUnderOptimization) {
  FineModel m(tiny_config());
  auto params = m.parameters();
  AdamState st;
  st.lr = 5.0;
  for (int k = 0; k < 10; ++k) {
    backward(sum(m.alpha()));  // pushes alpha_raw down hard
    std::vector<NamedTensor> head{params.back()};
    adam_step(head, st);
    const auto a = m.alpha();
    for (double v : a.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(Model, EndToEndGradientCheck) {
  FineModel m(tiny_config());
  const auto tasks = tiny_tasks(2);
  std::vector<const IQTask*> ptrs{&tasks[0], &tasks[1]};
  for (const auto& g : fine::testing::model_gradcheck(m, ptrs)) EXPECT_LT(g.rel_error, 1e-4) << g.name;
}

TEST(Model, EndToEndGradientCheckMlp) {
  ModelConfig c = tiny_config();
  c.backbone = BackboneKind::mlp;
  FineModel m(c);
  const auto tasks = tiny_tasks(2);
  std::vector<const IQTask*> ptrs{&tasks[0], &tasks[1]};
  for (const auto& g : fine::testing::model_gradcheck(m, ptrs)) EXPECT_LT(g.rel_error, 1e-4) << g.name;
}

TEST(Model, SameSeedSameInit) {
  FineModel a(tiny_config()), b(tiny_config());
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i].tensor.numel(); ++k) EXPECT_EQ(pa[i].tensor[k], pb[i].tensor[k]);
  }
}

TEST(Checkpoint, RoundTrip) {
  const auto dir = fs::temp_directory_path() / "fine_model_ckpt";
  fs::create_directories(dir);
  FineModel m(tiny_config());
  save_checkpoint(m, dir / "m");
  const auto back = load_checkpoint(dir / "m");
  EXPECT_EQ(back.config(), m.config());
  const auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    for (std::size_t k = 0; k < pa[i].tensor.numel(); ++k) EXPECT_EQ(pa[i].tensor[k], pb[i].tensor[k]);
  }
  EXPECT_EQ(read_checkpoint_config(dir / "m"), m.config());
}

TEST(Checkpoint, DeclaredShapeMismatchRejected) {
  const auto dir = fs::temp_directory_path() / "fine_model_ckpt_bad";
  fs::create_directories(dir);
  save_checkpoint(FineModel(tiny_config()), dir / "m");
  nlohmann::json j;
  {
    std::ifstream in(fs::path(dir / "m.json"));
    j = nlohmann::json::parse(in);
  }
  j["tensors"][0]["shape"] = {8, 1, 3, 4};
  {
    std::ofstream out(fs::path(dir / "m.json"));
    out << j.dump();
  }
  EXPECT_THROW(load_checkpoint(dir / "m"), CheckpointShapeError);
  EXPECT_THROW(load_checkpoint(dir / "absent"), CheckpointError);
}
