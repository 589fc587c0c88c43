#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dinoyolo/training.h"

using namespace dinoyolo;

namespace {

const std::array<int64_t, 3> kToySides{8, 4, 2};
constexpr double kSmall = 32.0 / 640.0, kMed = 96.0 / 640.0;

ModelConfig toy(IntegrationStrategy s = IntegrationStrategy::kNone) {
  ModelConfig c;
  c.strategy = s;
  c.seed = 4;
  return c;
}

Dataset tiny_set(int count, uint64_t seed) {
  DatasetSpec spec;
  spec.count = count;
  spec.seed = seed;
  return gen_synthetic_dataset(spec);
}

template <typename T>
std::array<Variable<T>, 3> constant_levels(T value, int64_t n = 1, int64_t k = 2, bool grad = false) {
  std::array<Variable<T>, 3> out;
  for (size_t l = 0; l < 3; ++l) {
    out[l] = Variable<T>(Tensor<T>({n, 5 + k, kToySides[l], kToySides[l]}, value), grad);
  }
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dinoyolo_training_test_" + name);
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Targets, RoutingBySize) {
  // 0.04 of the side lands on P3 with the 32/640 and 96/640 thresholds; 0.5 goes to P5.
  EXPECT_EQ(route_level({0, 0.5, 0.5, 0.04, 0.04}, kSmall, kMed), 0);
  EXPECT_EQ(route_level({0, 0.5, 0.5, 0.1, 0.1}, kSmall, kMed), 1);
  EXPECT_EQ(route_level({0, 0.5, 0.5, 0.5, 0.5}, kSmall, kMed), 2);
  // Boundaries go to the finer level.
  EXPECT_EQ(route_level({0, 0.5, 0.5, 0.25, 0.25}, 0.25, 0.5), 0);
  EXPECT_EQ(route_level({0, 0.5, 0.5, 0.5, 0.5}, 0.25, 0.5), 1);
}

TEST(Targets, CenterCellAndCollisions) {
  std::vector<std::vector<GroundTruthBox>> batch{
      {{0, 0.30, 0.60, 0.04, 0.04}, {1, 0.31, 0.61, 0.04, 0.04}, {1, 0.5, 0.5, 0.5, 0.5}}, {}};
  const TargetSet t = assign_targets(batch, kToySides, kSmall, kMed, 2);
  ASSERT_EQ(t.levels[0][0].size(), 1u);
  EXPECT_EQ(t.levels[0][0][0].cell, 4 * 8 + 2);
  EXPECT_EQ(t.levels[0][0][0].box.cls, 1);  // the later box wins the cell
  EXPECT_EQ(t.collisions, 1);
  ASSERT_EQ(t.levels[2][0].size(), 1u);
  EXPECT_EQ(t.levels[2][0][0].cell, 1 * 2 + 1);
  EXPECT_TRUE(t.levels[0][1].empty());
  EXPECT_EQ(t.sides, kToySides);
}

TEST(Targets, InvalidBoxNamesSample) {
  std::vector<std::vector<GroundTruthBox>> batch{{}, {{0, 0.5, 0.5, 1.5, 0.1}}};
  const std::vector<std::string> names{"a", "broken_17"};
  try {
    assign_targets(batch, kToySides, kSmall, kMed, 2, names);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken_17"), std::string::npos) << e.what();
  }
  std::vector<std::vector<GroundTruthBox>> bad_class{{{5, 0.5, 0.5, 0.1, 0.1}}};
  EXPECT_THROW(assign_targets(bad_class, kToySides, kSmall, kMed, 2), DataError);
}

TEST(Loss, NoTargetsIsObjectnessOnly) {
  const auto levels = constant_levels<double>(0.0);
  const TargetSet t = assign_targets(std::vector<std::vector<GroundTruthBox>>{{}}, kToySides, kSmall, kMed, 2);
  const auto loss = detection_loss(levels, t, LossWeights{5, 2, 1});
  EXPECT_EQ(loss.box, 0.0);
  EXPECT_EQ(loss.cls, 0.0);
  EXPECT_NEAR(loss.obj, std::log(2.0), 1e-12);
  EXPECT_NEAR(loss.total.value()[0], 2 * std::log(2.0), 1e-12);
  EXPECT_EQ(loss.assigned, 0);
}

TEST(Loss, HalfOverlapBoxTerm) {
  // Zero logits at cell (3,3) of the 8x8 level decode to a 0.5 x 0.5 box centered at 0.4375.
  // A target of the same center, 0.5 wide and 0.25 tall, overlaps it with IoU 0.5.
  const auto levels = constant_levels<double>(0.0);
  TargetSet t;
  for (size_t l = 0; l < 3; ++l) t.levels[l].resize(1);
  t.sides = kToySides;
  t.levels[0][0].push_back({3 * 8 + 3, {0, 0.4375, 0.4375, 0.5, 0.25}});
  const auto loss = detection_loss(levels, t, LossWeights{5, 0, 0});
  EXPECT_NEAR(loss.box, 0.5, 1e-12);
  EXPECT_NEAR(loss.total.value()[0], 2.5, 1e-12);
  EXPECT_NEAR(loss.cls, std::log(2.0), 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Variable<double>> inputs;
  for (size_t l = 0; l < 3; ++l) {
    Tensor<double> v({2, 7, kToySides[l], kToySides[l]});
    for (double& x : v.data()) x = nd(rng);
    inputs.emplace_back(v, true);
  }
  std::vector<std::vector<GroundTruthBox>> batch{
      {{0, 0.3, 0.6, 0.04, 0.05}, {1, 0.7, 0.3, 0.12, 0.08}},
      {{1, 0.5, 0.5, 0.5, 0.4}, {0, 0.2, 0.2, 0.03, 0.03}}};
  const TargetSet t = assign_targets(batch, kToySides, kSmall, kMed, 2);
  const double err = grad_check(
      [&](std::span<const Variable<double>> in) {
        return detection_loss<double>({in[0], in[1], in[2]}, t, LossWeights{5, 1, 1}).total;
      },
      inputs);
  EXPECT_LT(err, 1e-3);
}

TEST(Loss, ShapeMismatchThrows) {
  const auto levels = constant_levels<float>(0.0f);
  TargetSet t = assign_targets(std::vector<std::vector<GroundTruthBox>>{{}}, {4, 2, 1}, kSmall, kMed, 2);
  EXPECT_THROW(detection_loss(levels, t, {}), ShapeError);
}

TEST(Train, ZeroLearningRateLeavesWeights) {
  DetectionModel m(toy(IntegrationStrategy::kSingleP3));
  std::vector<Tensor<float>> before;
  for (const Parameter& p : m.params().all()) before.push_back(p.var.value());
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const TrainResult r = train(m, tiny_set(8, 1), cfg);
  EXPECT_EQ(r.steps, 2);
  for (size_t i = 0; i < before.size(); ++i) EXPECT_EQ(m.params().all()[i].var.value(), before[i]);
}

TEST(Train, FrozenTeacherUntouched) {
  DetectionModel m(toy(IntegrationStrategy::kDualP0P3));
  std::vector<Tensor<float>> before;
  for (const Parameter& p : m.params().all()) before.push_back(p.var.value());
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  TrainHooks hooks;
  hooks.after_step = [&](int64_t) {
    for (const Parameter& p : m.params().all()) {
      if (p.frozen) EXPECT_FALSE(p.var.has_grad()) << p.name;
    }
  };
  train(m, tiny_set(8, 2), cfg, nullptr, hooks);
  bool moved = false;
  for (size_t i = 0; i < before.size(); ++i) {
    const Parameter& p = m.params().all()[i];
    if (p.frozen) {
      EXPECT_EQ(p.var.value(), before[i]) << p.name;
    } else {
      moved = moved || p.var.value() != before[i];
    }
  }
  EXPECT_TRUE(moved);
}

TEST(Train, GradientClippingBoundsTheStep) {
  DetectionModel m(toy());
  std::vector<Tensor<float>> before;
  for (const Parameter& p : m.params().all()) before.push_back(p.var.value());
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.momentum = 0.0;
  cfg.grad_clip = 1e-3;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  train(m, tiny_set(4, 12), cfg);
  double sq = 0;
  for (size_t i = 0; i < before.size(); ++i) {
    const Tensor<float>& w = m.params().all()[i].var.value();
    for (int64_t k = 0; k < w.numel(); ++k) sq += std::pow(static_cast<double>(w[k]) - before[i][k], 2);
  }
  EXPECT_GT(std::sqrt(sq), 0.0);
  EXPECT_LE(std::sqrt(sq), 1e-3 * (1 + 1e-3));
}

TEST(Train, OverfitsOneSample) {
  DetectionModel m(toy());
  const Dataset one = tiny_set(1, 3);
  TrainConfig cfg;
  // 1 - IoU has kinks at the optimum, so the step size is annealed to settle there.
  cfg.learning_rate = 0.002;
  cfg.linear_decay = true;
  cfg.batch_size = 1;
  cfg.epochs = 300;
  cfg.weights = {5, 5, 1};
  cfg.t_small = 0.31;
  cfg.t_med = 0.37;
  const TrainResult r = train(m, one, cfg);
  ASSERT_EQ(r.history.size(), 300u);
  EXPECT_LT(r.history.back().loss, 0.1 * r.history.front().loss);
}

TEST(Train, Deterministic) {
  const Dataset data = tiny_set(6, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;
  DetectionModel a(toy(IntegrationStrategy::kSingleP0)), b(toy(IntegrationStrategy::kSingleP0));
  const TrainResult ra = train(a, data, cfg), rb = train(b, data, cfg);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (size_t i = 0; i < ra.history.size(); ++i) EXPECT_EQ(ra.history[i].loss, rb.history[i].loss);
  for (size_t i = 0; i < a.params().all().size(); ++i) {
    EXPECT_EQ(a.params().all()[i].var.value(), b.params().all()[i].var.value());
  }
}

TEST(Train, NonFiniteLossStops) {
  DetectionModel m(toy());
  TrainConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  try {
    train(m, tiny_set(4, 6), cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epoch 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("synth_"), std::string::npos) << msg;
  }
}

TEST(Train, EvaluationScheduleAndEarlyStop) {
  const Dataset data = tiny_set(4, 7), val = tiny_set(4, 8);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.eval_every = 2;
  DetectionModel m(toy());
  const TrainResult r = train(m, data, cfg, &val);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_FALSE(r.history[0].val_map50);
  EXPECT_TRUE(r.history[1].val_map50);
  EXPECT_FALSE(r.history[2].val_map50);
  EXPECT_TRUE(r.history[3].val_map50);

  cfg.eval_every = 0;
  cfg.target_map50 = 0.0;
  DetectionModel m2(toy());
  const TrainResult stopped = train(m2, data, cfg, &val);
  ASSERT_EQ(stopped.history.size(), 1u);
  EXPECT_TRUE(stopped.history[0].val_map50);
}

TEST(Train, RejectsBadConfig) {
  DetectionModel m(toy());
  TrainConfig cfg;
  cfg.t_small = 0.5;
  cfg.t_med = 0.4;
  EXPECT_THROW(train(m, tiny_set(2, 1), cfg), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(train(m, tiny_set(2, 1), cfg), ConfigError);
  cfg = {};
  cfg.learning_rate = std::nan("");
  EXPECT_THROW(train(m, tiny_set(2, 1), cfg), ConfigError);
  cfg = {};
  cfg.momentum = 1.0;
  EXPECT_THROW(train(m, tiny_set(2, 1), cfg), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  DetectionModel m(toy(IntegrationStrategy::kDualP0P3));
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  train(m, tiny_set(4, 9), cfg);
  const auto path = temp_path("roundtrip.dyck");
  save_checkpoint(m, path, 42);
  const LoadedCheckpoint loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.step, 42);
  EXPECT_EQ(loaded.model->config(), m.config());
  EXPECT_EQ(param_report(*loaded.model), param_report(m));
  const nn::Var img(stack_images(tiny_set(2, 10), std::vector<size_t>{0, 1}));
  const auto a = m.forward(img), b = loaded.model->forward(img);
  for (size_t l = 0; l < 3; ++l) EXPECT_EQ(a.levels[l].value(), b.levels[l].value());
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsReported) {
  DetectionModel m(toy());
  const auto path = temp_path("corrupt.dyck");
  save_checkpoint(m, path);
  const std::string good = read_bytes(path);

  auto expect_field = [&](const std::string& bytes, const std::string& field_part) {
    write_bytes(path, bytes);
    try {
      load_checkpoint(path);
      ADD_FAILURE() << "expected CheckpointError for " << field_part;
    } catch (const CheckpointError& e) {
      EXPECT_NE(e.field().find(field_part), std::string::npos) << e.what();
    }
  };

  std::string bad = good;
  bad[0] = 'X';
  expect_field(bad, "magic");

  bad = good;
  bad[4] = 9;
  expect_field(bad, "version");

  // First extent of the first parameter: header, config, step, count, name, rank.
  const Parameter& first = m.params().all().front();
  const size_t offset = 4 + 4 + 4 + m.config().to_json().size() + 8 + 4 + 4 + first.name.size() + 4;
  bad = good;
  bad[offset] = static_cast<char>(bad[offset] + 1);
  write_bytes(path, bad);
  try {
    load_checkpoint(path);
    ADD_FAILURE() << "expected shape mismatch";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.field(), first.name + " shape");
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
  }

  expect_field(good.substr(0, good.size() - 3), "data");
  expect_field(good + "x", "trailer");
  std::filesystem::remove(path);
}
