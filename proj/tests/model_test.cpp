#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dinoyolo/detector.h"

using namespace dinoyolo;

namespace {

Tensor<float> random_images(int64_t n, int64_t side, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t({n, 3, side, side});
  for (float& v : t.data()) v = u(rng);
  return t;
}

ModelConfig toy(IntegrationStrategy s) {
  ModelConfig c;
  c.scale = "S";
  c.teacher = "toy-tiny";
  c.strategy = s;
  c.input_size = 64;
  c.seed = 3;
  return c;
}

double max_rel_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]);
    worst = std::max(worst, d / std::max(1.0, std::abs(static_cast<double>(b[i]))));
  }
  return worst;
}

}  // namespace

TEST(Teacher, PatchEmbedTokenCounts) {
  TeacherSpec spec = teacher_preset("toy-tiny");
  ParameterStore store(0);
  Teacher t(store, "t", spec, TeacherEntry::kImage, 4);
  auto tokens = t.patch_embed(nn::Var(random_images(2, 32, 1)));
  EXPECT_EQ(tokens.shape(), (Shape{2, 16, 32}));

  ParameterStore one(0);
  Teacher single(one, "t", spec, TeacherEntry::kImage, 1);
  EXPECT_EQ(single.patch_embed(nn::Var(random_images(1, 8, 2))).shape(), (Shape{1, 1, 32}));
}

TEST(Teacher, FullScalePatchGrid) {
  // 640 / 16 = 40 patches per side -> 1600 tokens of width 768.
  const TeacherSpec& spec = teacher_preset("vitb16-full");
  EXPECT_EQ((640 / spec.patch_size) * (640 / spec.patch_size), 1600);
  EXPECT_EQ(spec.dim, 768);
}

TEST(Teacher, ZeroImageGivesBiasPlusPositional) {
  TeacherSpec spec = teacher_preset("toy-tiny");
  spec.include_positional = false;
  ParameterStore store(0);
  Teacher t(store, "t", spec, TeacherEntry::kImage, 2);
  store.at("t.patch_embed.bias").var.mutable_value().fill(0.25f);
  auto tokens = t.patch_embed(nn::Var(Tensor<float>({1, 3, 16, 16})));
  for (float v : tokens.value().data()) EXPECT_EQ(v, 0.25f);
}

TEST(Teacher, ImageForwardShapeAndDeterminism) {
  const TeacherSpec& spec = teacher_preset("toy-tiny");
  ParameterStore a(5), b(5);
  Teacher ta(a, "t", spec, TeacherEntry::kImage, 4), tb(b, "t", spec, TeacherEntry::kImage, 4);
  const nn::Var img(random_images(1, 32, 3));
  auto ya = ta.forward_image(img);
  EXPECT_EQ(ya.shape(), (Shape{1, 32, 4, 4}));
  EXPECT_EQ(ya.value(), tb.forward_image(img).value());
}

TEST(Teacher, DepthZeroIsNormalizedEmbedding) {
  TeacherSpec spec = teacher_preset("toy-tiny");
  spec.depth = 0;
  ParameterStore store(0);
  Teacher t(store, "t", spec, TeacherEntry::kImage, 2);
  auto y = t.forward_image(nn::Var(random_images(1, 16, 4)));
  EXPECT_EQ(y.shape(), (Shape{1, 32, 2, 2}));
}

TEST(Teacher, ImagePathEqualsTokenPath) {
  const TeacherSpec& spec = teacher_preset("toy-tiny");
  ParameterStore store(0);
  Teacher t(store, "t", spec, TeacherEntry::kImage, 4);
  const nn::Var img(random_images(2, 32, 6));
  auto via_tokens = ops::map_from_tokens(t.forward_tokens(t.patch_embed(img)), 4, 4);
  EXPECT_EQ(t.forward_image(img).value(), via_tokens.value());
}

TEST(Teacher, CountFormula) {
  TeacherSpec tiny{"x", 0, 1, 1, 4, 1, false, true, 1};
  // depth 0, D = 1, p = 1, no positional: 3 (patch) + 1 (bias) + 2 (final norm).
  EXPECT_EQ(count_teacher_params(tiny), 6);

  const TeacherSpec& b = teacher_preset("vitb16-full");
  EXPECT_NEAR(static_cast<double>(count_teacher_params(b)), 86e6, 0.03 * 86e6);
  const TeacherSpec& l = teacher_preset("vitl16-full");
  EXPECT_NEAR(static_cast<double>(count_teacher_params(l)), 307e6, 0.05 * 307e6);

  TeacherSpec d1 = teacher_preset("toy-small"), d2 = d1;
  d1.depth = 3;
  d2.depth = 6;
  EXPECT_EQ(count_teacher_params(d2) - count_teacher_params(d1), 3 * teacher_block_params(d1));
}

TEST(Teacher, CountMatchesEnumeration) {
  for (const std::string& name : {"toy-tiny", "toy-small"}) {
    const TeacherSpec& spec = teacher_preset(name);
    ParameterStore store(0);
    Teacher t(store, "t", spec, TeacherEntry::kImage, spec.grid);
    int64_t n = 0;
    for (const Parameter& p : store.all()) {
      n += p.numel();
      EXPECT_TRUE(p.frozen) << p.name;
    }
    EXPECT_EQ(n, count_teacher_params(spec)) << name;
  }
}

TEST(Teacher, FrozenWeightsGetNoGradient) {
  const TeacherSpec& spec = teacher_preset("toy-tiny");
  ParameterStore store(0);
  Teacher t(store, "t", spec, TeacherEntry::kImage, 2);
  nn::Var img(random_images(1, 16, 7), true);
  ops::sum(t.forward_image(img)).backward();
  EXPECT_TRUE(img.has_grad());
  for (const Parameter& p : store.all()) EXPECT_FALSE(p.var.has_grad()) << p.name;
}

TEST(Injection, PlanIsTotal) {
  EXPECT_TRUE(plan_injections(IntegrationStrategy::kNone).empty());
  EXPECT_EQ(plan_injections(IntegrationStrategy::kSingleP0), (std::vector<Site>{Site::kP0}));
  EXPECT_EQ(plan_injections(IntegrationStrategy::kSingleP3), (std::vector<Site>{Site::kP3}));
  EXPECT_EQ(plan_injections(IntegrationStrategy::kDualP3P4), (std::vector<Site>{Site::kP3, Site::kP4}));
  EXPECT_EQ(plan_injections(IntegrationStrategy::kDualP0P3), (std::vector<Site>{Site::kP0, Site::kP3}));
  EXPECT_EQ(plan_injections(IntegrationStrategy::kTriple), (std::vector<Site>{Site::kP0, Site::kP3, Site::kP4}));
  for (IntegrationStrategy s : all_strategies()) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_THROW(parse_strategy("quad"), ConfigError);
}

TEST(Injection, FullScaleTokenCounts) {
  ParameterStore store(0, /*materialize=*/false);
  const TeacherSpec& spec = teacher_preset("vitb16-full");
  FeatureInjector p3(store, "p3", Site::kP3, spec, 512, 640 / 8);
  FeatureInjector p4(store, "p4", Site::kP4, spec, 512, 640 / 16);
  EXPECT_EQ(p3.token_count(), 6400);
  EXPECT_EQ(p4.token_count(), 1600);
}

TEST(Injection, ZeroGateIsIdentityAndGradientsFlow) {
  const TeacherSpec& spec = teacher_preset("toy-tiny");
  ParameterStore store(0);
  FeatureInjector inj(store, "p3", Site::kP3, spec, 16, 4);
  Tensor<float> x({2, 16, 4, 4});
  std::mt19937_64 rng(9);
  std::normal_distribution<float> nd;
  for (float& v : x.data()) v = nd(rng);
  auto y = inj(nn::Var(x));
  EXPECT_EQ(y.value(), x);

  ops::sum(ops::mul(y, y)).backward();
  EXPECT_TRUE(store.at("p3.gate").var.has_grad());
  double gate_grad = 0;
  for (float g : store.at("p3.gate").var.grad().data()) gate_grad += std::abs(g);
  EXPECT_GT(gate_grad, 0.0);
  for (const Parameter& p : store.all()) {
    if (p.frozen) EXPECT_FALSE(p.var.has_grad()) << p.name;
  }

  P0Preprocessor p0(store, "p0", spec, 32);
  const nn::Var img(random_images(1, 32, 10));
  EXPECT_EQ(p0(img).value(), img.value());
}

TEST(Injection, P0ReplaceModeFreezesUnitGate) {
  ParameterStore store(0);
  P0Preprocessor p0(store, "p0", teacher_preset("toy-tiny"), 32, P0Mode::kReplace);
  const Parameter& gate = store.at("p0.gate");
  EXPECT_TRUE(gate.frozen);
  for (float v : gate.var.value().data()) EXPECT_EQ(v, 1.0f);
  EXPECT_EQ(p0(nn::Var(random_images(1, 32, 11))).shape(), (Shape{1, 3, 32, 32}));
}

TEST(Detector, ToyForwardShapes) {
  for (IntegrationStrategy s : all_strategies()) {
    DetectionModel m(toy(s));
    auto p = m.forward(nn::Var(random_images(2, 64, 12)));
    EXPECT_EQ(p.levels[0].shape(), (Shape{2, 7, 8, 8})) << to_string(s);
    EXPECT_EQ(p.levels[1].shape(), (Shape{2, 7, 4, 4})) << to_string(s);
    EXPECT_EQ(p.levels[2].shape(), (Shape{2, 7, 2, 2})) << to_string(s);
  }
}

TEST(Detector, FullScaleLevelSides) {
  ModelConfig c;
  c.scale = "L-full";
  c.teacher = "vitb16-full";
  c.strategy = IntegrationStrategy::kDualP0P3;
  c.input_size = 640;
  DetectionModel m(c, /*materialize=*/false);
  EXPECT_EQ(m.level_sides(), (std::array<int64_t, 3>{80, 40, 20}));
  EXPECT_EQ(m.config().name(), "L-full-vitb16-dualp0p3");
  EXPECT_THROW(m.forward(nn::Var(Tensor<float>({1, 3, 640, 640}))), ConfigError);
}

TEST(Detector, FullScaleFrozenCountIsTwoTeachers) {
  ModelConfig c;
  c.scale = "L-full";
  c.teacher = "vitb16-full";
  c.strategy = IntegrationStrategy::kDualP0P3;
  c.input_size = 640;
  const ParamReport r = build_model(c, /*materialize=*/false).second;
  const TeacherSpec& t = teacher_preset("vitb16-full");
  // Two trunks plus the entry tables sized to each site's grid (40x40 patches at P0, 80x80 tokens at P3).
  const int64_t expected = 2 * teacher_trunk_params(t) + teacher_entry_params(t, TeacherEntry::kImage, 40) +
                           teacher_entry_params(t, TeacherEntry::kTokens, 80);
  EXPECT_EQ(r.frozen, expected);
  EXPECT_NEAR(static_cast<double>(r.frozen), 2 * 86e6, 0.05 * 2 * 86e6);
  EXPECT_EQ(r.total, r.trainable + r.frozen);
}

TEST(Detector, ScaleChannelLadder) {
  EXPECT_EQ(scale_preset("L-full").channels(), (std::array<int64_t, 5>{64, 128, 512, 512, 512}));
  EXPECT_EQ(scale_preset("S").channels(), (std::array<int64_t, 5>{16, 32, 64, 128, 128}));
  EXPECT_THROW(scale_preset("XL"), ConfigError);
}

TEST(Detector, ReportsAndAccounting) {
  const ParamReport none = build_model(toy(IntegrationStrategy::kNone)).second;
  EXPECT_EQ(none.frozen, 0);
  EXPECT_EQ(none.trainable_fraction, 1.0);

  const ParamReport r = make_param_report(47'000'000, 173'000'000);
  EXPECT_EQ(r.total, 220'000'000);
  EXPECT_NEAR(r.trainable_fraction * 100.0, 21.36, 0.01);

  int64_t last = -1;
  for (IntegrationStrategy s : {IntegrationStrategy::kNone, IntegrationStrategy::kSingleP3,
                                IntegrationStrategy::kDualP0P3, IntegrationStrategy::kTriple}) {
    auto [m, rep] = build_model(toy(s));
    int64_t trainable = 0, frozen = 0;
    for (const Parameter& p : m->params().all()) (p.frozen ? frozen : trainable) += p.numel();
    EXPECT_EQ(rep.trainable, trainable);
    EXPECT_EQ(rep.frozen, frozen);
    EXPECT_EQ(rep.total, trainable + frozen);
    EXPECT_GE(rep.frozen, last) << to_string(s);
    last = rep.frozen;
  }
}

TEST(Detector, ToyFrozenCountMatchesClosedForm) {
  const auto [m, rep] = build_model(toy(IntegrationStrategy::kDualP0P3));
  const TeacherSpec& t = teacher_preset("toy-tiny");
  const int64_t expected = 2 * teacher_trunk_params(t) + teacher_entry_params(t, TeacherEntry::kImage, 64 / 8) +
                           teacher_entry_params(t, TeacherEntry::kTokens, 64 / 8);
  EXPECT_EQ(rep.frozen, expected);
}

TEST(Detector, BuildIsDeterministic) {
  DetectionModel a(toy(IntegrationStrategy::kTriple)), b(toy(IntegrationStrategy::kTriple));
  ASSERT_EQ(a.params().all().size(), b.params().all().size());
  for (size_t i = 0; i < a.params().all().size(); ++i) {
    EXPECT_EQ(a.params().all()[i].var.value(), b.params().all()[i].var.value());
  }
}

TEST(Detector, ZeroGatesMatchBaseline) {
  DetectionModel base(toy(IntegrationStrategy::kNone));
  const nn::Var img(random_images(2, 64, 13));
  const auto ref = base.forward(img);
  for (IntegrationStrategy s : all_strategies()) {
    if (s == IntegrationStrategy::kNone) continue;
    DetectionModel m(toy(s));
    m.set_gates(0.5f);
    m.set_gates(0.0f);
    const auto out = m.forward(img);
    for (size_t l = 0; l < 3; ++l) EXPECT_LE(max_rel_diff(out.levels[l].value(), ref.levels[l].value()), 1e-6);
  }
}

TEST(Detector, NonzeroGatesChangeOutputs) {
  DetectionModel base(toy(IntegrationStrategy::kNone));
  DetectionModel m(toy(IntegrationStrategy::kSingleP3));
  m.set_gates(1.0f);
  const nn::Var img(random_images(1, 64, 14));
  EXPECT_NE(m.forward(img).levels[0].value(), base.forward(img).levels[0].value());
}

TEST(Detector, SizeMismatchAndBadConfig) {
  DetectionModel m(toy(IntegrationStrategy::kNone));
  EXPECT_THROW(m.forward(nn::Var(Tensor<float>({1, 3, 32, 32}))), ShapeError);
  ModelConfig c = toy(IntegrationStrategy::kSingleP0);
  c.input_size = 48;
  EXPECT_THROW(DetectionModel{c}, ConfigError);
  c.input_size = 64;
  c.teacher = "vitz";
  EXPECT_THROW(DetectionModel{c}, ConfigError);
}

TEST(Detector, ModelNames) {
  EXPECT_EQ(toy(IntegrationStrategy::kNone).name(), "S-baseline");
  EXPECT_EQ(toy(IntegrationStrategy::kDualP0P3).name(), "S-toy-tiny-dualp0p3");
  ModelConfig c = toy(IntegrationStrategy::kTriple);
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
}

TEST(Decode, Examples) {
  std::array<int64_t, 3> sides{8, 4, 2};
  PyramidPrediction p;
  for (size_t l = 0; l < 3; ++l) p.levels[l] = nn::Var(Tensor<float>({1, 7, sides[l], sides[l]}, -30.0f));
  EXPECT_TRUE(decode(p, 0.001)[0].empty());

  // Cell (0,0) of the 8x8 level with tx = ty = 0 and a confident object.
  Tensor<float>& t = p.levels[0].mutable_value();
  const int64_t plane = 64;
  t[0] = 0.0f;
  t[plane] = 0.0f;
  t[2 * plane] = 0.0f;
  t[3 * plane] = 0.0f;
  t[4 * plane] = 30.0f;
  t[5 * plane] = 30.0f;
  const auto boxes = decode(p, 0.5)[0];
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_EQ(boxes[0].cls, 0);
  // The box is clipped at the image corner, so recover the center from its clipped edges.
  EXPECT_NEAR(boxes[0].cx + boxes[0].w / 2, 0.0625 + level_size_base(8) / 2, 1e-9);
}

TEST(Decode, BoxesStayInUnitSquare) {
  DetectionModel m(toy(IntegrationStrategy::kNone));
  PyramidPrediction p = m.forward(nn::Var(random_images(2, 64, 15)));
  for (auto& level : p.levels) {
    std::mt19937_64 rng(16);
    std::normal_distribution<float> nd(0.0f, 5.0f);
    for (float& v : level.mutable_value().data()) v = nd(rng);
  }
  for (const auto& image : decode(p, 0.0)) {
    for (const DetectionBox& b : image) {
      EXPECT_GE(b.cx - b.w / 2, -1e-12);
      EXPECT_LE(b.cx + b.w / 2, 1 + 1e-12);
      EXPECT_GE(b.cy - b.h / 2, -1e-12);
      EXPECT_LE(b.cy + b.h / 2, 1 + 1e-12);
      EXPECT_GE(b.confidence, 0.0);
      EXPECT_LE(b.confidence, 1.0);
    }
  }
}
