#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dinoyolo/harness.h"

using namespace dinoyolo;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dinoyolo_harness_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::filesystem::path write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream(path) << text;
  return path;
}

std::string parse_error(const std::string& text) {
  const auto path = write_text(fresh_dir("labels") / "x.txt", text);
  try {
    parse_label_file(path, 2);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

RunConfig tiny_run() {
  RunConfig r = default_run_config();
  r.train.epochs = 1;
  r.train.batch_size = 4;
  r.bench_warmup = 0;
  r.bench_runs = 3;
  return r;
}

Dataset tiny_set(int count, uint64_t seed) {
  DatasetSpec spec;
  spec.count = count;
  spec.seed = seed;
  return gen_synthetic_dataset(spec);
}

}  // namespace

TEST(Synthetic, DeterministicPerSeed) {
  DatasetSpec spec;
  spec.count = 5;
  spec.seed = 11;
  const Dataset a = gen_synthetic_dataset(spec), b = gen_synthetic_dataset(spec);
  ASSERT_EQ(a.size(), 5u);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].boxes, b.samples[i].boxes);
  }
  EXPECT_EQ(a.samples[3].name, "synth_00003");
  spec.seed = 12;
  EXPECT_NE(gen_synthetic_dataset(spec).samples[0].image, a.samples[0].image);
}

TEST(Synthetic, LabelsAreValidAndInRange) {
  DatasetSpec spec;
  spec.count = 40;
  spec.num_classes = 3;
  SyntheticStats stats;
  const Dataset d = gen_synthetic_dataset(spec, &stats);
  for (const Sample& s : d.samples) {
    EXPECT_GE(s.boxes.size(), 1u);
    EXPECT_LE(s.boxes.size(), 3u);
    for (const auto& b : s.boxes) {
      EXPECT_FALSE(box_violation(b, 3)) << s.name;
      EXPECT_GE(b.w * 64, 16 - 1e-9);
      EXPECT_LE(b.w * 64, 28 + 1e-9);
    }
    for (float v : s.image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_GE(stats.regenerated, 0);
}

TEST(Synthetic, NoObjectsGivesEmptyLabels) {
  DatasetSpec spec;
  spec.count = 3;
  spec.min_objects = 0;
  spec.max_objects = 0;
  for (const Sample& s : gen_synthetic_dataset(spec).samples) EXPECT_TRUE(s.boxes.empty());
}

TEST(Synthetic, SquareLabelIsExact) {
  Tensor<float> centered({3, 64, 64});
  EXPECT_EQ(draw_shape(centered, {0, 24, 24, 16}, {1, 1, 1}), (GroundTruthBox{0, 0.5, 0.5, 0.25, 0.25}));
  Tensor<float> img({3, 64, 64});
  const GroundTruthBox b = draw_shape(img, {0, 8, 8, 16}, {1, 1, 1});
  EXPECT_EQ(b, (GroundTruthBox{0, 0.25, 0.25, 0.25, 0.25}));
  EXPECT_EQ(img[8 * 64 + 8], 1.0f);
  EXPECT_EQ(img[23 * 64 + 23], 1.0f);
  EXPECT_EQ(img[24 * 64 + 24], 0.0f);
  EXPECT_THROW(draw_shape(img, {1, 56, 0, 16}, {1, 1, 1}), DataError);
}

TEST(Synthetic, RejectsBadSpec) {
  DatasetSpec spec;
  spec.image_side = 48;
  EXPECT_THROW(gen_synthetic_dataset(spec), ConfigError);
  spec = {};
  spec.num_classes = 4;
  EXPECT_THROW(gen_synthetic_dataset(spec), ConfigError);
}

TEST(Labels, ParseErrorsNameLineAndField) {
  EXPECT_EQ(parse_error("0 0.5 0.5 0.2 0.2\n"), "");
  const std::string range = parse_error("0 0.5 0.5 0.2 0.2\n1 0.5 0.5 1.5 0.2\n");
  EXPECT_NE(range.find("x.txt:2:"), std::string::npos) << range;
  EXPECT_NE(range.find("field w ('1.5')"), std::string::npos) << range;
  const std::string token = parse_error("0 0.5 0.5 abc 0.2\n");
  EXPECT_NE(token.find("bad w token 'abc'"), std::string::npos) << token;
  EXPECT_NE(parse_error("2 0.5 0.5 0.2 0.2\n").find("field class"), std::string::npos);
  EXPECT_NE(parse_error("0 0.5 0.5 0.2\n").find("expected 5 fields"), std::string::npos);
  EXPECT_EQ(parse_error(""), "");
  const auto three = write_text(fresh_dir("labels3") / "y.txt", "2 0.5 0.5 1.5 0.2\n");
  try {
    parse_label_file(three, 3);
    ADD_FAILURE() << "expected a range error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("field w"), std::string::npos) << e.what();
  }
  const auto one = write_text(fresh_dir("labels1") / "z.txt", "0 0.5 0.5 0.25 0.25\n");
  EXPECT_EQ(parse_label_file(one, 2), (std::vector<GroundTruthBox>{{0, 0.5, 0.5, 0.25, 0.25}}));
  // A box poking past the right edge is reported against its width.
  EXPECT_NE(parse_error("0 0.9 0.5 0.4 0.2\n").find("field w"), std::string::npos);
}

TEST(Labels, DatasetRoundTripThroughFiles) {
  DatasetSpec spec;
  spec.count = 4;
  spec.seed = 3;
  const Dataset d = gen_synthetic_dataset(spec);
  const auto root = fresh_dir("roundtrip");
  save_dataset(d, root);
  DatasetSpec dir;
  dir.source = DatasetSpec::Source::kDirectory;
  dir.images_dir = root / "images";
  dir.labels_dir = root / "labels";
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.size(), d.size());
  EXPECT_EQ(back.image_side, 64);
  for (size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.samples[i].name, d.samples[i].name);
    EXPECT_EQ(back.samples[i].image, d.samples[i].image);
    EXPECT_EQ(back.samples[i].boxes, d.samples[i].boxes);
  }
  std::filesystem::remove(root / "images" / "synth_00001.ppm");
  EXPECT_THROW(load_dataset(dir), DataError);
  std::filesystem::remove_all(root);
}

TEST(RunConfig, JsonOverridesAndRoundTrip) {
  const RunConfig base = default_run_config();
  EXPECT_EQ(base.model.scale, "S");
  EXPECT_EQ(base.train.epochs, 300);
  const RunConfig c = apply_run_config(
      base, nlohmann::json::parse(R"({"strategy": "dualp0p3", "lr": 0.05, "epochs": 7, "lambda_obj": 3.5,
                                       "train_count": 12, "conf_threshold": 0.01, "runs": 4})"));
  EXPECT_EQ(c.model.strategy, IntegrationStrategy::kDualP0P3);
  EXPECT_EQ(c.train.learning_rate, 0.05);
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.train.weights.obj, 3.5);
  EXPECT_EQ(c.train_data.count, 12);
  EXPECT_EQ(c.eval.conf_threshold, 0.01);
  EXPECT_EQ(c.bench_runs, 4);
  EXPECT_EQ(run_config_to_json(apply_run_config(base, run_config_to_json(c))), run_config_to_json(c));
  EXPECT_THROW(apply_run_config(base, nlohmann::json::parse(R"({"learning_rate": 0.1})")), ConfigError);
  EXPECT_THROW(apply_run_config(base, nlohmann::json::parse(R"({"epochs": "ten"})")), ConfigError);
  EXPECT_THROW(apply_run_config(base, nlohmann::json::parse(R"({"strategy": "quad"})")), ConfigError);
}

TEST(Csv, DeltaMatchesReferenceTriples) {
  EXPECT_NEAR(*delta_percent(0.5308, 0.4539), 16.9, 0.1);
  EXPECT_NEAR(*delta_percent(0.3270, 0.4539), -27.9, 0.1);
  EXPECT_NEAR(*delta_percent(0.5577, 0.4904), 13.7, 0.1);
  EXPECT_NEAR(*delta_percent(0.5363, 0.4854), 10.5, 0.1);
  EXPECT_NEAR(*delta_percent(0.2878, 0.4539), -36.6, 0.1);
}

TEST(Csv, DeltaPercent) {
  EXPECT_NEAR(*delta_percent(0.6, 0.5), 20.0, 1e-12);
  EXPECT_NEAR(*delta_percent(0.3, 0.6), -50.0, 1e-12);
  EXPECT_NEAR(*delta_percent(0.5, 0.5), 0.0, 1e-12);
  EXPECT_FALSE(delta_percent(0.4, 0.0));
  EXPECT_FALSE(delta_percent(std::nullopt, 0.5));
  EXPECT_FALSE(delta_percent(0.5, std::nullopt));
}

TEST(Csv, RoundTripPreservesRecords) {
  ExperimentRecord ok{"S-toy-tiny-singlep3", "S", "toy-tiny", "singlep3", 0.8123456789012345, 0.41,
                      1.25, 800.0, 1000, 600, 400, -2.5, "ok"};
  ExperimentRecord bad;
  bad.name = "S-toy-tiny-triple";
  bad.scale = "S";
  bad.teacher = "toy-tiny";
  bad.strategy = "triple";
  bad.total_params = 5;
  bad.status = "error: non-finite loss";
  const std::string text = format_csv({ok, bad});
  EXPECT_EQ(text.substr(0, text.find('\n')), kCsvHeader);
  EXPECT_EQ(parse_csv(text), (std::vector<ExperimentRecord>{ok, bad}));

  bad.status = "error: a, b";
  const auto back = parse_csv(format_csv({bad}));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].status, "error: a; b");
  EXPECT_THROW(parse_csv("name,scale\n"), DataError);
}

TEST(Csv, HistoryFormat) {
  EpochRecord r;
  r.epoch = 1;
  r.loss = 0.5;
  r.collisions = 2;
  const std::string text = format_history_csv({r});
  EXPECT_EQ(text, "epoch,loss,box,obj,cls,collisions,val_map50\n1,0.5,0,0,0,2,\n");
}

TEST(Ablation, OrderingDeltaAndFailureRow) {
  AblationSpec spec;
  spec.scales = {"S"};
  spec.teachers = {"toy-tiny", "toy-small"};
  spec.strategies = {IntegrationStrategy::kNone, IntegrationStrategy::kSingleP3};
  spec.run = tiny_run();
  spec.inject_failure = {"S-toy-small-singlep3"};
  std::vector<std::string> seen;
  spec.on_record = [&](const ExperimentRecord& r) { seen.push_back(r.name); };
  const auto csv = fresh_dir("ablation") / "out.csv";
  const auto rows = run_ablation(spec, tiny_set(4, 1), tiny_set(4, 2), csv);

  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].name, "S-baseline");
  EXPECT_EQ(rows[0].teacher, "none");
  EXPECT_EQ(rows[1].name, "S-toy-tiny-singlep3");
  EXPECT_EQ(rows[2].name, "S-toy-small-singlep3");
  EXPECT_EQ(seen, (std::vector<std::string>{"S-baseline", "S-toy-tiny-singlep3", "S-toy-small-singlep3"}));

  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_EQ(rows[0].frozen_params, 0);
  if (rows[0].map50 && *rows[0].map50 > 0) EXPECT_EQ(*rows[0].delta_pct, 0.0);
  EXPECT_EQ(rows[1].status, "ok");
  EXPECT_GT(rows[1].frozen_params, 0);
  EXPECT_EQ(rows[1].total_params, rows[1].trainable_params + rows[1].frozen_params);
  EXPECT_TRUE(rows[1].fps);

  EXPECT_EQ(rows[2].status.rfind("error: ", 0), 0u) << rows[2].status;
  EXPECT_NE(rows[2].status.find("learning rate"), std::string::npos) << rows[2].status;
  EXPECT_FALSE(rows[2].map50);
  EXPECT_FALSE(rows[2].delta_pct);
  EXPECT_GT(rows[2].total_params, 0);

  std::ifstream in(csv);
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  EXPECT_EQ(parse_csv(text), rows);
}

TEST(Ablation, RequiresBaseline) {
  AblationSpec spec;
  spec.scales = {"S"};
  spec.teachers = {"toy-tiny"};
  spec.strategies = {IntegrationStrategy::kSingleP3};
  spec.run = tiny_run();
  EXPECT_THROW(run_ablation(spec, tiny_set(2, 1), tiny_set(2, 2)), ConfigError);
  spec.strategies.clear();
  EXPECT_THROW(run_ablation(spec, tiny_set(2, 1), tiny_set(2, 2)), ConfigError);
}
