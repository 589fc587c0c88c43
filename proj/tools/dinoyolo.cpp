#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dinoyolo/harness.h"

using namespace dinoyolo;
namespace fs = std::filesystem;

namespace {

/// Config file plus per-key overrides shared by every subcommand.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  nlohmann::json overrides = nlohmann::json::object();

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override one config key, e.g. --set epochs=20 (value parsed as JSON)");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? default_run_config() : load_run_config(config_path);
    nlohmann::json j = overrides;
    for (const std::string& kv : sets) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      j[key] = nlohmann::json::accept(value) ? nlohmann::json::parse(value) : nlohmann::json(value);
    }
    return apply_run_config(c, j);
  }
};

/// Binds a flag straight to a config key.
template <typename V>
void key_flag(CLI::App* app, ConfigFlags& flags, const std::string& flag, const std::string& key,
              const std::string& help) {
  app->add_option_function<V>(flag, [&flags, key](const V& v) { flags.overrides[key] = v; }, help);
}

void model_flags(CLI::App* app, ConfigFlags& flags) {
  key_flag<std::string>(app, flags, "--scale", "scale", "Detector scale (S, M, L, L-full)");
  key_flag<std::string>(app, flags, "--teacher", "teacher", "Teacher variant");
  key_flag<std::string>(app, flags, "--strategy", "strategy", "Integration strategy");
  key_flag<int64_t>(app, flags, "--input-size", "input_size", "Input side in pixels");
  key_flag<int>(app, flags, "--num-classes", "num_classes", "Number of classes");
  key_flag<uint64_t>(app, flags, "--model-seed", "model_seed", "Weight initialization seed");
}

void data_flags(CLI::App* app, ConfigFlags& flags) {
  key_flag<std::string>(app, flags, "--images", "val_images_dir", "Evaluation images directory");
  key_flag<std::string>(app, flags, "--labels", "val_labels_dir", "Evaluation labels directory");
}

void print_report(const ParamReport& r) {
  std::printf("total_params     %lld\n", static_cast<long long>(r.total));
  std::printf("trainable_params %lld\n", static_cast<long long>(r.trainable));
  std::printf("frozen_params    %lld\n", static_cast<long long>(r.frozen));
  std::printf("trainable_pct    %.2f\n", r.trainable_fraction * 100.0);
}

void print_map(const MapResult& m) {
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("absent"); };
  std::cout << "map50    " << opt(m.map50) << "\n";
  std::cout << "map50_95 " << opt(m.map5095) << "\n";
  for (const ClassAP& c : m.per_class) {
    std::printf("class %d  gt %lld  ap50 %.6f  ap50_95 %.6f\n", c.cls, static_cast<long long>(c.gt_count), c.ap50,
                c.ap_mean);
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << text;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy DINO-YOLO: synthetic data, training, evaluation and ablations"};
  app.require_subcommand(1);

  // gen-data
  ConfigFlags gen_flags;
  std::string gen_out;
  bool gen_val = false;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as PPM images and label files");
  gen_flags.add_to(gen);
  gen->add_option("--out", gen_out, "Output root (images/ and labels/)")->required();
  gen->add_flag("--val", gen_val, "Write the validation split instead of the training split");
  key_flag<uint64_t>(gen, gen_flags, "--seed", "data_seed", "Training split seed");
  key_flag<int>(gen, gen_flags, "--count", "train_count", "Training split size");

  // train
  ConfigFlags train_flags;
  std::string train_out, train_history;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint and history CSV");
  train_flags.add_to(train_cmd);
  model_flags(train_cmd, train_flags);
  key_flag<int>(train_cmd, train_flags, "--epochs", "epochs", "Training epochs");
  key_flag<double>(train_cmd, train_flags, "--lr", "lr", "Learning rate");
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--history", train_history, "History CSV path (default: <out>.history.csv)");

  // eval
  ConfigFlags eval_flags;
  std::string eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the validation data");
  eval_flags.add_to(eval_cmd);
  data_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required()->check(CLI::ExistingFile);

  // bench
  ConfigFlags bench_flags;
  std::string bench_ckpt;
  auto* bench = app.add_subcommand("bench", "Time single-image inference");
  bench_flags.add_to(bench);
  model_flags(bench, bench_flags);
  key_flag<int>(bench, bench_flags, "--warmup", "warmup", "Untimed warmup runs");
  key_flag<int>(bench, bench_flags, "--runs", "runs", "Timed runs");
  bench->add_option("--checkpoint", bench_ckpt, "Checkpoint path (default: a fresh model from the config)")
      ->check(CLI::ExistingFile);

  // params
  ConfigFlags params_flags;
  std::string params_ckpt;
  auto* params = app.add_subcommand("params", "Report total, trainable and frozen parameter counts");
  params_flags.add_to(params);
  model_flags(params, params_flags);
  params->add_option("--checkpoint", params_ckpt, "Checkpoint path (default: the configured model)")
      ->check(CLI::ExistingFile);

  // ablate
  ConfigFlags ablate_flags;
  std::string ablate_scales = "S", ablate_teachers = "toy-tiny", ablate_strategies, ablate_out, ablate_fail;
  auto* ablate = app.add_subcommand("ablate", "Run a scale x teacher x strategy matrix into a CSV");
  ablate_flags.add_to(ablate);
  ablate->add_option("--scales", ablate_scales, "Comma-separated scales");
  ablate->add_option("--teachers", ablate_teachers, "Comma-separated teacher variants");
  ablate->add_option("--strategies", ablate_strategies, "Comma-separated strategies, including none")->required();
  ablate->add_option("--out", ablate_out, "Result CSV path")->required();
  ablate->add_option("--inject-failure", ablate_fail, "Comma-separated cell names forced to fail");
  key_flag<int>(ablate, ablate_flags, "--epochs", "epochs", "Training epochs per cell");

  // dump-features
  ConfigFlags dump_flags;
  std::string dump_ckpt, dump_image, dump_site, dump_out;
  bool dump_color = false;
  auto* dump = app.add_subcommand("dump-features", "Export one feature site of one image as PGM/PPM files");
  dump_flags.add_to(dump);
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint path")->required()->check(CLI::ExistingFile);
  dump->add_option("--image", dump_image, "Input PPM image")->required()->check(CLI::ExistingFile);
  dump->add_option("--site", dump_site, "P0-out, P3-pre, P3-post, P4 or P5")->required();
  dump->add_option("--out", dump_out, "Output directory")->required();
  dump->add_flag("--color", dump_color, "Also write a pseudocolor PPM of the channel mean");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const RunConfig c = gen_flags.resolve();
      SyntheticStats stats;
      const Dataset d = gen_synthetic_dataset(gen_val ? c.val_data : c.train_data, &stats);
      save_dataset(d, gen_out);
      std::printf("wrote %zu samples to %s (%d regenerated)\n", d.size(), gen_out.c_str(), stats.regenerated);
    } else if (*train_cmd) {
      const RunConfig c = train_flags.resolve();
      const Dataset train_set = load_dataset(c.train_data), val_set = load_dataset(c.val_data);
      DetectionModel model(c.model);
      TrainHooks hooks;
      hooks.after_epoch = [](const EpochRecord& r) {
        std::fprintf(stderr, "epoch %d loss %.5f box %.5f obj %.5f cls %.5f", r.epoch, r.loss, r.box, r.obj, r.cls);
        if (r.val_map50) std::fprintf(stderr, " val_map50 %.4f", *r.val_map50);
        std::fprintf(stderr, "\n");
      };
      const TrainResult r = train(model, train_set, c.train, &val_set, hooks);
      save_checkpoint(model, train_out, r.steps);
      const std::string history = train_history.empty() ? train_out + ".history.csv" : train_history;
      write_text(history, format_history_csv(r.history));
      std::printf("%s: %lld steps, checkpoint %s, history %s\n", c.model.name().c_str(),
                  static_cast<long long>(r.steps), train_out.c_str(), history.c_str());
      if (!r.history.empty() && r.history.back().val_map50) {
        std::printf("final val_map50 %.17g\n", *r.history.back().val_map50);
      }
    } else if (*eval_cmd) {
      const RunConfig c = eval_flags.resolve();
      const LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
      const Dataset val_set = load_dataset(c.val_data);
      const MapResult m = evaluate_model(*ck.model, val_set, c.eval);
      print_map(m);
      if (m.map50) std::printf("map50_exact %.17g\n", *m.map50);
    } else if (*bench) {
      const RunConfig c = bench_flags.resolve();
      std::unique_ptr<DetectionModel> model =
          bench_ckpt.empty() ? std::make_unique<DetectionModel>(c.model) : load_checkpoint(bench_ckpt).model;
      const LatencyReport r = latency_bench(*model, c.bench_warmup, c.bench_runs);
      std::printf("%s warmup %d runs %d mean_ms %.4f std_ms %.4f fps %.2f\n", model->config().name().c_str(),
                  r.warmup, r.runs, r.mean_ms, r.std_ms, r.fps);
    } else if (*params) {
      if (!params_ckpt.empty()) {
        const LoadedCheckpoint ck = load_checkpoint(params_ckpt);
        std::printf("%s\n", ck.model->config().name().c_str());
        print_report(param_report(*ck.model));
      } else {
        const RunConfig c = params_flags.resolve();
        const auto built = build_model(c.model, /*materialize=*/false);
        std::printf("%s\n", c.model.name().c_str());
        print_report(built.second);
      }
    } else if (*ablate) {
      const RunConfig c = ablate_flags.resolve();
      AblationSpec spec;
      spec.scales = split_list(ablate_scales);
      spec.teachers = split_list(ablate_teachers);
      for (const std::string& s : split_list(ablate_strategies)) spec.strategies.push_back(parse_strategy(s));
      if (spec.strategies.empty() || spec.scales.empty() || spec.teachers.empty()) {
        std::cerr << "usage error: ablate needs at least one scale, teacher and strategy\n" << ablate->help();
        return 2;
      }
      spec.run = c;
      spec.inject_failure = split_list(ablate_fail);
      spec.on_record = [](const ExperimentRecord& r) {
        std::fprintf(stderr, "%s: %s\n", r.name.c_str(), r.status.c_str());
      };
      const Dataset train_set = load_dataset(c.train_data), val_set = load_dataset(c.val_data);
      const auto rows = run_ablation(spec, train_set, val_set, fs::path(ablate_out));
      std::printf("wrote %zu rows to %s\n", rows.size(), ablate_out.c_str());
    } else if (*dump) {
      const LoadedCheckpoint ck = load_checkpoint(dump_ckpt);
      Tensor<float> image = read_ppm(dump_image);
      const int64_t side = ck.model->config().input_size;
      if (image.dim(1) != side || image.dim(2) != side) {
        throw ShapeError("image is " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(1)) +
                         ", model expects " + std::to_string(side) + "x" + std::to_string(side));
      }
      const auto written = export_feature_maps(*ck.model, image, dump_site, dump_out, dump_color);
      std::printf("wrote %zu files to %s\n", written.size(), dump_out.c_str());
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}
