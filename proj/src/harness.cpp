#include "dinoyolo/harness.h"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace dinoyolo {
namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string clean_cell(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  }
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_opt(const std::string& cell, const std::string& field, int line) {
  if (cell.empty()) return std::nullopt;
  try {
    size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw DataError("csv line " + std::to_string(line) + ": bad " + field + " value '" + cell + "'");
  }
}

int64_t parse_int(const std::string& cell, const std::string& field, int line) {
  try {
    size_t used = 0;
    const int64_t v = std::stoll(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw DataError("csv line " + std::to_string(line) + ": bad " + field + " value '" + cell + "'");
  }
}

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.model.scale = "S";
  c.model.teacher = "toy-tiny";
  c.model.input_size = 64;
  c.model.num_classes = 2;
  c.train.learning_rate = 0.02;
  c.train.grad_clip = 20.0;
  c.train.epochs = 300;
  c.train.batch_size = 16;
  c.train.weights = {5.0, 20.0, 5.0};
  c.train.t_small = 0.31;
  c.train.t_med = 0.37;
  c.train_data.count = 200;
  c.train_data.seed = 1;
  c.val_data = c.train_data;
  c.val_data.count = 50;
  c.val_data.seed = 2;
  return c;
}

RunConfig apply_run_config(RunConfig c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> kKeys{
      "scale",        "teacher",      "strategy",     "num_classes", "input_size",     "model_seed",
      "p0_mode",      "share_teacher", "lr",          "grad_clip",          "momentum",    "linear_decay",   "epochs",
      "batch_size",   "lambda_box",   "lambda_obj",   "lambda_cls",  "train_seed",     "t_small",
      "t_med",        "eval_every",   "target_map50", "data_seed",   "val_seed",       "train_count",
      "val_count",    "min_objects",  "max_objects",  "min_size",    "max_size",       "images_dir",
      "labels_dir",   "val_images_dir", "val_labels_dir", "conf_threshold", "nms_iou", "warmup",
      "runs"};
  for (const auto& [key, value] : j.items()) {
    if (!kKeys.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  read_key(j, "scale", c.model.scale);
  read_key(j, "teacher", c.model.teacher);
  if (j.contains("strategy")) {
    std::string s;
    read_key(j, "strategy", s);
    c.model.strategy = parse_strategy(s);
  }
  read_key(j, "num_classes", c.model.num_classes);
  read_key(j, "input_size", c.model.input_size);
  read_key(j, "model_seed", c.model.seed);
  if (j.contains("p0_mode")) {
    std::string m;
    read_key(j, "p0_mode", m);
    if (m != "residual" && m != "replace") throw ConfigError("p0_mode must be residual or replace");
    c.model.p0_mode = m == "residual" ? P0Mode::kResidual : P0Mode::kReplace;
  }
  read_key(j, "share_teacher", c.model.share_teacher);
  read_key(j, "lr", c.train.learning_rate);
  read_key(j, "momentum", c.train.momentum);
  read_key(j, "linear_decay", c.train.linear_decay);
  read_key(j, "grad_clip", c.train.grad_clip);
  read_key(j, "epochs", c.train.epochs);
  read_key(j, "batch_size", c.train.batch_size);
  read_key(j, "lambda_box", c.train.weights.box);
  read_key(j, "lambda_obj", c.train.weights.obj);
  read_key(j, "lambda_cls", c.train.weights.cls);
  read_key(j, "train_seed", c.train.seed);
  read_key(j, "t_small", c.train.t_small);
  read_key(j, "t_med", c.train.t_med);
  read_key(j, "eval_every", c.train.eval_every);
  if (j.contains("target_map50")) {
    if (j.at("target_map50").is_null()) {
      c.train.target_map50.reset();
    } else {
      double t = 0;
      read_key(j, "target_map50", t);
      c.train.target_map50 = t;
    }
  }
  read_key(j, "data_seed", c.train_data.seed);
  read_key(j, "val_seed", c.val_data.seed);
  read_key(j, "train_count", c.train_data.count);
  read_key(j, "val_count", c.val_data.count);
  for (DatasetSpec* d : {&c.train_data, &c.val_data}) {
    read_key(j, "min_objects", d->min_objects);
    read_key(j, "max_objects", d->max_objects);
    read_key(j, "min_size", d->min_size);
    read_key(j, "max_size", d->max_size);
    d->image_side = c.model.input_size;
    d->num_classes = c.model.num_classes;
  }
  if (j.contains("images_dir") || j.contains("labels_dir")) {
    c.train_data.source = DatasetSpec::Source::kDirectory;
    read_key(j, "images_dir", c.train_data.images_dir);
    read_key(j, "labels_dir", c.train_data.labels_dir);
  }
  if (j.contains("val_images_dir") || j.contains("val_labels_dir")) {
    c.val_data.source = DatasetSpec::Source::kDirectory;
    read_key(j, "val_images_dir", c.val_data.images_dir);
    read_key(j, "val_labels_dir", c.val_data.labels_dir);
  }
  read_key(j, "conf_threshold", c.eval.conf_threshold);
  read_key(j, "nms_iou", c.eval.nms_iou);
  read_key(j, "warmup", c.bench_warmup);
  read_key(j, "runs", c.bench_runs);
  c.train.eval = c.eval;
  c.model.validate();
  c.train.validate();
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j{{"scale", c.model.scale},
                   {"teacher", c.model.teacher},
                   {"strategy", to_string(c.model.strategy)},
                   {"num_classes", c.model.num_classes},
                   {"input_size", c.model.input_size},
                   {"model_seed", c.model.seed},
                   {"p0_mode", c.model.p0_mode == P0Mode::kResidual ? "residual" : "replace"},
                   {"share_teacher", c.model.share_teacher},
                   {"lr", c.train.learning_rate},
                   {"momentum", c.train.momentum},
                   {"linear_decay", c.train.linear_decay},
                   {"grad_clip", c.train.grad_clip},
                   {"epochs", c.train.epochs},
                   {"batch_size", c.train.batch_size},
                   {"lambda_box", c.train.weights.box},
                   {"lambda_obj", c.train.weights.obj},
                   {"lambda_cls", c.train.weights.cls},
                   {"train_seed", c.train.seed},
                   {"t_small", c.train.t_small},
                   {"t_med", c.train.t_med},
                   {"eval_every", c.train.eval_every},
                   {"data_seed", c.train_data.seed},
                   {"val_seed", c.val_data.seed},
                   {"train_count", c.train_data.count},
                   {"val_count", c.val_data.count},
                   {"min_objects", c.train_data.min_objects},
                   {"max_objects", c.train_data.max_objects},
                   {"min_size", c.train_data.min_size},
                   {"max_size", c.train_data.max_size},
                   {"conf_threshold", c.eval.conf_threshold},
                   {"nms_iou", c.eval.nms_iou},
                   {"warmup", c.bench_warmup},
                   {"runs", c.bench_runs}};
  j["target_map50"] = c.train.target_map50 ? nlohmann::json(*c.train.target_map50) : nlohmann::json(nullptr);
  if (c.train_data.source == DatasetSpec::Source::kDirectory) {
    j["images_dir"] = c.train_data.images_dir.string();
    j["labels_dir"] = c.train_data.labels_dir.string();
  }
  if (c.val_data.source == DatasetSpec::Source::kDirectory) {
    j["val_images_dir"] = c.val_data.images_dir.string();
    j["val_labels_dir"] = c.val_data.labels_dir.string();
  }
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return apply_run_config(default_run_config(), j);
}

std::optional<double> delta_percent(std::optional<double> map50, std::optional<double> baseline_map50) {
  if (!map50 || !baseline_map50 || *baseline_map50 == 0.0) return std::nullopt;
  return (*map50 - *baseline_map50) / *baseline_map50 * 100.0;
}

std::string format_csv(const std::vector<ExperimentRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const ExperimentRecord& r : records) {
    out += clean_cell(r.name) + "," + clean_cell(r.scale) + "," + clean_cell(r.teacher) + "," + clean_cell(r.strategy) +
           "," + fmt(r.map50) + "," + fmt(r.map5095) + "," + fmt(r.latency_ms) + "," + fmt(r.fps) + "," +
           std::to_string(r.total_params) + "," + std::to_string(r.trainable_params) + "," +
           std::to_string(r.frozen_params) + "," + fmt(r.delta_pct) + "," + clean_cell(r.status) + "\n";
  }
  return out;
}

std::vector<ExperimentRecord> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw DataError("csv line 1: unexpected header");
  std::vector<ExperimentRecord> records;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 13) {
      throw DataError("csv line " + std::to_string(lineno) + ": expected 13 cells, got " + std::to_string(cells.size()));
    }
    ExperimentRecord r;
    r.name = cells[0];
    r.scale = cells[1];
    r.teacher = cells[2];
    r.strategy = cells[3];
    r.map50 = parse_opt(cells[4], "map50", lineno);
    r.map5095 = parse_opt(cells[5], "map5095", lineno);
    r.latency_ms = parse_opt(cells[6], "latency_ms", lineno);
    r.fps = parse_opt(cells[7], "fps", lineno);
    r.total_params = parse_int(cells[8], "total_params", lineno);
    r.trainable_params = parse_int(cells[9], "trainable_params", lineno);
    r.frozen_params = parse_int(cells[10], "frozen_params", lineno);
    r.delta_pct = parse_opt(cells[11], "delta_pct", lineno);
    r.status = cells[12];
    records.push_back(r);
  }
  return records;
}

void write_csv(const std::filesystem::path& path, const std::vector<ExperimentRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << format_csv(records);
}

std::vector<ExperimentRecord> run_ablation(const AblationSpec& spec, const Dataset& train_set, const Dataset& val_set,
                                           const std::optional<std::filesystem::path>& out_csv) {
  if (spec.scales.empty() || spec.teachers.empty() || spec.strategies.empty()) {
    throw ConfigError("ablation needs at least one scale, teacher and strategy");
  }
  if (std::find(spec.strategies.begin(), spec.strategies.end(), IntegrationStrategy::kNone) == spec.strategies.end()) {
    throw ConfigError("ablation strategies must include none (the baseline for delta)");
  }
  std::vector<ExperimentRecord> records;
  for (const std::string& scale : spec.scales) {
    const size_t first = records.size();
    for (IntegrationStrategy strategy : spec.strategies) {
      const std::vector<std::string> teachers =
          strategy == IntegrationStrategy::kNone ? std::vector<std::string>{spec.teachers.front()} : spec.teachers;
      for (const std::string& teacher : teachers) {
        ModelConfig mc = spec.run.model;
        mc.scale = scale;
        mc.teacher = teacher;
        mc.strategy = strategy;
        ExperimentRecord rec;
        rec.name = mc.name();
        rec.scale = scale;
        rec.teacher = strategy == IntegrationStrategy::kNone ? "none" : teacher;
        rec.strategy = to_string(strategy);
        try {
          auto [model, report] = build_model(mc);
          rec.total_params = report.total;
          rec.trainable_params = report.trainable;
          rec.frozen_params = report.frozen;
          TrainConfig tc = spec.run.train;
          if (std::find(spec.inject_failure.begin(), spec.inject_failure.end(), rec.name) != spec.inject_failure.end()) {
            tc.learning_rate = std::nan("");
          }
          tc.eval_every = 0;
          tc.target_map50.reset();
          train(*model, train_set, tc);
          const MapResult m = evaluate_model(*model, val_set, spec.run.eval);
          rec.map50 = m.map50;
          rec.map5095 = m.map5095;
          const LatencyReport lat = latency_bench(*model, spec.run.bench_warmup, spec.run.bench_runs);
          rec.latency_ms = lat.mean_ms;
          rec.fps = lat.fps;
        } catch (const std::exception& e) {
          rec.map50.reset();
          rec.map5095.reset();
          rec.status = std::string("error: ") + e.what();
        }
        records.push_back(rec);
      }
    }
    std::optional<double> baseline;
    for (size_t i = first; i < records.size(); ++i) {
      if (records[i].strategy == to_string(IntegrationStrategy::kNone)) baseline = records[i].map50;
    }
    for (size_t i = first; i < records.size(); ++i) {
      records[i].delta_pct = delta_percent(records[i].map50, baseline);
      if (spec.on_record) spec.on_record(records[i]);
    }
  }
  if (out_csv) write_csv(*out_csv, records);
  return records;
}

std::string format_history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,loss,box,obj,cls,collisions,val_map50\n";
  for (const EpochRecord& r : history) {
    out += std::to_string(r.epoch) + "," + fmt(r.loss) + "," + fmt(r.box) + "," + fmt(r.obj) + "," + fmt(r.cls) + "," +
           std::to_string(r.collisions) + "," + fmt(r.val_map50) + "\n";
  }
  return out;
}

}  // namespace dinoyolo
