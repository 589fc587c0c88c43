#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dinoyolo/dataset.h"
#include "dinoyolo/detector.h"
#include "dinoyolo/evaluation.h"
#include "dinoyolo/training.h"

namespace dinoyolo {

/// Everything one run needs, read from a flat JSON object (keys listed in the README).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DatasetSpec train_data;
  DatasetSpec val_data;
  int bench_warmup = 5;
  int bench_runs = 30;
};

/// Toy defaults: S scale, 64 px inputs, 200/50 synthetic shapes, thresholds sized for 8-24 px objects.
RunConfig default_run_config();
/// Applies the keys of `j` over `base`; unknown keys and bad values raise ConfigError.
RunConfig apply_run_config(RunConfig base, const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

struct ExperimentRecord {
  std::string name;
  std::string scale;
  std::string teacher;
  std::string strategy;
  std::optional<double> map50;
  std::optional<double> map5095;
  std::optional<double> latency_ms;
  std::optional<double> fps;
  int64_t total_params = 0;
  int64_t trainable_params = 0;
  int64_t frozen_params = 0;
  std::optional<double> delta_pct;
  std::string status = "ok";  // "ok" or "error: <reason>"

  bool operator==(const ExperimentRecord&) const = default;
};

inline constexpr const char* kCsvHeader =
    "name,scale,teacher,strategy,map50,map5095,latency_ms,fps,total_params,trainable_params,frozen_params,"
    "delta_pct,status";

/// (m - b) / b * 100; absent when the baseline is absent or zero.
std::optional<double> delta_percent(std::optional<double> map50, std::optional<double> baseline_map50);

/// Absent values are empty cells; doubles use 17 significant digits.
std::string format_csv(const std::vector<ExperimentRecord>& records);
std::vector<ExperimentRecord> parse_csv(const std::string& text);
void write_csv(const std::filesystem::path& path, const std::vector<ExperimentRecord>& records);

struct AblationSpec {
  std::vector<std::string> scales;
  std::vector<std::string> teachers;
  std::vector<IntegrationStrategy> strategies;  // must include kNone
  RunConfig run;
  /// Cells (by config name) whose learning rate is replaced by NaN, for fault drills.
  std::vector<std::string> inject_failure;
  std::function<void(const ExperimentRecord&)> on_record;
};

/// Trains, evaluates, benchmarks and accounts each cell. The baseline runs once
/// per scale; rows are ordered by scale, then strategy, then teacher. A failing
/// cell becomes an error row and the sweep continues. Writes the CSV when out_csv is set.
std::vector<ExperimentRecord> run_ablation(const AblationSpec& spec, const Dataset& train_set, const Dataset& val_set,
                                           const std::optional<std::filesystem::path>& out_csv = std::nullopt);

/// Per-epoch history as CSV: epoch,loss,box,obj,cls,collisions,val_map50.
std::string format_history_csv(const std::vector<EpochRecord>& history);

}  // namespace dinoyolo
