#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinoyolo/dataset.h"
#include "dinoyolo/detector.h"
#include "dinoyolo/evaluation.h"

namespace dinoyolo {

/// Raised when a training run cannot continue (e.g. a non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double box = 5.0;
  double obj = 1.0;
  double cls = 1.0;
};

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  bool linear_decay = false;
  /// Rescales the gradient when its global L2 norm exceeds this value (0 disables).
  double grad_clip = 0.0;
  int epochs = 10;
  int batch_size = 16;
  LossWeights weights;
  uint64_t seed = 0;
  /// Routing thresholds on sqrt(w*h), as fractions of the input side.
  double t_small = 32.0 / 640.0;
  double t_med = 96.0 / 640.0;
  /// Validation mAP@0.5 every `eval_every` epochs (0 disables); the last epoch is always evaluated.
  int eval_every = 0;
  /// Stops after an evaluation reaching this validation mAP@0.5.
  std::optional<double> target_map50;
  /// Settings for the validation passes.
  EvalConfig eval;

  void validate() const;
};

/// One assigned cell: flat index gy * S + gx on its level.
struct CellTarget {
  int64_t cell = 0;
  GroundTruthBox box;
};

struct TargetSet {
  /// [level][image] -> assigned cells, unique per cell.
  std::array<std::vector<std::vector<CellTarget>>, 3> levels;
  std::array<int64_t, 3> sides{};
  /// Ground-truth boxes that overwrote an earlier box on the same cell.
  int64_t collisions = 0;
};

/// Level index (0 = P3, 1 = P4, 2 = P5) for a box of the given size; ties go to the finer level.
int route_level(const GroundTruthBox& box, double t_small, double t_med);

/// Routes every box to one level and its center cell. Invalid boxes raise a
/// DataError naming the sample (names[i] when given, else its batch index).
TargetSet assign_targets(std::span<const std::vector<GroundTruthBox>> batch, const std::array<int64_t, 3>& sides,
                         double t_small, double t_med, int num_classes,
                         std::span<const std::string> names = {});

template <typename T>
struct LossResult {
  Variable<T> total;
  double box = 0;
  double obj = 0;
  double cls = 0;
  int64_t assigned = 0;
};

/// lambda_box * mean(1 - IoU) over assigned cells + lambda_obj * mean BCE(objectness)
/// over all cells + lambda_cls * mean BCE(class logits, one-hot) over assigned
/// cells and classes. Empty means contribute 0. Differentiable in the predictions.
template <typename T>
LossResult<T> detection_loss(const std::array<Variable<T>, 3>& levels, const TargetSet& targets,
                             const LossWeights& weights);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0;
  double box = 0;
  double obj = 0;
  double cls = 0;
  int64_t collisions = 0;
  std::optional<double> val_map50;
};

struct TrainHooks {
  /// Called after every optimizer step with the 1-based global step.
  std::function<void(int64_t step)> after_step;
  std::function<void(const EpochRecord&)> after_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int64_t steps = 0;
};

/// Mini-batch SGD with momentum (v = mu v + g; p -= lr v) over a seeded shuffle,
/// with optional global gradient-norm clipping.
/// Frozen parameters never receive updates.
TrainResult train(DetectionModel& model, const Dataset& train_set, const TrainConfig& config,
                  const Dataset* val_set = nullptr, const TrainHooks& hooks = {});

/// Raised by load_checkpoint; `field` names what failed to validate.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const DetectionModel& model, const std::filesystem::path& path, int64_t step = 0);

struct LoadedCheckpoint {
  std::unique_ptr<DetectionModel> model;
  int64_t step = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dinoyolo
