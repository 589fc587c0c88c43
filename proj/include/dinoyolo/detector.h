#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dinoyolo/boxes.h"
#include "dinoyolo/injection.h"

namespace dinoyolo {

/// Width/depth of a detector scale. Stage channels at strides 2,4,8,16,32 are
/// w0, 2w0, 4w0 * p3_expand, 8w0, 8w0; the stride-8 stage is P3.
struct ScaleSpec {
  std::string name;
  int64_t w0 = 16;
  int blocks = 1;
  int p3_expand = 1;

  std::array<int64_t, 5> channels() const;
};

/// S, M, L toy presets (w0 16/24/32) and the full-width L-full ladder
/// (64 -> 128 -> 256, widened to 512 at P3).
const ScaleSpec& scale_preset(std::string_view name);
std::vector<std::string> scale_preset_names();

struct ModelConfig {
  std::string scale = "S";
  std::string teacher = "toy-tiny";
  IntegrationStrategy strategy = IntegrationStrategy::kNone;
  int num_classes = 2;
  int64_t input_size = 64;
  uint64_t seed = 0;
  P0Mode p0_mode = P0Mode::kResidual;
  /// P0 and P3/P4 injectors reuse one teacher block stack.
  bool share_teacher = false;

  /// "[Scale]-[Teacher]-[Strategy]", e.g. "S-toy-tiny-dualp0p3"; baselines render as "S-baseline".
  std::string name() const;
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

struct ParamReport {
  int64_t total = 0;
  int64_t trainable = 0;
  int64_t frozen = 0;
  double trainable_fraction = 1.0;

  bool operator==(const ParamReport&) const = default;
};

/// Builds a report from the partition; the fraction is trainable / total (1 for an empty model).
ParamReport make_param_report(int64_t trainable, int64_t frozen);

/// Raw head outputs per level P3, P4, P5: [N, 5 + K, S, S] with channels
/// (tx, ty, tw, th, objectness, class logits...).
struct PyramidPrediction {
  std::array<nn::Var, 3> levels;
};

/// Named intermediate maps captured during a forward pass:
/// P0-out, P3-pre, P3-post, P4, P5.
using FeatureTaps = std::map<std::string, Tensor<float>>;

class DetectionModel {
 public:
  /// Shape-only models (materialize = false) support accounting but not forward.
  explicit DetectionModel(const ModelConfig& config, bool materialize = true);

  PyramidPrediction forward(const nn::Var& images, FeatureTaps* taps = nullptr) const;

  const ModelConfig& config() const { return config_; }
  const ParameterStore& params() const { return store_; }
  ParameterStore& params() { return store_; }

  /// Every fusion gate that is trainable.
  std::vector<nn::Var> gates() const;
  /// Sets every trainable gate to `value` in place.
  void set_gates(float value);

  const P0Preprocessor* p0() const { return p0_.get(); }
  const FeatureInjector* injector(Site site) const;
  std::vector<std::string> feature_sites() const;
  /// Level sides S for P3, P4, P5.
  std::array<int64_t, 3> level_sides() const;

 private:
  ModelConfig config_;
  ParameterStore store_;
  std::unique_ptr<P0Preprocessor> p0_;
  std::unique_ptr<FeatureInjector> p3_, p4_;

  nn::Conv stem_;
  struct Stage {
    nn::Conv down;
    std::vector<nn::ResidualBlock> blocks;
    std::optional<nn::Conv> widen;
  };
  std::array<Stage, 4> stages_;  // strides 4, 8, 16, 32

  nn::Conv td4_, td3_, down3_, bu4_, down4_, bu5_;
  std::array<nn::Conv, 3> head_hidden_, head_out_;
};

std::pair<std::unique_ptr<DetectionModel>, ParamReport> build_model(const ModelConfig& config,
                                                                    bool materialize = true);
ParamReport param_report(const DetectionModel& model);

/// Box size anchor per level: (2 sigmoid(t))^2 times 4 strides, as a fraction of the input.
double level_size_base(int64_t level_side);

/// Decodes every cell: center = (cell + sigmoid(tx, ty)) / S, size =
/// level_size_base(S) * (2 sigmoid(tw, th))^2, confidence = sigmoid(obj) * max_k
/// sigmoid(cls_k). Keeps confidence >= threshold; boxes are clipped to the unit square.
std::vector<std::vector<DetectionBox>> decode(const PyramidPrediction& preds, double conf_threshold);

}  // namespace dinoyolo
