#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dinoyolo/boxes.h"
#include "dinoyolo/dataset.h"
#include "dinoyolo/detector.h"

namespace dinoyolo {

/// Intersection over union; 0 when the union is empty.
double iou(const BoxGeom& a, const BoxGeom& b);

/// Greedy per-class suppression. Boxes are visited by confidence (ties by input
/// order); a box is dropped when its IoU with a kept box of the same class is
/// >= iou_threshold. Survivors are returned by descending confidence.
std::vector<DetectionBox> nms(const std::vector<DetectionBox>& boxes, double iou_threshold);

/// Single-class AP over a set of images. Predictions are matched greedily in
/// confidence order, each to the unmatched ground truth of its image with the
/// highest IoU >= iou_threshold. The area under the all-point interpolated
/// precision envelope is returned; 0 when there is no ground truth.
double average_precision(std::span<const std::vector<DetectionBox>> preds,
                         std::span<const std::vector<GroundTruthBox>> gts, double iou_threshold);

/// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

struct ClassAP {
  int cls = 0;
  int64_t gt_count = 0;
  double ap50 = 0;
  double ap_mean = 0;  // averaged over the threshold ladder
};

struct MapResult {
  std::optional<double> map50;
  std::optional<double> map5095;
  std::vector<ClassAP> per_class;
};

/// Class-averaged AP over classes that occur in the ground truth. Both means
/// are absent when there is no ground truth at all.
MapResult map_at(std::span<const std::vector<DetectionBox>> preds, std::span<const std::vector<GroundTruthBox>> gts,
                 const std::vector<double>& iou_thresholds = coco_iou_thresholds());

struct EvalConfig {
  double conf_threshold = 0.001;
  double nms_iou = 0.5;
  int batch_size = 16;
};

/// Decoded, NMS-filtered detections for every image in the dataset.
std::vector<std::vector<DetectionBox>> predict(const DetectionModel& model, const Dataset& data,
                                               const EvalConfig& config = {});
MapResult evaluate_model(const DetectionModel& model, const Dataset& data, const EvalConfig& config = {});

struct LatencyReport {
  int warmup = 0;
  int runs = 0;
  double mean_ms = 0;
  double std_ms = 0;
  double fps = 0;
};

double fps_from_ms(double mean_ms);
/// Builds a report from per-run timings (sample standard deviation).
LatencyReport make_latency_report(int warmup, std::span<const double> run_ms);
/// Times single-image forward passes on the calling thread; runs >= 3.
LatencyReport latency_bench(const DetectionModel& model, int warmup = 5, int runs = 30);

/// Writes per-channel and channel-mean maps of one site as binary PGM files
/// (plus a pseudocolor PPM of the mean when requested). Returns the paths written.
std::vector<std::filesystem::path> export_feature_maps(const DetectionModel& model, const Tensor<float>& image,
                                                       const std::string& site,
                                                       const std::filesystem::path& out_dir,
                                                       bool pseudocolor = false);

/// Min-max normalization to bytes; a constant map becomes uniform 128.
std::vector<uint8_t> normalize_to_bytes(std::span<const float> values);
/// Purple -> cyan -> green -> yellow ramp.
std::array<uint8_t, 3> pseudocolor(uint8_t value);

}  // namespace dinoyolo
