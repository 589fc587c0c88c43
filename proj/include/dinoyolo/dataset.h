#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinoyolo/boxes.h"
#include "dinoyolo/tensor.h"

namespace dinoyolo {

/// Raised for invalid samples, labels and image files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Name of the first field of `box` that violates the ground-truth invariants
/// (class in [0,K), geometry in [0,1], positive size, edges inside the unit square),
/// or nullopt when the box is valid.
std::optional<std::string> box_violation(const GroundTruthBox& box, int num_classes);

struct Sample {
  std::string name;
  Tensor<float> image;  // [3,H,W], values in [0,1]
  std::vector<GroundTruthBox> boxes;
};

struct Dataset {
  int64_t image_side = 0;
  int num_classes = 0;
  std::vector<Sample> samples;

  size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Stacks the selected images into [n,3,H,W].
Tensor<float> stack_images(const Dataset& data, std::span<const size_t> indices);

struct DatasetSpec {
  enum class Source { kSynthetic, kDirectory };
  Source source = Source::kSynthetic;

  uint64_t seed = 0;
  int count = 200;
  int64_t image_side = 64;
  int num_classes = 2;
  int min_objects = 1;
  int max_objects = 3;
  int min_size = 16;  // object side in pixels
  int max_size = 28;
  float noise = 0.04f;         // half-width of per-pixel background noise
  float min_contrast = 0.3f;   // mean per-channel gap between object and background

  std::filesystem::path images_dir;
  std::filesystem::path labels_dir;

  void validate() const;
};

/// One filled shape: class 0 square, 1 disc, 2 diamond; (x, y) is the top-left
/// corner of its size x size bounding square in pixels.
struct ShapeSpec {
  int cls = 0;
  int x = 0;
  int y = 0;
  int size = 0;
};

/// Paints a shape into a [3,H,W] image with the given color and returns its exact label.
GroundTruthBox draw_shape(Tensor<float>& image, const ShapeSpec& shape, const std::array<float, 3>& color);

struct SyntheticStats {
  int regenerated = 0;  // samples redrawn after placement retries ran out
};

/// Seeded squares/discs on textured noise. A pure function of the spec.
Dataset gen_synthetic_dataset(const DatasetSpec& spec, SyntheticStats* stats = nullptr);

/// Loads a synthetic or directory dataset.
Dataset load_dataset(const DatasetSpec& spec);

/// Binary PPM (P6) with maxval 255.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);

/// Parses "class cx cy w h" lines; errors name the file, line and offending token or field.
std::vector<GroundTruthBox> parse_label_file(const std::filesystem::path& path, int num_classes);
void write_label_file(const std::filesystem::path& path, std::span<const GroundTruthBox> boxes);

/// Label files of a directory keyed by filename stem, sorted by stem.
std::vector<std::pair<std::string, std::vector<GroundTruthBox>>> load_labels(const std::filesystem::path& directory,
                                                                            int num_classes);

/// Writes images/<name>.ppm and labels/<name>.txt under `root`.
void save_dataset(const Dataset& data, const std::filesystem::path& root);

}  // namespace dinoyolo
