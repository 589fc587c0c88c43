#include "dinoyolo/dataset.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace dinoyolo {
namespace {

constexpr double kEdgeTolerance = 1e-6;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

void fill_background(Tensor<float>& image, float amplitude, std::mt19937_64& rng) {
  const int64_t side = image.dim(1);
  std::uniform_real_distribution<float> base(0.1f, 0.45f), phase(0.0f, 6.2831853f), freq(0.1f, 0.4f),
      noise(-amplitude, amplitude);
  for (int64_t c = 0; c < 3; ++c) {
    const float b = base(rng), ph = phase(rng), fx = freq(rng), fy = freq(rng);
    float* plane = image.ptr() + c * side * side;
    for (int64_t y = 0; y < side; ++y) {
      for (int64_t x = 0; x < side; ++x) {
        const float wave = 0.75f * amplitude * std::sin(fx * static_cast<float>(x) + fy * static_cast<float>(y) + ph);
        plane[y * side + x] = clamp01(b + wave + noise(rng));
      }
    }
  }
}

std::array<float, 3> background_mean(const Tensor<float>& image, const ShapeSpec& s) {
  const int64_t side = image.dim(1);
  std::array<float, 3> mean{};
  for (int64_t c = 0; c < 3; ++c) {
    double acc = 0;
    for (int y = s.y; y < s.y + s.size; ++y) {
      for (int x = s.x; x < s.x + s.size; ++x) acc += image[c * side * side + y * side + x];
    }
    mean[c] = static_cast<float>(acc / (s.size * s.size));
  }
  return mean;
}

std::array<float, 3> contrasting_color(std::mt19937_64& rng, const std::array<float, 3>& against, float min_gap) {
  std::uniform_real_distribution<float> u(0.6f, 1.0f);
  std::array<float, 3> color{};
  for (int attempt = 0; attempt < 64; ++attempt) {
    float diff = 0;
    for (int c = 0; c < 3; ++c) {
      color[c] = u(rng);
      diff += std::abs(color[c] - against[c]);
    }
    if (diff / 3 >= min_gap) return color;
  }
  for (int c = 0; c < 3; ++c) color[c] = against[c] > 0.5f ? 0.0f : 1.0f;
  return color;
}

bool overlaps(const ShapeSpec& a, const ShapeSpec& b) {
  const int gap = 1;
  return a.x < b.x + b.size + gap && b.x < a.x + a.size + gap && a.y < b.y + b.size + gap &&
         b.y < a.y + a.size + gap;
}

std::optional<Sample> try_generate(const DatasetSpec& spec, int index, int attempt) {
  std::seed_seq seq{static_cast<uint32_t>(spec.seed), static_cast<uint32_t>(spec.seed >> 32),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(attempt)};
  std::mt19937_64 rng(seq);
  const int side = static_cast<int>(spec.image_side);
  Sample sample;
  char name[32];
  std::snprintf(name, sizeof(name), "synth_%05d", index);
  sample.name = name;
  sample.image = Tensor<float>({3, spec.image_side, spec.image_side});
  fill_background(sample.image, spec.noise, rng);

  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<int> size_dist(spec.min_size, spec.max_size);
  std::uniform_int_distribution<int> cls_dist(0, spec.num_classes - 1);
  const int count = count_dist(rng);
  std::vector<ShapeSpec> placed;
  for (int k = 0; k < count; ++k) {
    ShapeSpec s;
    s.cls = cls_dist(rng);
    s.size = size_dist(rng);
    std::uniform_int_distribution<int> pos(0, side - s.size);
    bool ok = false;
    for (int retry = 0; retry < 50 && !ok; ++retry) {
      s.x = pos(rng);
      s.y = pos(rng);
      ok = std::none_of(placed.begin(), placed.end(), [&](const ShapeSpec& p) { return overlaps(p, s); });
    }
    if (!ok) return std::nullopt;
    placed.push_back(s);
  }
  for (const ShapeSpec& s : placed) {
    const auto color = contrasting_color(rng, background_mean(sample.image, s), spec.min_contrast);
    sample.boxes.push_back(draw_shape(sample.image, s, color));
  }
  // 8-bit levels, so a PPM round trip reproduces the tensor exactly.
  for (float& v : sample.image.data()) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  return sample;
}

std::string read_token(std::istream& in) {
  std::string tok;
  while (in.peek() == '#') {
    std::string comment;
    std::getline(in, comment);
    in >> std::ws;
  }
  in >> tok;
  return tok;
}

}  // namespace

std::optional<std::string> box_violation(const GroundTruthBox& box, int num_classes) {
  if (box.cls < 0 || box.cls >= num_classes) return "class";
  const std::array<std::pair<const char*, double>, 4> fields{{{"cx", box.cx}, {"cy", box.cy}, {"w", box.w}, {"h", box.h}}};
  for (const auto& [name, v] : fields) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) return std::string(name);
  }
  if (box.w <= 0.0) return "w";
  if (box.h <= 0.0) return "h";
  if (box.geom().x1() < -kEdgeTolerance || box.geom().x2() > 1.0 + kEdgeTolerance) return "w";
  if (box.geom().y1() < -kEdgeTolerance || box.geom().y2() > 1.0 + kEdgeTolerance) return "h";
  return std::nullopt;
}

Tensor<float> stack_images(const Dataset& data, std::span<const size_t> indices) {
  const int64_t side = data.image_side;
  const int64_t per = 3 * side * side;
  Tensor<float> out({static_cast<int64_t>(indices.size()), 3, side, side});
  for (size_t i = 0; i < indices.size(); ++i) {
    const Tensor<float>& img = data.samples.at(indices[i]).image;
    std::copy(img.ptr(), img.ptr() + per, out.ptr() + static_cast<int64_t>(i) * per);
  }
  return out;
}

void DatasetSpec::validate() const {
  if (source == Source::kDirectory) {
    if (images_dir.empty() || labels_dir.empty()) throw ConfigError("directory dataset needs images and labels paths");
    return;
  }
  if (image_side <= 0 || image_side % 32 != 0) {
    throw ConfigError("image side must be a positive multiple of 32, got " + std::to_string(image_side));
  }
  if (count < 0) throw ConfigError("sample count must be nonnegative");
  if (num_classes < 1 || num_classes > 3) throw ConfigError("synthetic data supports 1 to 3 classes");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("invalid objects-per-image range");
  if (min_size < 2 || max_size < min_size || max_size > image_side) throw ConfigError("invalid object-size range");
}

GroundTruthBox draw_shape(Tensor<float>& image, const ShapeSpec& s, const std::array<float, 3>& color) {
  const int64_t side = image.dim(1);
  if (s.x < 0 || s.y < 0 || s.size <= 0 || s.x + s.size > side || s.y + s.size > side) {
    throw DataError("shape does not fit inside the image");
  }
  const double r = s.size / 2.0;
  const double cx = s.x + r, cy = s.y + r;
  for (int y = s.y; y < s.y + s.size; ++y) {
    for (int x = s.x; x < s.x + s.size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      bool inside = true;
      if (s.cls == 1) inside = dx * dx + dy * dy <= r * r;
      if (s.cls == 2) inside = std::abs(dx) + std::abs(dy) <= r;
      if (!inside) continue;
      for (int64_t c = 0; c < 3; ++c) image[c * side * side + y * side + x] = color[static_cast<size_t>(c)];
    }
  }
  const double n = static_cast<double>(side);
  return {s.cls, cx / n, cy / n, s.size / n, s.size / n};
}

Dataset gen_synthetic_dataset(const DatasetSpec& spec, SyntheticStats* stats) {
  spec.validate();
  Dataset data;
  data.image_side = spec.image_side;
  data.num_classes = spec.num_classes;
  for (int i = 0; i < spec.count; ++i) {
    std::optional<Sample> sample;
    for (int attempt = 0; attempt < 100 && !sample; ++attempt) {
      sample = try_generate(spec, i, attempt);
      if (!sample && stats) ++stats->regenerated;
    }
    if (!sample) throw DataError("could not place objects for sample " + std::to_string(i));
    data.samples.push_back(std::move(*sample));
  }
  return data;
}

Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.source == DatasetSpec::Source::kSynthetic) return gen_synthetic_dataset(spec);
  Dataset data;
  data.num_classes = spec.num_classes;
  for (auto& [stem, boxes] : load_labels(spec.labels_dir, spec.num_classes)) {
    const auto path = spec.images_dir / (stem + ".ppm");
    if (!std::filesystem::exists(path)) throw DataError(path.string() + ": image missing for label file " + stem + ".txt");
    Sample s{stem, read_ppm(path), std::move(boxes)};
    if (s.image.dim(1) != s.image.dim(2)) throw DataError(path.string() + ": image must be square");
    if (data.image_side == 0) data.image_side = s.image.dim(1);
    if (s.image.dim(1) != data.image_side) throw DataError(path.string() + ": image side differs from the dataset");
    data.samples.push_back(std::move(s));
  }
  return data;
}

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects [3,H,W], got " + shape_str(image.shape()));
  const int64_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<char> row(static_cast<size_t>(w * 3));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const float v = clamp01(image[c * h * w + y * w + x]);
        row[static_cast<size_t>(x * 3 + c)] = static_cast<char>(static_cast<uint8_t>(std::lround(v * 255.0f)));
      }
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError(path.string() + ": write failed");
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  if (read_token(in) != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
  int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(read_token(in));
    h = std::stoll(read_token(in));
    maxval = std::stoll(read_token(in));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path.string() + ": unsupported PPM header");
  in.get();
  std::vector<uint8_t> raw(static_cast<size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError(path.string() + ": truncated pixel data");
  Tensor<float> image({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) image[c * h * w + y * w + x] = raw[static_cast<size_t>((y * w + x) * 3 + c)] / 255.0f;
    }
  }
  return image;
}

std::vector<GroundTruthBox> parse_label_file(const std::filesystem::path& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::vector<GroundTruthBox> boxes;
  std::string line;
  int lineno = 0;
  static const std::array<const char*, 5> kFields{"class", "cx", "cy", "w", "h"};
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<std::string> tokens;
    for (std::string t; ss >> t;) tokens.push_back(t);
    if (tokens.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (tokens.size() != 5) throw DataError(where + "expected 5 fields, got " + std::to_string(tokens.size()));
    GroundTruthBox box;
    {
      const std::string& t = tokens[0];
      auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), box.cls);
      if (ec != std::errc() || end != t.data() + t.size()) throw DataError(where + "bad class token '" + t + "'");
    }
    std::array<double*, 4> slots{&box.cx, &box.cy, &box.w, &box.h};
    for (size_t f = 0; f < 4; ++f) {
      const std::string& t = tokens[f + 1];
      auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), *slots[f]);
      if (ec != std::errc() || end != t.data() + t.size()) {
        throw DataError(where + "bad " + kFields[f + 1] + " token '" + t + "'");
      }
    }
    if (auto bad = box_violation(box, num_classes)) {
      size_t idx = 0;
      while (idx < kFields.size() && *bad != kFields[idx]) ++idx;
      throw DataError(where + "value out of range in field " + *bad + " ('" + tokens[std::min<size_t>(idx, 4)] + "')");
    }
    boxes.push_back(box);
  }
  return boxes;
}

void write_label_file(const std::filesystem::path& path, std::span<const GroundTruthBox> boxes) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  for (const GroundTruthBox& b : boxes) {
    out << b.cls << ' ' << fmt_double(b.cx) << ' ' << fmt_double(b.cy) << ' ' << fmt_double(b.w) << ' '
        << fmt_double(b.h) << '\n';
  }
}

std::vector<std::pair<std::string, std::vector<GroundTruthBox>>> load_labels(const std::filesystem::path& directory,
                                                                            int num_classes) {
  if (!std::filesystem::is_directory(directory)) throw DataError(directory.string() + ": not a directory");
  std::map<std::string, std::vector<GroundTruthBox>> by_stem;
  for (const auto& entry : std::filesystem::directory_iterator(directory)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    by_stem[entry.path().stem().string()] = parse_label_file(entry.path(), num_classes);
  }
  return {by_stem.begin(), by_stem.end()};
}

void save_dataset(const Dataset& data, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "labels");
  for (const Sample& s : data.samples) {
    write_ppm(root / "images" / (s.name + ".ppm"), s.image);
    write_label_file(root / "labels" / (s.name + ".txt"), s.boxes);
  }
}

}  // namespace dinoyolo
