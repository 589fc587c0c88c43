#include "dinoyolo/evaluation.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <cblas.h>

namespace dinoyolo {
namespace {

// Indices of `confidences` by descending value, ties by index.
std::vector<size_t> rank_order(const std::vector<double>& confidences) {
  std::vector<size_t> order(confidences.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return confidences[a] > confidences[b]; });
  return order;
}

void write_pgm(const std::filesystem::path& path, int64_t h, int64_t w, const std::vector<uint8_t>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_ppm_bytes(const std::filesystem::path& path, int64_t h, int64_t w, const std::vector<uint8_t>& rgb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace

double iou(const BoxGeom& a, const BoxGeom& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<DetectionBox> nms(const std::vector<DetectionBox>& boxes, double iou_threshold) {
  std::vector<double> conf;
  for (const auto& b : boxes) conf.push_back(b.confidence);
  std::vector<DetectionBox> kept;
  for (size_t i : rank_order(conf)) {
    const DetectionBox& cand = boxes[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const DetectionBox& k) {
      return k.cls == cand.cls && iou(k.geom(), cand.geom()) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

double average_precision(std::span<const std::vector<DetectionBox>> preds,
                         std::span<const std::vector<GroundTruthBox>> gts, double iou_threshold) {
  if (preds.size() != gts.size()) throw std::invalid_argument("predictions and ground truth cover different images");
  int64_t total_gt = 0;
  for (const auto& g : gts) total_gt += static_cast<int64_t>(g.size());
  if (total_gt == 0) return 0.0;

  struct Flat {
    size_t image, index;
  };
  std::vector<Flat> flat;
  std::vector<double> conf;
  for (size_t i = 0; i < preds.size(); ++i) {
    for (size_t j = 0; j < preds[i].size(); ++j) {
      flat.push_back({i, j});
      conf.push_back(preds[i][j].confidence);
    }
  }
  std::vector<std::vector<bool>> used(gts.size());
  for (size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);

  std::vector<double> precision, recall;
  int64_t tp = 0, seen = 0;
  for (size_t f : rank_order(conf)) {
    const auto [img, idx] = flat[f];
    const DetectionBox& p = preds[img][idx];
    double best = -1.0;
    size_t best_j = 0;
    for (size_t j = 0; j < gts[img].size(); ++j) {
      if (used[img][j]) continue;
      const double v = iou(p.geom(), gts[img][j].geom());
      if (v >= iou_threshold && v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best >= 0) {
      used[img][best_j] = true;
      ++tp;
    }
    ++seen;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50.0 + 5.0 * i) / 100.0);
  return t;
}

MapResult map_at(std::span<const std::vector<DetectionBox>> preds, std::span<const std::vector<GroundTruthBox>> gts,
                 const std::vector<double>& iou_thresholds) {
  if (iou_thresholds.empty()) throw std::invalid_argument("map_at needs at least one IoU threshold");
  if (preds.size() != gts.size()) throw std::invalid_argument("predictions and ground truth cover different images");
  std::set<int> classes;
  for (const auto& g : gts) {
    for (const auto& b : g) classes.insert(b.cls);
  }
  MapResult result;
  if (classes.empty()) return result;

  double sum50 = 0, sum_mean = 0;
  for (int c : classes) {
    std::vector<std::vector<DetectionBox>> cp(preds.size());
    std::vector<std::vector<GroundTruthBox>> cg(gts.size());
    ClassAP row;
    row.cls = c;
    for (size_t i = 0; i < preds.size(); ++i) {
      for (const auto& p : preds[i]) {
        if (p.cls == c) cp[i].push_back(p);
      }
      for (const auto& g : gts[i]) {
        if (g.cls == c) cg[i].push_back(g);
      }
      row.gt_count += static_cast<int64_t>(cg[i].size());
    }
    row.ap50 = average_precision(cp, cg, 0.5);
    double acc = 0;
    for (double t : iou_thresholds) acc += average_precision(cp, cg, t);
    row.ap_mean = acc / static_cast<double>(iou_thresholds.size());
    sum50 += row.ap50;
    sum_mean += row.ap_mean;
    result.per_class.push_back(row);
  }
  result.map50 = sum50 / static_cast<double>(classes.size());
  result.map5095 = sum_mean / static_cast<double>(classes.size());
  return result;
}

std::vector<std::vector<DetectionBox>> predict(const DetectionModel& model, const Dataset& data,
                                               const EvalConfig& config) {
  NoGradGuard no_grad;
  std::vector<std::vector<DetectionBox>> out;
  const size_t bs = static_cast<size_t>(std::max(1, config.batch_size));
  std::vector<size_t> idx;
  for (size_t start = 0; start < data.size(); start += bs) {
    idx.clear();
    for (size_t i = start; i < std::min(data.size(), start + bs); ++i) idx.push_back(i);
    const auto decoded = decode(model.forward(nn::Var(stack_images(data, idx))), config.conf_threshold);
    for (const auto& boxes : decoded) out.push_back(nms(boxes, config.nms_iou));
  }
  return out;
}

MapResult evaluate_model(const DetectionModel& model, const Dataset& data, const EvalConfig& config) {
  std::vector<std::vector<GroundTruthBox>> gts;
  for (const Sample& s : data.samples) gts.push_back(s.boxes);
  return map_at(predict(model, data, config), gts);
}

double fps_from_ms(double mean_ms) { return 1000.0 / mean_ms; }

LatencyReport make_latency_report(int warmup, std::span<const double> run_ms) {
  if (run_ms.size() < 3) throw std::invalid_argument("latency needs at least 3 timed runs");
  LatencyReport r;
  r.warmup = warmup;
  r.runs = static_cast<int>(run_ms.size());
  const double n = static_cast<double>(run_ms.size());
  r.mean_ms = std::accumulate(run_ms.begin(), run_ms.end(), 0.0) / n;
  double ss = 0;
  for (double v : run_ms) ss += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = std::sqrt(ss / (n - 1));
  r.fps = fps_from_ms(r.mean_ms);
  return r;
}

LatencyReport latency_bench(const DetectionModel& model, int warmup, int runs) {
  if (runs < 3) throw std::invalid_argument("latency needs at least 3 timed runs");
  if (warmup < 0) throw std::invalid_argument("warmup must be nonnegative");
  openblas_set_num_threads(1);
  NoGradGuard no_grad;
  const int64_t side = model.config().input_size;
  Tensor<float> image({1, 3, side, side}, 0.5f);
  const nn::Var input(image);
  for (int i = 0; i < warmup; ++i) model.forward(input);
  std::vector<double> times;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(input);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return make_latency_report(warmup, times);
}

std::vector<uint8_t> normalize_to_bytes(std::span<const float> values) {
  std::vector<uint8_t> out(values.size(), 128);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0)) return out;
  for (size_t i = 0; i < values.size(); ++i) {
    const double t = (static_cast<double>(values[i]) - *lo) / range;
    out[i] = static_cast<uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
  }
  return out;
}

std::array<uint8_t, 3> pseudocolor(uint8_t value) {
  static constexpr std::array<std::array<double, 3>, 4> kStops{{
      {68, 1, 84},     // purple
      {33, 145, 140},  // cyan
      {94, 201, 98},   // green
      {253, 231, 37},  // yellow
  }};
  const double t = value / 255.0 * 3.0;
  const size_t seg = std::min<size_t>(2, static_cast<size_t>(t));
  const double f = t - static_cast<double>(seg);
  std::array<uint8_t, 3> rgb{};
  for (size_t c = 0; c < 3; ++c) {
    rgb[c] = static_cast<uint8_t>(std::lround(kStops[seg][c] + f * (kStops[seg + 1][c] - kStops[seg][c])));
  }
  return rgb;
}

std::vector<std::filesystem::path> export_feature_maps(const DetectionModel& model, const Tensor<float>& image,
                                                       const std::string& site,
                                                       const std::filesystem::path& out_dir, bool color) {
  const auto sites = model.feature_sites();
  if (std::find(sites.begin(), sites.end(), site) == sites.end()) {
    std::string known;
    for (const auto& s : sites) known += (known.empty() ? "" : ", ") + s;
    throw ConfigError("unknown feature site '" + site + "' (model has " + known + ")");
  }
  Tensor<float> batch = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (batch.rank() != 4 || batch.dim(0) != 1) throw ShapeError("export expects one image, got " + shape_str(image.shape()));

  FeatureTaps taps;
  {
    NoGradGuard no_grad;
    model.forward(nn::Var(batch), &taps);
  }
  const Tensor<float>& map = taps.at(site);
  const int64_t c = map.dim(1), h = map.dim(2), w = map.dim(3), plane = h * w;
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  const int width = static_cast<int>(std::to_string(c - 1).size());
  for (int64_t ch = 0; ch < c; ++ch) {
    std::string idx = std::to_string(ch);
    idx.insert(0, static_cast<size_t>(width) - idx.size(), '0');
    const auto path = out_dir / (site + "_c" + idx + ".pgm");
    write_pgm(path, h, w, normalize_to_bytes(std::span<const float>(map.ptr() + ch * plane, static_cast<size_t>(plane))));
    written.push_back(path);
  }
  std::vector<float> mean(static_cast<size_t>(plane), 0.0f);
  for (int64_t i = 0; i < plane; ++i) {
    double acc = 0;
    for (int64_t ch = 0; ch < c; ++ch) acc += map[ch * plane + i];
    mean[static_cast<size_t>(i)] = static_cast<float>(acc / static_cast<double>(c));
  }
  const auto gray = normalize_to_bytes(mean);
  const auto mean_path = out_dir / (site + "_mean.pgm");
  write_pgm(mean_path, h, w, gray);
  written.push_back(mean_path);
  if (color) {
    std::vector<uint8_t> rgb;
    for (uint8_t g : gray) {
      const auto px = pseudocolor(g);
      rgb.insert(rgb.end(), px.begin(), px.end());
    }
    const auto color_path = out_dir / (site + "_mean_color.ppm");
    write_ppm_bytes(color_path, h, w, rgb);
    written.push_back(color_path);
  }
  return written;
}

}  // namespace dinoyolo
