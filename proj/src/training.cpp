#include "dinoyolo/training.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "dinoyolo/evaluation.h"

namespace dinoyolo {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Binary cross-entropy on a logit, stable for large |z|.
double bce_logit(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

struct IouGrad {
  double iou = 0;
  double dcx = 0, dcy = 0, dw = 0, dh = 0;
};

// IoU of predicted box p against fixed target t, with its partials in p.
IouGrad iou_with_grad(const BoxGeom& p, const BoxGeom& t) {
  IouGrad r;
  const double ix1 = std::max(p.x1(), t.x1()), ix2 = std::min(p.x2(), t.x2());
  const double iy1 = std::max(p.y1(), t.y1()), iy2 = std::min(p.y2(), t.y2());
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  const double a = p.w * p.h, b = t.w * t.h;
  const bool overlap = iw > 0 && ih > 0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = a + b - inter;
  if (uni <= 0) return r;
  r.iou = inter / uni;
  const double u2 = uni * uni;
  const double d_inter = (a + b) / u2;  // dIoU/dI at fixed A
  const double d_area = -inter / u2;    // dIoU/dA at fixed I
  double diw_dcx = 0, diw_dw = 0, dih_dcy = 0, dih_dh = 0;
  if (overlap) {
    const double right = p.x2() < t.x2() ? 1.0 : 0.0, left = p.x1() > t.x1() ? 1.0 : 0.0;
    const double bottom = p.y2() < t.y2() ? 1.0 : 0.0, top = p.y1() > t.y1() ? 1.0 : 0.0;
    diw_dcx = right - left;
    diw_dw = 0.5 * (right + left);
    dih_dcy = bottom - top;
    dih_dh = 0.5 * (bottom + top);
  }
  r.dcx = d_inter * ih * diw_dcx * (overlap ? 1.0 : 0.0);
  r.dcy = d_inter * iw * dih_dcy * (overlap ? 1.0 : 0.0);
  r.dw = (overlap ? d_inter * ih * diw_dw : 0.0) + d_area * p.h;
  r.dh = (overlap ? d_inter * iw * dih_dh : 0.0) + d_area * p.w;
  return r;
}

void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::vector<uint8_t> bytes) : bytes_(std::move(bytes)) {}

  void need(size_t n, const std::string& field) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(field, "truncated file (need " + std::to_string(n) + " bytes at offset " +
                                       std::to_string(pos_) + ", " + std::to_string(bytes_.size() - pos_) + " left)");
    }
  }
  uint8_t u8(const std::string& field) {
    need(1, field);
    return bytes_[pos_++];
  }
  uint32_t u32(const std::string& field) {
    need(4, field);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  uint64_t u64(const std::string& field) {
    need(8, field);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string bytes(size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<uint8_t> bytes_;
  size_t pos_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (!(t_small > 0 && t_small < t_med && t_med < 1)) {
    throw ConfigError("size thresholds must satisfy 0 < t_small < t_med < 1");
  }
  if (!std::isfinite(learning_rate) || learning_rate < 0) throw ConfigError("learning rate must be finite and nonnegative");
  if (!std::isfinite(momentum) || momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (!std::isfinite(grad_clip) || grad_clip < 0) throw ConfigError("grad_clip must be finite and nonnegative");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (eval_every < 0) throw ConfigError("eval_every must be nonnegative");
}

int route_level(const GroundTruthBox& box, double t_small, double t_med) {
  const double size = std::sqrt(box.w * box.h);
  if (size <= t_small) return 0;
  if (size <= t_med) return 1;
  return 2;
}

TargetSet assign_targets(std::span<const std::vector<GroundTruthBox>> batch, const std::array<int64_t, 3>& sides,
                         double t_small, double t_med, int num_classes, std::span<const std::string> names) {
  if (!(t_small > 0 && t_small < t_med && t_med < 1)) {
    throw ConfigError("size thresholds must satisfy 0 < t_small < t_med < 1");
  }
  TargetSet out;
  out.sides = sides;
  for (auto& level : out.levels) level.resize(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    for (size_t j = 0; j < batch[i].size(); ++j) {
      const GroundTruthBox& box = batch[i][j];
      if (auto bad = box_violation(box, num_classes)) {
        const std::string who = i < names.size() ? names[i] : "batch index " + std::to_string(i);
        throw DataError("sample " + who + ": box " + std::to_string(j) + " has invalid " + *bad);
      }
      const int level = route_level(box, t_small, t_med);
      const int64_t s = sides[static_cast<size_t>(level)];
      const int64_t gx = std::min<int64_t>(static_cast<int64_t>(box.cx * static_cast<double>(s)), s - 1);
      const int64_t gy = std::min<int64_t>(static_cast<int64_t>(box.cy * static_cast<double>(s)), s - 1);
      const int64_t cell = gy * s + gx;
      auto& cells = out.levels[static_cast<size_t>(level)][i];
      auto it = std::find_if(cells.begin(), cells.end(), [&](const CellTarget& c) { return c.cell == cell; });
      if (it != cells.end()) {
        it->box = box;
        ++out.collisions;
      } else {
        cells.push_back({cell, box});
      }
    }
  }
  return out;
}

template <typename T>
LossResult<T> detection_loss(const std::array<Variable<T>, 3>& levels, const TargetSet& targets,
                             const LossWeights& weights) {
  const int64_t n = levels[0].shape().at(0);
  const int64_t channels = levels[0].shape().at(1);
  const int64_t k = channels - 5;
  if (k < 1) throw ShapeError("prediction maps need at least 6 channels, got " + std::to_string(channels));
  int64_t total_cells = 0, assigned = 0;
  for (size_t l = 0; l < 3; ++l) {
    const Shape& s = levels[l].shape();
    if (s.size() != 4 || s[0] != n || s[1] != channels || s[2] != s[3]) {
      throw ShapeError("prediction level " + std::to_string(l) + " has shape " + shape_str(s));
    }
    if (targets.sides[l] != s[2] || static_cast<int64_t>(targets.levels[l].size()) != n) {
      throw ShapeError("targets do not match prediction level " + std::to_string(l));
    }
    total_cells += n * s[2] * s[3];
    for (const auto& cells : targets.levels[l]) assigned += static_cast<int64_t>(cells.size());
  }

  std::array<Tensor<T>, 3> grads;
  double box_sum = 0, obj_sum = 0, cls_sum = 0;
  const double obj_norm = 1.0 / static_cast<double>(total_cells);
  const double box_norm = assigned > 0 ? 1.0 / static_cast<double>(assigned) : 0.0;
  const double cls_norm = assigned > 0 ? 1.0 / static_cast<double>(assigned * k) : 0.0;

  for (size_t l = 0; l < 3; ++l) {
    const Tensor<T>& v = levels[l].value();
    Tensor<T>& g = grads[l] = Tensor<T>(v.shape());
    const int64_t side = v.dim(2), plane = side * side;
    const double base = level_size_base(side);
    for (int64_t b = 0; b < n; ++b) {
      const T* p = v.ptr() + b * channels * plane;
      T* gp = g.ptr() + b * channels * plane;
      std::vector<const CellTarget*> assigned_at(static_cast<size_t>(plane), nullptr);
      for (const CellTarget& c : targets.levels[l][static_cast<size_t>(b)]) assigned_at[static_cast<size_t>(c.cell)] = &c;
      for (int64_t cell = 0; cell < plane; ++cell) {
        const CellTarget* tgt = assigned_at[static_cast<size_t>(cell)];
        const double zo = static_cast<double>(p[4 * plane + cell]);
        const double yo = tgt ? 1.0 : 0.0;
        obj_sum += bce_logit(zo, yo);
        gp[4 * plane + cell] = static_cast<T>(weights.obj * obj_norm * (sigmoid(zo) - yo));
        if (!tgt) continue;

        for (int64_t j = 0; j < k; ++j) {
          const double z = static_cast<double>(p[(5 + j) * plane + cell]);
          const double y = j == tgt->box.cls ? 1.0 : 0.0;
          cls_sum += bce_logit(z, y);
          gp[(5 + j) * plane + cell] = static_cast<T>(weights.cls * cls_norm * (sigmoid(z) - y));
        }

        const double gx = static_cast<double>(cell % side), gy = static_cast<double>(cell / side);
        const double sx = sigmoid(static_cast<double>(p[cell])), sy = sigmoid(static_cast<double>(p[plane + cell]));
        const double sw = sigmoid(static_cast<double>(p[2 * plane + cell]));
        const double sh = sigmoid(static_cast<double>(p[3 * plane + cell]));
        const double sd = static_cast<double>(side);
        const BoxGeom pred{(gx + sx) / sd, (gy + sy) / sd, base * 4.0 * sw * sw, base * 4.0 * sh * sh};
        const IouGrad ig = iou_with_grad(pred, tgt->box.geom());
        box_sum += 1.0 - ig.iou;
        const double scale = -weights.box * box_norm;
        gp[cell] = static_cast<T>(scale * ig.dcx * sx * (1 - sx) / sd);
        gp[plane + cell] = static_cast<T>(scale * ig.dcy * sy * (1 - sy) / sd);
        gp[2 * plane + cell] = static_cast<T>(scale * ig.dw * base * 8.0 * sw * sw * (1 - sw));
        gp[3 * plane + cell] = static_cast<T>(scale * ig.dh * base * 8.0 * sh * sh * (1 - sh));
      }
    }
  }

  LossResult<T> result;
  result.box = box_sum * box_norm;
  result.obj = obj_sum * obj_norm;
  result.cls = cls_sum * cls_norm;
  result.assigned = assigned;
  const double total = weights.box * result.box + weights.obj * result.obj + weights.cls * result.cls;
  std::vector<Variable<T>> inputs(levels.begin(), levels.end());
  result.total = Variable<T>::make_result(
      Tensor<T>(Shape{}, static_cast<T>(total)), std::move(inputs), [grads = std::move(grads)](Node<T>& self) {
        const T seed = (*self.grad)[0];
        for (size_t l = 0; l < 3; ++l) {
          Node<T>& parent = *self.parents[l];
          if (!parent.requires_grad) continue;
          Tensor<T>& gb = parent.grad_buffer();
          for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += seed * grads[l][i];
        }
      });
  return result;
}

template LossResult<float> detection_loss(const std::array<Variable<float>, 3>&, const TargetSet&, const LossWeights&);
template LossResult<double> detection_loss(const std::array<Variable<double>, 3>&, const TargetSet&,
                                           const LossWeights&);

TrainResult train(DetectionModel& model, const Dataset& train_set, const TrainConfig& config, const Dataset* val_set,
                  const TrainHooks& hooks) {
  config.validate();
  if (train_set.empty()) throw ConfigError("training dataset is empty");
  if (train_set.image_side != model.config().input_size) {
    throw ConfigError("dataset image side " + std::to_string(train_set.image_side) + " differs from model input " +
                      std::to_string(model.config().input_size));
  }

  std::vector<Parameter*> trainable;
  for (Parameter& p : model.params().all()) {
    if (!p.frozen) trainable.push_back(&p);
  }
  std::vector<Tensor<float>> velocity;
  for (Parameter* p : trainable) velocity.emplace_back(p->shape);

  std::mt19937_64 rng(config.seed);
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const size_t bs = static_cast<size_t>(config.batch_size);
  const int64_t batches_per_epoch = static_cast<int64_t>((order.size() + bs - 1) / bs);
  const int64_t total_steps = batches_per_epoch * config.epochs;
  const auto sides = model.level_sides();

  TrainResult result;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    int64_t batch_index = 0;
    for (size_t start = 0; start < order.size(); start += bs, ++batch_index) {
      const std::span<const size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      std::vector<std::vector<GroundTruthBox>> gts;
      std::vector<std::string> names;
      for (size_t i : idx) {
        gts.push_back(train_set.samples[i].boxes);
        names.push_back(train_set.samples[i].name);
      }
      const TargetSet targets = assign_targets(gts, sides, config.t_small, config.t_med,
                                               model.config().num_classes, names);
      const PyramidPrediction preds = model.forward(nn::Var(stack_images(train_set, idx)));
      const LossResult<float> loss = detection_loss<float>(preds.levels, targets, config.weights);

      const std::array<std::pair<const char*, double>, 4> parts{
          {{"box", loss.box}, {"objectness", loss.obj}, {"class", loss.cls}, {"total", loss.total.value()[0]}}};
      for (const auto& [what, value] : parts) {
        if (!std::isfinite(value)) {
          throw TrainingError("non-finite " + std::string(what) + " loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch_index) + " (first sample " + names.front() + ")");
        }
      }
      loss.total.backward();

      double lr = config.learning_rate;
      if (config.linear_decay && total_steps > 0) {
        lr *= 1.0 - static_cast<double>(result.steps) / static_cast<double>(total_steps);
      }
      float clip = 1.0f;
      if (config.grad_clip > 0) {
        double sq = 0;
        for (Parameter* p : trainable) {
          if (!p->var.has_grad()) continue;
          for (float g : p->var.grad().data()) sq += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip) clip = static_cast<float>(config.grad_clip / norm);
      }
      const float flr = static_cast<float>(lr), mu = static_cast<float>(config.momentum);
      for (size_t p = 0; p < trainable.size(); ++p) {
        Variable<float>& var = trainable[p]->var;
        if (!var.has_grad()) continue;
        const Tensor<float>& g = var.grad();
        Tensor<float>& v = velocity[p];
        Tensor<float>& w = var.mutable_value();
        for (int64_t i = 0; i < w.numel(); ++i) {
          v[i] = mu * v[i] + clip * g[i];
          w[i] -= flr * v[i];
        }
      }
      model.params().zero_grad();
      ++result.steps;
      rec.loss += loss.total.value()[0];
      rec.box += loss.box;
      rec.obj += loss.obj;
      rec.cls += loss.cls;
      rec.collisions += targets.collisions;
      if (hooks.after_step) hooks.after_step(result.steps);
    }
    const double nb = static_cast<double>(batch_index);
    rec.loss /= nb;
    rec.box /= nb;
    rec.obj /= nb;
    rec.cls /= nb;

    const bool last = epoch == config.epochs;
    const bool scheduled = config.eval_every > 0 ? epoch % config.eval_every == 0 : config.target_map50.has_value();
    if (val_set && (last || scheduled)) {
      rec.val_map50 = evaluate_model(model, *val_set, config.eval).map50;
    }
    result.history.push_back(rec);
    if (hooks.after_epoch) hooks.after_epoch(rec);
    if (config.target_map50 && rec.val_map50 && *rec.val_map50 >= *config.target_map50) break;
  }
  return result;
}

void save_checkpoint(const DetectionModel& model, const std::filesystem::path& path, int64_t step) {
  if (!model.params().materialized()) throw ConfigError("cannot checkpoint a shape-only model");
  std::string out = "DYCK";
  put_u32(out, kCheckpointVersion);
  const std::string config = model.config().to_json();
  put_u32(out, static_cast<uint32_t>(config.size()));
  out += config;
  put_u64(out, static_cast<uint64_t>(step));
  const auto& params = model.params().all();
  put_u32(out, static_cast<uint32_t>(params.size()));
  for (const Parameter& p : params) {
    put_u32(out, static_cast<uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<uint32_t>(p.shape.size()));
    for (int64_t e : p.shape) put_u32(out, static_cast<uint32_t>(e));
    put_u8(out, p.frozen ? 1 : 0);
    for (float f : p.var.value().data()) {
      uint32_t bits = 0;
      std::memcpy(&bits, &f, sizeof(bits));
      put_u32(out, bits);
    }
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error(path.string() + ": cannot open for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error(path.string() + ": write failed");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw CheckpointError("file", path.string() + ": cannot open");
  Reader in(std::vector<uint8_t>((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>()));

  if (in.bytes(4, "magic") != "DYCK") throw CheckpointError("magic", "not a checkpoint (expected DYCK)");
  const uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("version", "unsupported format version " + std::to_string(version));
  }
  const uint32_t config_len = in.u32("config length");
  const std::string config_text = in.bytes(config_len, "config");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(config_text);
  } catch (const std::exception& e) {
    throw CheckpointError("config", e.what());
  }
  LoadedCheckpoint loaded;
  loaded.step = static_cast<int64_t>(in.u64("step"));
  try {
    loaded.model = std::make_unique<DetectionModel>(config);
  } catch (const std::exception& e) {
    throw CheckpointError("config", e.what());
  }
  auto& params = loaded.model->params().all();
  const uint32_t count = in.u32("parameter count");
  if (count != params.size()) {
    throw CheckpointError("parameter count", "file has " + std::to_string(count) + ", model expects " +
                                                 std::to_string(params.size()));
  }
  for (Parameter& p : params) {
    const uint32_t name_len = in.u32("name length of " + p.name);
    const std::string name = in.bytes(name_len, "name of " + p.name);
    if (name != p.name) throw CheckpointError("name", "expected parameter " + p.name + ", found " + name);
    const uint32_t rank = in.u32(name + " rank");
    if (rank != p.shape.size()) {
      throw CheckpointError(name + " shape", "shape mismatch: rank " + std::to_string(rank) + ", expected " +
                                                 std::to_string(p.shape.size()));
    }
    Shape shape;
    for (uint32_t a = 0; a < rank; ++a) shape.push_back(in.u32(name + " extent"));
    if (shape != p.shape) {
      throw CheckpointError(name + " shape",
                            "shape mismatch: file " + shape_str(shape) + ", expected " + shape_str(p.shape));
    }
    const uint8_t frozen = in.u8(name + " frozen flag");
    if (frozen > 1 || (frozen == 1) != p.frozen) {
      throw CheckpointError(name + " frozen flag", "value " + std::to_string(frozen) + " does not match the model");
    }
    in.need(static_cast<size_t>(p.numel()) * 4, name + " data");
    Tensor<float>& w = p.var.mutable_value();
    for (int64_t i = 0; i < w.numel(); ++i) {
      const uint32_t bits = in.u32(name + " data");
      std::memcpy(&w[i], &bits, sizeof(bits));
    }
  }
  if (!in.at_end()) throw CheckpointError("trailer", "unexpected bytes after the last parameter");
  return loaded;
}

}  // namespace dinoyolo
