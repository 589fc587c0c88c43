#include "dinoyolo/detector.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace dinoyolo {

namespace {

const std::map<std::string, ScaleSpec, std::less<>>& scale_presets() {
  static const std::map<std::string, ScaleSpec, std::less<>> table{
      {"S", {"S", 16, 1, 1}},
      {"M", {"M", 24, 2, 1}},
      {"L", {"L", 32, 2, 1}},
      {"L-full", {"L-full", 64, 2, 2}},
  };
  return table;
}

constexpr float kObjectnessPrior = -4.0f;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::array<int64_t, 5> ScaleSpec::channels() const { return {w0, 2 * w0, 4 * w0 * p3_expand, 8 * w0, 8 * w0}; }

const ScaleSpec& scale_preset(std::string_view name) {
  auto it = scale_presets().find(name);
  if (it == scale_presets().end()) throw ConfigError("unknown scale '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> scale_preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : scale_presets()) names.push_back(k);
  return names;
}

std::string ModelConfig::name() const {
  if (strategy == IntegrationStrategy::kNone) return scale + "-baseline";
  std::string t = teacher;
  const std::string suffix = "-full";
  if (t.size() > suffix.size() && t.compare(t.size() - suffix.size(), suffix.size(), suffix) == 0) {
    t.resize(t.size() - suffix.size());
  }
  return scale + "-" + t + "-" + to_string(strategy);
}

void ModelConfig::validate() const {
  scale_preset(scale);
  const TeacherSpec& t = teacher_preset(teacher);
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (input_size < 32 || input_size % 32 != 0) {
    throw ConfigError("input size " + std::to_string(input_size) + " must be a positive multiple of 32");
  }
  if (has_site(strategy, Site::kP0) && input_size % t.patch_size != 0) {
    throw ConfigError("input size " + std::to_string(input_size) + " is not divisible by teacher patch size " +
                      std::to_string(t.patch_size));
  }
}

std::string ModelConfig::to_json() const {
  nlohmann::json j{{"scale", scale},
                   {"teacher", teacher},
                   {"strategy", to_string(strategy)},
                   {"num_classes", num_classes},
                   {"input_size", input_size},
                   {"seed", seed},
                   {"p0_mode", p0_mode == P0Mode::kResidual ? "residual" : "replace"},
                   {"share_teacher", share_teacher}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    c.scale = j.value("scale", c.scale);
    c.teacher = j.value("teacher", c.teacher);
    c.strategy = parse_strategy(j.value("strategy", std::string("none")));
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_size = j.value("input_size", c.input_size);
    c.seed = j.value("seed", c.seed);
    const std::string mode = j.value("p0_mode", std::string("residual"));
    if (mode != "residual" && mode != "replace") throw ConfigError("p0_mode must be residual or replace");
    c.p0_mode = mode == "residual" ? P0Mode::kResidual : P0Mode::kReplace;
    c.share_teacher = j.value("share_teacher", c.share_teacher);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config field: ") + e.what());
  }
  return c;
}

ParamReport make_param_report(int64_t trainable, int64_t frozen) {
  ParamReport r;
  r.trainable = trainable;
  r.frozen = frozen;
  r.total = trainable + frozen;
  r.trainable_fraction = r.total == 0 ? 1.0 : static_cast<double>(trainable) / static_cast<double>(r.total);
  return r;
}

DetectionModel::DetectionModel(const ModelConfig& config, bool materialize)
    : config_(config), store_(config.seed, materialize) {
  config.validate();
  const ScaleSpec& scale = scale_preset(config.scale);
  const TeacherSpec& tspec = teacher_preset(config.teacher);
  const auto ch = scale.channels();
  const int64_t in = config.input_size;

  std::shared_ptr<const TeacherTrunk> shared;
  if (has_site(config.strategy, Site::kP0)) {
    p0_ = std::make_unique<P0Preprocessor>(store_, "p0_injector", tspec, in, config.p0_mode);
    if (config.share_teacher) shared = p0_->trunk();
  }

  stem_ = nn::Conv(store_, "backbone.stem", 3, ch[0], 4, 2, 1);
  const std::array<int64_t, 4> down_out{ch[1], 4 * scale.w0, ch[3], ch[4]};
  int64_t prev = ch[0];
  for (size_t s = 0; s < stages_.size(); ++s) {
    const std::string name = "backbone.stage" + std::to_string(s + 2);
    Stage& st = stages_[s];
    st.down = nn::Conv(store_, name + ".down", prev, down_out[s], 4, 2, 1);
    for (int b = 0; b < scale.blocks; ++b) {
      st.blocks.emplace_back(store_, name + ".block" + std::to_string(b), down_out[s]);
    }
    prev = down_out[s];
    if (s == 1 && ch[2] != down_out[1]) {
      st.widen = nn::Conv(store_, name + ".widen", down_out[1], ch[2], 1, 1, 0);
      prev = ch[2];
    }
    if (s == 1 && has_site(config.strategy, Site::kP3)) {
      p3_ = std::make_unique<FeatureInjector>(store_, "p3_injector", Site::kP3, tspec, ch[2], in / 8, shared);
      if (config.share_teacher && !shared) shared = p3_->teacher().trunk();
    }
    if (s == 2 && has_site(config.strategy, Site::kP4)) {
      p4_ = std::make_unique<FeatureInjector>(store_, "p4_injector", Site::kP4, tspec, ch[3], in / 16, shared);
    }
  }

  const int64_t c3 = ch[2], c4 = ch[3], c5 = ch[4];
  td4_ = nn::Conv(store_, "neck.td4", c5 + c4, c4, 1, 1, 0);
  td3_ = nn::Conv(store_, "neck.td3", c4 + c3, c3, 1, 1, 0);
  down3_ = nn::Conv(store_, "neck.down3", c3, c3, 4, 2, 1);
  bu4_ = nn::Conv(store_, "neck.bu4", c3 + c4, c4, 1, 1, 0);
  down4_ = nn::Conv(store_, "neck.down4", c4, c4, 4, 2, 1);
  bu5_ = nn::Conv(store_, "neck.bu5", c4 + c5, c5, 1, 1, 0);

  const std::array<int64_t, 3> level_ch{c3, c4, c5};
  const int64_t outputs = 5 + config.num_classes;
  for (size_t l = 0; l < 3; ++l) {
    const std::string name = "head.p" + std::to_string(l + 3);
    head_hidden_[l] = nn::Conv(store_, name + ".hidden", level_ch[l], level_ch[l], 3, 1, 1);
    head_out_[l] = nn::Conv(store_, name + ".out", level_ch[l], outputs, 1, 1, 0, /*activation=*/false);
    if (materialize) store_.at(name + ".out.bias").var.mutable_value()[4] = kObjectnessPrior;
  }
}

PyramidPrediction DetectionModel::forward(const nn::Var& images, FeatureTaps* taps) const {
  if (!store_.materialized()) throw ConfigError("model was built shape-only and cannot run forward");
  const Shape& s = images.shape();
  const int64_t in = config_.input_size;
  if (s.size() != 4 || s[1] != 3 || s[2] != in || s[3] != in) {
    throw ShapeError("model expects images [N,3," + std::to_string(in) + "," + std::to_string(in) + "], got " +
                     shape_str(s));
  }
  auto tap = [taps](const char* name, const nn::Var& v) {
    if (taps) (*taps)[name] = v.value();
  };

  nn::Var x = images;
  if (p0_) {
    x = (*p0_)(x);
    tap("P0-out", x);
  }
  x = stem_(x);
  std::array<nn::Var, 3> pyramid;
  for (size_t st = 0; st < stages_.size(); ++st) {
    const Stage& stage = stages_[st];
    x = stage.down(x);
    for (const auto& blk : stage.blocks) x = blk(x);
    if (stage.widen) x = (*stage.widen)(x);
    if (st == 1) {
      tap("P3-pre", x);
      if (p3_) {
        x = (*p3_)(x);
        tap("P3-post", x);
      }
      pyramid[0] = x;
    } else if (st == 2) {
      if (p4_) x = (*p4_)(x);
      tap("P4", x);
      pyramid[1] = x;
    } else if (st == 3) {
      tap("P5", x);
      pyramid[2] = x;
    }
  }

  nn::Var n4 = td4_(ops::concat<float>({ops::upsample_nearest(pyramid[2], 2), pyramid[1]}, 1));
  nn::Var out3 = td3_(ops::concat<float>({ops::upsample_nearest(n4, 2), pyramid[0]}, 1));
  nn::Var out4 = bu4_(ops::concat<float>({down3_(out3), n4}, 1));
  nn::Var out5 = bu5_(ops::concat<float>({down4_(out4), pyramid[2]}, 1));

  PyramidPrediction pred;
  const std::array<nn::Var, 3> feats{out3, out4, out5};
  for (size_t l = 0; l < 3; ++l) pred.levels[l] = head_out_[l](head_hidden_[l](feats[l]));
  return pred;
}

std::vector<nn::Var> DetectionModel::gates() const {
  std::vector<nn::Var> out;
  if (p0_ && p0_->mode() == P0Mode::kResidual) out.push_back(p0_->gate().gate());
  if (p3_) out.push_back(p3_->gate().gate());
  if (p4_) out.push_back(p4_->gate().gate());
  return out;
}

void DetectionModel::set_gates(float value) {
  for (nn::Var g : gates()) g.mutable_value().fill(value);
}

const FeatureInjector* DetectionModel::injector(Site site) const {
  switch (site) {
    case Site::kP3:
      return p3_.get();
    case Site::kP4:
      return p4_.get();
    default:
      return nullptr;
  }
}

std::vector<std::string> DetectionModel::feature_sites() const {
  std::vector<std::string> sites;
  if (p0_) sites.emplace_back("P0-out");
  sites.emplace_back("P3-pre");
  if (p3_) sites.emplace_back("P3-post");
  sites.emplace_back("P4");
  sites.emplace_back("P5");
  return sites;
}

std::array<int64_t, 3> DetectionModel::level_sides() const {
  const int64_t in = config_.input_size;
  return {in / 8, in / 16, in / 32};
}

ParamReport param_report(const DetectionModel& model) {
  int64_t trainable = 0, frozen = 0;
  for (const Parameter& p : model.params().all()) {
    (p.frozen ? frozen : trainable) += p.numel();
  }
  return make_param_report(trainable, frozen);
}

std::pair<std::unique_ptr<DetectionModel>, ParamReport> build_model(const ModelConfig& config, bool materialize) {
  auto model = std::make_unique<DetectionModel>(config, materialize);
  ParamReport report = param_report(*model);
  return {std::move(model), report};
}

double level_size_base(int64_t level_side) { return 4.0 / static_cast<double>(level_side); }

std::vector<std::vector<DetectionBox>> decode(const PyramidPrediction& preds, double conf_threshold) {
  const int64_t n = preds.levels[0].shape()[0];
  std::vector<std::vector<DetectionBox>> out(static_cast<size_t>(n));
  for (const nn::Var& level : preds.levels) {
    const Tensor<float>& t = level.value();
    const int64_t c = t.dim(1), side = t.dim(2);
    const int64_t k = c - 5;
    const int64_t plane = side * side;
    const double base = level_size_base(side);
    for (int64_t b = 0; b < n; ++b) {
      const float* p = t.ptr() + b * c * plane;
      for (int64_t gy = 0; gy < side; ++gy) {
        for (int64_t gx = 0; gx < side; ++gx) {
          const int64_t cell = gy * side + gx;
          int best = 0;
          double best_p = -1.0;
          for (int64_t j = 0; j < k; ++j) {
            const double pj = sigmoid(p[(5 + j) * plane + cell]);
            if (pj > best_p) {
              best_p = pj;
              best = static_cast<int>(j);
            }
          }
          const double conf = sigmoid(p[4 * plane + cell]) * best_p;
          if (conf < conf_threshold) continue;
          const double cx = (static_cast<double>(gx) + sigmoid(p[cell])) / static_cast<double>(side);
          const double cy = (static_cast<double>(gy) + sigmoid(p[plane + cell])) / static_cast<double>(side);
          const double sw = 2.0 * sigmoid(p[2 * plane + cell]);
          const double sh = 2.0 * sigmoid(p[3 * plane + cell]);
          const BoxGeom raw{cx, cy, base * sw * sw, base * sh * sh};
          const BoxGeom clipped =
              BoxGeom::from_xyxy(std::clamp(raw.x1(), 0.0, 1.0), std::clamp(raw.y1(), 0.0, 1.0),
                                 std::clamp(raw.x2(), 0.0, 1.0), std::clamp(raw.y2(), 0.0, 1.0));
          out[static_cast<size_t>(b)].push_back({best, clipped.cx, clipped.cy, clipped.w, clipped.h, conf});
        }
      }
    }
  }
  return out;
}

}  // namespace dinoyolo
