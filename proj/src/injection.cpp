#include "dinoyolo/injection.h"

#include <algorithm>

namespace dinoyolo {

std::string to_string(Site site) {
  switch (site) {
    case Site::kP0:
      return "P0";
    case Site::kP3:
      return "P3";
    case Site::kP4:
      return "P4";
  }
  return "?";
}

std::string to_string(IntegrationStrategy strategy) {
  switch (strategy) {
    case IntegrationStrategy::kNone:
      return "none";
    case IntegrationStrategy::kSingleP0:
      return "singlep0";
    case IntegrationStrategy::kSingleP3:
      return "singlep3";
    case IntegrationStrategy::kDualP3P4:
      return "dualp3p4";
    case IntegrationStrategy::kDualP0P3:
      return "dualp0p3";
    case IntegrationStrategy::kTriple:
      return "triple";
  }
  return "?";
}

const std::vector<IntegrationStrategy>& all_strategies() {
  static const std::vector<IntegrationStrategy> all{
      IntegrationStrategy::kNone,     IntegrationStrategy::kSingleP0, IntegrationStrategy::kSingleP3,
      IntegrationStrategy::kDualP3P4, IntegrationStrategy::kDualP0P3, IntegrationStrategy::kTriple};
  return all;
}

IntegrationStrategy parse_strategy(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (IntegrationStrategy s : all_strategies()) {
    if (to_string(s) == lower) return s;
  }
  throw ConfigError("unknown integration strategy '" + std::string(text) +
                    "' (expected none, singlep0, singlep3, dualp3p4, dualp0p3, triple)");
}

std::vector<Site> plan_injections(IntegrationStrategy strategy) {
  switch (strategy) {
    case IntegrationStrategy::kNone:
      return {};
    case IntegrationStrategy::kSingleP0:
      return {Site::kP0};
    case IntegrationStrategy::kSingleP3:
      return {Site::kP3};
    case IntegrationStrategy::kDualP3P4:
      return {Site::kP3, Site::kP4};
    case IntegrationStrategy::kDualP0P3:
      return {Site::kP0, Site::kP3};
    case IntegrationStrategy::kTriple:
      return {Site::kP0, Site::kP3, Site::kP4};
  }
  return {};
}

bool has_site(IntegrationStrategy strategy, Site site) {
  const auto sites = plan_injections(strategy);
  return std::find(sites.begin(), sites.end(), site) != sites.end();
}

int64_t site_stride(Site site) {
  switch (site) {
    case Site::kP0:
      return 1;
    case Site::kP3:
      return 8;
    case Site::kP4:
      return 16;
  }
  return 1;
}

GatedFusion::GatedFusion(ParameterStore& store, const std::string& name, int64_t channels, float init, bool frozen) {
  gate_ = store.declare(name, {channels}, frozen, Init::constant(init)).var;
}

nn::Var GatedFusion::gated(const nn::Var& branch) const { return ops::channel_scale(branch, gate_); }

nn::Var GatedFusion::fuse(const nn::Var& residual, const nn::Var& branch) const {
  return ops::add(residual, gated(branch));
}

P0Preprocessor::P0Preprocessor(ParameterStore& store, const std::string& prefix, const TeacherSpec& teacher,
                               int64_t input_size, P0Mode mode)
    : mode_(mode) {
  if (input_size % teacher.patch_size != 0) {
    throw ConfigError("input size " + std::to_string(input_size) + " is not divisible by teacher patch size " +
                      std::to_string(teacher.patch_size));
  }
  teacher_ = std::make_unique<Teacher>(store, prefix + ".teacher", teacher, TeacherEntry::kImage,
                                       input_size / teacher.patch_size);
  proj_to_3_ = nn::Conv(store, prefix + ".proj", teacher.dim, 3, 1, 1, 0, /*activation=*/false);
  const bool replace = mode == P0Mode::kReplace;
  gate_ = GatedFusion(store, prefix + ".gate", 3, replace ? 1.0f : 0.0f, /*frozen=*/replace);
}

nn::Var P0Preprocessor::operator()(const nn::Var& image) const {
  nn::Var feats = teacher_->forward_image(image);
  nn::Var up = ops::upsample_nearest(feats, teacher_->spec().patch_size);
  nn::Var branch = proj_to_3_(up);
  return mode_ == P0Mode::kResidual ? gate_.fuse(image, branch) : gate_.gated(branch);
}

FeatureInjector::FeatureInjector(ParameterStore& store, const std::string& prefix, Site site,
                                 const TeacherSpec& teacher, int64_t channels, int64_t grid_side,
                                 std::shared_ptr<const TeacherTrunk> shared_trunk)
    : site_(site), channels_(channels), grid_side_(grid_side) {
  if (site == Site::kP0) throw ConfigError("FeatureInjector mounts at P3 or P4; P0 uses P0Preprocessor");
  proj_in_ = nn::Conv(store, prefix + ".proj_in", channels, teacher.dim, 1, 1, 0, /*activation=*/false);
  teacher_ = std::make_unique<Teacher>(store, prefix + ".teacher", teacher, TeacherEntry::kTokens, grid_side,
                                       std::move(shared_trunk));
  proj_out_ = nn::Conv(store, prefix + ".proj_out", teacher.dim, channels, 1, 1, 0, /*activation=*/false);
  gate_ = GatedFusion(store, prefix + ".gate", channels);
}

nn::Var FeatureInjector::operator()(const nn::Var& fmap) const {
  const Shape& s = fmap.shape();
  if (s.size() != 4 || s[1] != channels_ || s[2] != grid_side_ || s[3] != grid_side_) {
    throw ShapeError(to_string(site_) + " injector expects [N," + std::to_string(channels_) + "," +
                     std::to_string(grid_side_) + "," + std::to_string(grid_side_) + "], got " + shape_str(s));
  }
  nn::Var tokens = ops::tokens_from_map(proj_in_(fmap));
  nn::Var z = teacher_->forward_tokens(tokens);
  nn::Var branch = proj_out_(ops::map_from_tokens(z, s[2], s[3]));
  return gate_.fuse(fmap, branch);
}

}  // namespace dinoyolo
