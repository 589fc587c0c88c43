#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dinoyolo/teacher.h"

namespace dinoyolo {

enum class Site { kP0, kP3, kP4 };

enum class IntegrationStrategy { kNone, kSingleP0, kSingleP3, kDualP3P4, kDualP0P3, kTriple };

std::string to_string(Site site);
/// Lower-case token used in model names and config files, e.g. "dualp0p3".
std::string to_string(IntegrationStrategy strategy);
IntegrationStrategy parse_strategy(std::string_view text);
const std::vector<IntegrationStrategy>& all_strategies();

/// Injection sites of a strategy, in pipeline order P0, P3, P4.
std::vector<Site> plan_injections(IntegrationStrategy strategy);
bool has_site(IntegrationStrategy strategy, Site site);

/// How the P0 output combines with the raw image.
enum class P0Mode {
  kResidual,  // image + gate * projection, gate trainable and zero-initialized
  kReplace,   // projection alone; the gate is fixed at 1 and frozen
};

/// Per-channel scalar gate applied to an injected branch before the residual add.
class GatedFusion {
 public:
  GatedFusion() = default;
  GatedFusion(ParameterStore& store, const std::string& name, int64_t channels, float init = 0.0f,
              bool frozen = false);

  /// residual + gate[c] * branch[:, c]
  nn::Var fuse(const nn::Var& residual, const nn::Var& branch) const;
  nn::Var gated(const nn::Var& branch) const;

  const nn::Var& gate() const { return gate_; }
  nn::Var& gate() { return gate_; }

 private:
  nn::Var gate_;
};

/// Input-level injector: replaces the identity input stage with
/// image + gate * proj_to_3(upsample(teacher(image), p)).
class P0Preprocessor {
 public:
  P0Preprocessor(ParameterStore& store, const std::string& prefix, const TeacherSpec& teacher, int64_t input_size,
                 P0Mode mode = P0Mode::kResidual);

  nn::Var operator()(const nn::Var& image) const;

  const Teacher& teacher() const { return *teacher_; }
  std::shared_ptr<const TeacherTrunk> trunk() const { return teacher_->trunk(); }
  GatedFusion& gate() { return gate_; }
  const GatedFusion& gate() const { return gate_; }
  P0Mode mode() const { return mode_; }

 private:
  std::unique_ptr<Teacher> teacher_;
  nn::Conv proj_to_3_;
  GatedFusion gate_;
  P0Mode mode_;
};

/// Mid-backbone injector: fmap + gate * proj_out(teacher_tokens(proj_in(fmap))).
class FeatureInjector {
 public:
  FeatureInjector(ParameterStore& store, const std::string& prefix, Site site, const TeacherSpec& teacher,
                  int64_t channels, int64_t grid_side, std::shared_ptr<const TeacherTrunk> shared_trunk = nullptr);

  nn::Var operator()(const nn::Var& fmap) const;

  Site site() const { return site_; }
  int64_t channels() const { return channels_; }
  int64_t grid_side() const { return grid_side_; }
  /// Tokens handed to the teacher per image.
  int64_t token_count() const { return grid_side_ * grid_side_; }
  const Teacher& teacher() const { return *teacher_; }
  GatedFusion& gate() { return gate_; }
  const GatedFusion& gate() const { return gate_; }

 private:
  Site site_;
  int64_t channels_, grid_side_;
  nn::Conv proj_in_, proj_out_;
  std::unique_ptr<Teacher> teacher_;
  GatedFusion gate_;
};

/// Grid side at an injection site for a square input: 1 (P0 image), /8, /16.
int64_t site_stride(Site site);

}  // namespace dinoyolo
