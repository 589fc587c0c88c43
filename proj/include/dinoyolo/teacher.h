#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dinoyolo/nn.h"

namespace dinoyolo {

/// Frozen vision-transformer configuration.
struct TeacherSpec {
  std::string name;
  int depth = 0;
  int64_t dim = 0;
  int heads = 1;
  int mlp_ratio = 4;
  int patch_size = 1;
  bool include_positional = true;
  bool frozen = true;
  /// Side of the positional table used when the teacher is counted standalone
  /// (its pretraining grid). Models size their tables to the actual site grid.
  int64_t grid = 14;

  void validate() const;
};

/// Preset by name: vitb16-full, vitl16-full, toy-tiny, toy-small.
const TeacherSpec& teacher_preset(std::string_view name);
std::vector<std::string> teacher_preset_names();

/// Where tokens enter the teacher.
enum class TeacherEntry {
  kImage,   // p x p patch embedding of an RGB image, positional table of the patch grid
  kTokens,  // pre-projected token grid, dedicated positional table of that grid
};

// Closed-form parameter counts. With D = dim, h = mlp_ratio:
//   block  = 4D (two norms) + 4(D^2 + D) (q, k, v, out) + 2hD^2 + hD + D (MLP)
//          = (4 + 2h) D^2 + (9 + h) D
//   trunk  = depth * block + 2D (final norm)
//   image entry  = 3 p^2 D + D (patch projection) + [grid^2 D positional]
//   token entry  = [grid^2 D positional]
int64_t teacher_block_params(const TeacherSpec& spec);
int64_t teacher_trunk_params(const TeacherSpec& spec);
int64_t teacher_entry_params(const TeacherSpec& spec, TeacherEntry entry, int64_t grid_side);
/// Image-entry teacher at the spec's own grid: entry + trunk.
int64_t count_teacher_params(const TeacherSpec& spec);

/// Transformer block stack plus final norm; shared between entry points.
class TeacherTrunk {
 public:
  TeacherTrunk(ParameterStore& store, const std::string& prefix, const TeacherSpec& spec);

  /// Pre-norm blocks (attention and MLP, both residual) then the final norm.
  nn::Var operator()(const nn::Var& tokens) const;

 private:
  struct Block {
    nn::LayerNorm norm1, norm2;
    ops::AttentionParams<float> attn;
    nn::Linear fc1, fc2;
  };
  TeacherSpec spec_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
};

/// Frozen stand-in for a pretrained ViT: an entry (patch embedding or token
/// positional table) in front of a possibly shared trunk.
class Teacher {
 public:
  /// `grid_side` sizes the positional table. When `shared_trunk` is given the
  /// block stack is reused and no trunk parameters are declared.
  Teacher(ParameterStore& store, const std::string& prefix, const TeacherSpec& spec, TeacherEntry entry,
          int64_t grid_side, std::shared_ptr<const TeacherTrunk> shared_trunk = nullptr);

  /// [N,3,H,W] -> [N,(H/p)(W/p),D].
  nn::Var patch_embed(const nn::Var& image) const;
  /// [N,3,H,W] -> [N,D,H/p,W/p].
  nn::Var forward_image(const nn::Var& image) const;
  /// [N,T,D] -> [N,T,D]. Adds the token positional table in token-entry mode.
  nn::Var forward_tokens(const nn::Var& tokens) const;

  const TeacherSpec& spec() const { return spec_; }
  TeacherEntry entry() const { return entry_; }
  int64_t grid_side() const { return grid_side_; }
  const std::shared_ptr<const TeacherTrunk>& trunk() const { return trunk_; }

 private:
  TeacherSpec spec_;
  TeacherEntry entry_;
  int64_t grid_side_;
  nn::Var patch_weight_, patch_bias_, pos_;
  std::shared_ptr<const TeacherTrunk> trunk_;
};

}  // namespace dinoyolo
