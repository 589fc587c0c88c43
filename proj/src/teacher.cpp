#include "dinoyolo/teacher.h"

#include <map>

namespace dinoyolo {

namespace {

constexpr float kInitStd = 0.02f;

const std::map<std::string, TeacherSpec, std::less<>>& presets() {
  static const std::map<std::string, TeacherSpec, std::less<>> table = [] {
    std::map<std::string, TeacherSpec, std::less<>> t;
    auto add = [&t](std::string name, int depth, int64_t dim, int heads, int patch, int64_t grid) {
      TeacherSpec s;
      s.name = name;
      s.depth = depth;
      s.dim = dim;
      s.heads = heads;
      s.patch_size = patch;
      s.grid = grid;
      t.emplace(std::move(name), s);
    };
    add("vitb16-full", 12, 768, 12, 16, 14);
    add("vitl16-full", 24, 1024, 16, 16, 14);
    add("toy-tiny", 2, 32, 4, 8, 8);
    add("toy-small", 3, 64, 4, 8, 8);
    return t;
  }();
  return table;
}

}  // namespace

void TeacherSpec::validate() const {
  if (depth < 0) throw ConfigError("teacher depth must be nonnegative");
  if (dim < 1 || heads < 1 || dim % heads != 0) {
    throw ConfigError("teacher heads (" + std::to_string(heads) + ") must divide width " + std::to_string(dim));
  }
  if (patch_size < 1) throw ConfigError("teacher patch size must be positive");
  if (mlp_ratio < 1) throw ConfigError("teacher mlp_ratio must be positive");
}

const TeacherSpec& teacher_preset(std::string_view name) {
  auto it = presets().find(name);
  if (it == presets().end()) throw ConfigError("unknown teacher variant '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> teacher_preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : presets()) names.push_back(k);
  return names;
}

int64_t teacher_block_params(const TeacherSpec& spec) {
  const int64_t d = spec.dim, h = spec.mlp_ratio;
  return (4 + 2 * h) * d * d + (9 + h) * d;
}

int64_t teacher_trunk_params(const TeacherSpec& spec) { return spec.depth * teacher_block_params(spec) + 2 * spec.dim; }

int64_t teacher_entry_params(const TeacherSpec& spec, TeacherEntry entry, int64_t grid_side) {
  const int64_t pos = spec.include_positional ? grid_side * grid_side * spec.dim : 0;
  if (entry == TeacherEntry::kTokens) return pos;
  const int64_t p = spec.patch_size;
  return 3 * p * p * spec.dim + spec.dim + pos;
}

int64_t count_teacher_params(const TeacherSpec& spec) {
  return teacher_entry_params(spec, TeacherEntry::kImage, spec.grid) + teacher_trunk_params(spec);
}

TeacherTrunk::TeacherTrunk(ParameterStore& store, const std::string& prefix, const TeacherSpec& spec)
    : spec_(spec) {
  spec.validate();
  const int64_t d = spec.dim;
  const bool fz = spec.frozen;
  for (int i = 0; i < spec.depth; ++i) {
    const std::string b = prefix + ".blocks." + std::to_string(i);
    Block blk;
    blk.norm1 = nn::LayerNorm(store, b + ".norm1", d, fz);
    nn::Linear q(store, b + ".attn.q", d, d, fz, kInitStd);
    nn::Linear k(store, b + ".attn.k", d, d, fz, kInitStd);
    nn::Linear v(store, b + ".attn.v", d, d, fz, kInitStd);
    nn::Linear o(store, b + ".attn.out", d, d, fz, kInitStd);
    blk.attn = {q.weight(), q.bias(), k.weight(), k.bias(), v.weight(), v.bias(), o.weight(), o.bias()};
    blk.norm2 = nn::LayerNorm(store, b + ".norm2", d, fz);
    blk.fc1 = nn::Linear(store, b + ".mlp.fc1", d, d * spec.mlp_ratio, fz, kInitStd);
    blk.fc2 = nn::Linear(store, b + ".mlp.fc2", d * spec.mlp_ratio, d, fz, kInitStd);
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = nn::LayerNorm(store, prefix + ".norm", d, fz);
}

nn::Var TeacherTrunk::operator()(const nn::Var& tokens) const {
  nn::Var x = tokens;
  for (const Block& blk : blocks_) {
    x = ops::add(x, ops::multi_head_self_attention(blk.norm1(x), blk.attn, spec_.heads));
    x = ops::add(x, blk.fc2(ops::gelu(blk.fc1(blk.norm2(x)))));
  }
  return final_norm_(x);
}

Teacher::Teacher(ParameterStore& store, const std::string& prefix, const TeacherSpec& spec, TeacherEntry entry,
                 int64_t grid_side, std::shared_ptr<const TeacherTrunk> shared_trunk)
    : spec_(spec), entry_(entry), grid_side_(grid_side) {
  spec.validate();
  const bool fz = spec.frozen;
  if (entry == TeacherEntry::kImage) {
    const int64_t p = spec.patch_size;
    patch_weight_ =
        store.declare(prefix + ".patch_embed.weight", {spec.dim, 3, p, p}, fz, Init::normal(kInitStd)).var;
    patch_bias_ = store.declare(prefix + ".patch_embed.bias", {spec.dim}, fz, Init::constant(0.0f)).var;
  }
  if (spec.include_positional) {
    const std::string name = prefix + (entry == TeacherEntry::kImage ? ".pos_embed" : ".token_pos_embed");
    pos_ = store.declare(name, {grid_side * grid_side, spec.dim}, fz, Init::normal(kInitStd)).var;
  }
  trunk_ = shared_trunk ? std::move(shared_trunk) : std::make_shared<const TeacherTrunk>(store, prefix, spec);
}

nn::Var Teacher::patch_embed(const nn::Var& image) const {
  if (entry_ != TeacherEntry::kImage) throw ConfigError("teacher was built for token entry, not images");
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != 3) throw ShapeError("teacher image must be [N,3,H,W], got " + shape_str(s));
  const int p = spec_.patch_size;
  if (s[2] % p != 0 || s[3] % p != 0) {
    throw ConfigError("image extents " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                      " are not divisible by patch size " + std::to_string(p));
  }
  nn::Var grid = ops::conv2d(image, patch_weight_, std::optional<nn::Var>(patch_bias_), p, 0);
  nn::Var tokens = ops::tokens_from_map(grid);
  if (spec_.include_positional) {
    if (tokens.shape()[1] != pos_.shape()[0]) {
      throw ShapeError("image yields " + std::to_string(tokens.shape()[1]) + " patches but the positional table has " +
                       std::to_string(pos_.shape()[0]));
    }
    tokens = ops::add(tokens, pos_);
  }
  return tokens;
}

nn::Var Teacher::forward_image(const nn::Var& image) const {
  nn::Var tokens = (*trunk_)(patch_embed(image));
  const int p = spec_.patch_size;
  return ops::map_from_tokens(tokens, image.shape()[2] / p, image.shape()[3] / p);
}

nn::Var Teacher::forward_tokens(const nn::Var& tokens) const {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[2] != spec_.dim) {
    throw ShapeError("teacher expects tokens of width " + std::to_string(spec_.dim) + ", got " + shape_str(s));
  }
  nn::Var x = tokens;
  if (entry_ == TeacherEntry::kTokens && spec_.include_positional) {
    if (s[1] != pos_.shape()[0]) {
      throw ShapeError("teacher positional table covers " + std::to_string(pos_.shape()[0]) + " tokens, got " +
                       std::to_string(s[1]));
    }
    x = ops::add(x, pos_);
  }
  return (*trunk_)(x);
}

}  // namespace dinoyolo
