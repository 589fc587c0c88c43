#include "dinoyolo/nn.h"

#include <cmath>

namespace dinoyolo::nn {

Conv::Conv(ParameterStore& store, const std::string& name, int64_t in_ch, int64_t out_ch, int kernel, int stride,
           int padding, bool activation, bool frozen)
    : out_ch_(out_ch), stride_(stride), padding_(padding), activation_(activation) {
  // He-style scaling keeps activations O(1) through the SiLU ladder.
  const float fan_in = static_cast<float>(in_ch * kernel * kernel);
  const float stddev = std::sqrt((activation ? 2.0f : 1.0f) / fan_in);
  weight_ = store.declare(name + ".weight", {out_ch, in_ch, kernel, kernel}, frozen, Init::normal(stddev)).var;
  bias_ = store.declare(name + ".bias", {out_ch}, frozen, Init::constant(0.0f)).var;
}

Var Conv::operator()(const Var& x) const {
  Var y = ops::conv2d(x, weight_, std::optional<Var>(bias_), stride_, padding_);
  return activation_ ? ops::silu(y) : y;
}

ResidualBlock::ResidualBlock(ParameterStore& store, const std::string& name, int64_t channels) {
  const int64_t hidden = std::max<int64_t>(1, channels / 2);
  reduce_ = Conv(store, name + ".reduce", channels, hidden, 1, 1, 0);
  expand_ = Conv(store, name + ".expand", hidden, channels, 3, 1, 1);
}

Var ResidualBlock::operator()(const Var& x) const { return ops::add(x, expand_(reduce_(x))); }

Linear::Linear(ParameterStore& store, const std::string& name, int64_t in_features, int64_t out_features,
               bool frozen, float stddev) {
  weight_ = store.declare(name + ".weight", {out_features, in_features}, frozen, Init::normal(stddev)).var;
  bias_ = store.declare(name + ".bias", {out_features}, frozen, Init::constant(0.0f)).var;
}

Var Linear::operator()(const Var& x) const { return ops::linear(x, weight_, std::optional<Var>(bias_)); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int64_t dim, bool frozen) {
  gain_ = store.declare(name + ".gain", {dim}, frozen, Init::constant(1.0f)).var;
  offset_ = store.declare(name + ".offset", {dim}, frozen, Init::constant(0.0f)).var;
}

Var LayerNorm::operator()(const Var& x) const { return ops::layer_norm(x, gain_, offset_); }

}  // namespace dinoyolo::nn
