#pragma once

#include <optional>
#include <string>

#include "dinoyolo/ops.h"
#include "dinoyolo/parameter.h"

namespace dinoyolo::nn {

using Var = Variable<float>;

/// Convolution with bias and optional SiLU activation.
class Conv {
 public:
  Conv() = default;
  Conv(ParameterStore& store, const std::string& name, int64_t in_ch, int64_t out_ch, int kernel, int stride,
       int padding, bool activation = true, bool frozen = false);

  Var operator()(const Var& x) const;

  int64_t out_channels() const { return out_ch_; }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_, bias_;
  int64_t out_ch_ = 0;
  int stride_ = 1, padding_ = 0;
  bool activation_ = true;
};

/// x + conv3x3(conv1x1(x)) with a halved hidden width.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ParameterStore& store, const std::string& name, int64_t channels);

  Var operator()(const Var& x) const;

 private:
  Conv reduce_, expand_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int64_t in_features, int64_t out_features, bool frozen,
         float stddev);

  Var operator()(const Var& x) const;
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_, bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int64_t dim, bool frozen);

  Var operator()(const Var& x) const;

 private:
  Var gain_, offset_;
};

}  // namespace dinoyolo::nn
