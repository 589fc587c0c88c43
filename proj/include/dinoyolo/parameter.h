#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>

#include "dinoyolo/autograd.h"

namespace dinoyolo {

/// How a parameter's initial values are drawn.
struct Init {
  enum class Kind { kConstant, kNormal, kUniform };
  Kind kind = Kind::kConstant;
  float value = 0.0f;  // constant value, normal stddev, or uniform half-width

  static Init constant(float v) { return {Kind::kConstant, v}; }
  static Init normal(float stddev) { return {Kind::kNormal, stddev}; }
  static Init uniform(float bound) { return {Kind::kUniform, bound}; }
};

/// A named weight. Frozen parameters are created without requires_grad, so no
/// op ever accumulates a gradient into them.
struct Parameter {
  std::string name;
  Shape shape;
  bool frozen = false;
  Variable<float> var;  // undefined when the store is shape-only

  int64_t numel() const { return shape_numel(shape); }
};

/// Owns every parameter of a model, keyed by unique path-like names.
///
/// Each parameter is initialized from its own RNG stream seeded by
/// (seed, name), so a parameter's initial values do not depend on which other
/// parameters exist. Two models built from the same seed therefore share all
/// identically named weights.
class ParameterStore {
 public:
  explicit ParameterStore(uint64_t seed, bool materialize = true) : seed_(seed), materialize_(materialize) {}

  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  /// Declares a parameter; throws ConfigError on duplicate names.
  const Parameter& declare(const std::string& name, Shape shape, bool frozen, Init init);

  const Parameter& at(const std::string& name) const;
  Parameter& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  /// Parameters in declaration order.
  const std::deque<Parameter>& all() const { return params_; }
  std::deque<Parameter>& all() { return params_; }

  bool materialized() const { return materialize_; }
  uint64_t seed() const { return seed_; }

  void zero_grad();

 private:
  uint64_t seed_;
  bool materialize_;
  std::deque<Parameter> params_;
  std::unordered_map<std::string, size_t> index_;
};

uint64_t fnv1a64(const std::string& text);

}  // namespace dinoyolo
