#include "dinoyolo/parameter.h"

#include <random>

namespace dinoyolo {

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

const Parameter& ParameterStore::declare(const std::string& name, Shape shape, bool frozen, Init init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Parameter p;
  p.name = name;
  p.shape = shape;
  p.frozen = frozen;
  if (materialize_) {
    Tensor<float> t(shape);
    switch (init.kind) {
      case Init::Kind::kConstant:
        t.fill(init.value);
        break;
      case Init::Kind::kNormal: {
        std::mt19937_64 rng(seed_ ^ fnv1a64(name));
        std::normal_distribution<float> dist(0.0f, init.value);
        for (float& v : t.data()) v = dist(rng);
        break;
      }
      case Init::Kind::kUniform: {
        std::mt19937_64 rng(seed_ ^ fnv1a64(name));
        std::uniform_real_distribution<float> dist(-init.value, init.value);
        for (float& v : t.data()) v = dist(rng);
        break;
      }
    }
    p.var = Variable<float>(std::move(t), !frozen);
  }
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return params_.back();
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return params_[it->second];
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return params_[it->second];
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    if (p.var.defined()) p.var.zero_grad();
  }
}

}  // namespace dinoyolo
