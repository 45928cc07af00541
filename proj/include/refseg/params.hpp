#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refseg/autodiff.hpp"

namespace refseg {

class Rng;

// Named parameter tensors in deterministic (lexicographic) order.
class ParamSet {
 public:
  ad::Tensor& add(const std::string& name, std::vector<int> shape, double fill = 0.0);
  ad::Tensor& at(const std::string& name);
  const ad::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::map<std::string, ad::Tensor>& tensors() { return tensors_; }
  const std::map<std::string, ad::Tensor>& tensors() const { return tensors_; }

  std::size_t total_size() const;
  // Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;
  bool all_finite() const;
  bool operator==(const ParamSet&) const = default;

  // (name, flat index) addressing used by gradient checks.
  double& element(const std::string& name, std::size_t index) { return at(name).data.at(index); }

 private:
  std::map<std::string, ad::Tensor> tensors_;
};

// He-normal initialization: N(0, 2 / fan_in).
void init_he(ad::Tensor& weights, int fan_in, Rng& rng);
void init_normal(ad::Tensor& weights, double stddev, Rng& rng);

// Exposes ParamSet entries as leaves of a tape. Each parameter becomes one
// leaf per tape regardless of how often it is referenced; gradients land in
// `grads` (if given) after Tape::backward.
class Binder {
 public:
  Binder(ad::Tape& tape, const ParamSet& params, ParamSet* grads = nullptr)
      : tape_(tape), params_(params), grads_(grads) {}

  ad::Var operator()(const std::string& name);
  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  const ParamSet& params_;
  ParamSet* grads_;
  std::map<std::string, ad::Var> bound_;
};

// Plain stochastic gradient descent: p <- p - lr * g.
void sgd_step(ParamSet& params, const ParamSet& grads, double learning_rate);

// Adam with bias correction. Moments live alongside the parameters.
struct AdamState {
  ParamSet m;
  ParamSet v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double learning_rate);

// {"name": {"shape": [...], "data": [...]}}. Doubles round-trip exactly.
nlohmann::json params_to_json(const ParamSet& params);
ParamSet params_from_json(const nlohmann::json& j);

// Raises refseg::Error naming the first tensor whose shape differs.
void check_layout(const ParamSet& expected, const ParamSet& actual, const std::string& what);

}  // namespace refseg
