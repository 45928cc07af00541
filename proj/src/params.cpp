#include "refseg/params.hpp"

#include <cmath>

#include "refseg/error.hpp"
#include "refseg/rng.hpp"

namespace refseg {

ad::Tensor& ParamSet::add(const std::string& name, std::vector<int> shape, double fill) {
  auto [it, inserted] = tensors_.emplace(name, ad::Tensor(std::move(shape), fill));
  if (!inserted) throw Error("duplicate parameter " + name);
  return it->second;
}

ad::Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter " + name);
  return it->second;
}

const ad::Tensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter " + name);
  return it->second;
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) out.add(name, t.shape);
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [name, t] : tensors_) {
    auto it = other.tensors_.find(name);
    if (it == other.tensors_.end() || it->second.shape != t.shape) return false;
  }
  return true;
}

bool ParamSet::all_finite() const {
  for (const auto& [_, t] : tensors_) {
    for (double v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void init_he(ad::Tensor& weights, int fan_in, Rng& rng) {
  init_normal(weights, std::sqrt(2.0 / fan_in), rng);
}

void init_normal(ad::Tensor& weights, double stddev, Rng& rng) {
  for (double& v : weights.data) v = rng.normal(0.0, stddev);
}

ad::Var Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ad::Tensor* sink = grads_ ? &grads_->at(name) : nullptr;
  ad::Var v = tape_.leaf(params_.at(name), sink);
  bound_.emplace(name, v);
  return v;
}

void sgd_step(ParamSet& params, const ParamSet& grads, double learning_rate) {
  for (auto& [name, t] : params.tensors()) {
    const auto& g = grads.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= learning_rate * g[i];
  }
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double learning_rate) {
  if (state.step == 0) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params.tensors()) {
    const auto& g = grads.at(name).data;
    auto& m = state.m.at(name).data;
    auto& v = state.v.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      t.data[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

nlohmann::json params_to_json(const ParamSet& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : params.tensors()) {
    j[name] = {{"shape", t.shape}, {"data", t.data}};
  }
  return j;
}

ParamSet params_from_json(const nlohmann::json& j) {
  ParamSet out;
  for (const auto& [name, entry] : j.items()) {
    auto shape = entry.at("shape").get<std::vector<int>>();
    auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != ad::shape_numel(shape)) {
      throw Error("parameter " + name + " data does not match shape " + ad::shape_str(shape));
    }
    out.add(name, shape).data.assign(data.begin(), data.end());
  }
  return out;
}

void check_layout(const ParamSet& expected, const ParamSet& actual, const std::string& what) {
  for (const auto& [name, t] : expected.tensors()) {
    if (!actual.contains(name)) throw Error(what + ": missing parameter " + name);
    if (actual.at(name).shape != t.shape) {
      throw Error(what + ": parameter " + name + " has shape " +
                  ad::shape_str(actual.at(name).shape) + ", expected " + ad::shape_str(t.shape));
    }
  }
  if (actual.tensors().size() != expected.tensors().size()) {
    throw Error(what + ": unexpected extra parameters");
  }
}

}  // namespace refseg
