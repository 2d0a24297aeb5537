#include "smc/params.hpp"

#include <cmath>

namespace smc {

Tensor ParamRegistry::add(std::string name, Tensor t, ParamCategory cat, bool trainable) {
  if (index_.count(name) != 0) {
    throw UsageError("duplicate parameter name: " + name);
  }
  index_[name] = items_.size();
  items_.push_back(NamedParam{std::move(name), t, cat, trainable});
  return t;
}

const Tensor& ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter name: " + name);
  return items_[it->second].tensor;
}

std::vector<Tensor> ParamRegistry::trainable() const {
  std::vector<Tensor> out;
  for (const auto& p : items_) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

Tensor ParamBuilder::make(const std::string& name, Shape shape, std::vector<double> data,
                          ParamCategory cat, bool trainable) {
  Tensor t = (trainable && !frozen_) ? Tensor::parameter(std::move(shape), std::move(data))
                                     : Tensor::from_data(std::move(shape), std::move(data));
  return reg_.add(name, t, cat, trainable);
}

Tensor ParamBuilder::matrix(const std::string& name, std::int64_t rows, std::int64_t cols,
                            ParamCategory cat, double std_override) {
  const double std_dev = std_override >= 0.0 ? std_override
                                             : 1.0 / std::sqrt(static_cast<double>(rows));
  std::vector<double> data(static_cast<std::size_t>(rows * cols), 0.0);
  if (rng_ != nullptr) {
    for (auto& v : data) v = std_dev * rng_->next_gaussian();
  }
  return make(name, {rows, cols}, std::move(data), cat, true);
}

Tensor ParamBuilder::tensor4(const std::string& name, Shape shape, ParamCategory cat,
                             double std) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> data(static_cast<std::size_t>(n), 0.0);
  if (rng_ != nullptr) {
    for (auto& v : data) v = std * rng_->next_gaussian();
  }
  return make(name, std::move(shape), std::move(data), cat, true);
}

Tensor ParamBuilder::zeros(const std::string& name, Shape shape, ParamCategory cat) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return make(name, std::move(shape), std::vector<double>(n, 0.0), cat, true);
}

Tensor ParamBuilder::ones(const std::string& name, Shape shape, ParamCategory cat) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return make(name, std::move(shape), std::vector<double>(n, 1.0), cat, true);
}

Tensor ParamBuilder::state(const std::string& name, Shape shape, double fill,
                           ParamCategory cat) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return make(name, std::move(shape), std::vector<double>(n, fill), cat, false);
}

}  // namespace smc
