#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "smc/tensor.hpp"

namespace smc {

enum class ParamCategory {
  kFrontend,
  kFfn,
  kMhsa,
  kConv,
  kExperts,
  kRouters,
  kNorms,
  kDecoder,
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamCategory category;
  bool trainable = true;
};

/// Ordered, name-unique collection of every persistent tensor in a model
/// (weights plus batch-norm running statistics). Registration order defines
/// checkpoint layout and init draw order.
class ParamRegistry {
 public:
  Tensor add(std::string name, Tensor t, ParamCategory cat, bool trainable = true);
  const std::vector<NamedParam>& items() const { return items_; }
  const Tensor& find(const std::string& name) const;
  std::vector<Tensor> trainable() const;

 private:
  std::vector<NamedParam> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Creates parameters and registers them. With a null rng every tensor is
/// zero-filled (used for shape-only accounting); `frozen` builds plain
/// non-trainable tensors (used for distillation teachers).
class ParamBuilder {
 public:
  ParamBuilder(ParamRegistry& reg, Rng* rng, bool frozen = false)
      : reg_(reg), rng_(rng), frozen_(frozen) {}

  /// Gaussian init with std 1/sqrt(fan_in) unless overridden.
  Tensor matrix(const std::string& name, std::int64_t rows, std::int64_t cols,
                ParamCategory cat, double std_override = -1.0);
  Tensor tensor4(const std::string& name, Shape shape, ParamCategory cat, double std);
  Tensor zeros(const std::string& name, Shape shape, ParamCategory cat);
  Tensor ones(const std::string& name, Shape shape, ParamCategory cat);
  /// Non-trainable state tensor (running statistics).
  Tensor state(const std::string& name, Shape shape, double fill, ParamCategory cat);

 private:
  Tensor make(const std::string& name, Shape shape, std::vector<double> data,
              ParamCategory cat, bool trainable);
  ParamRegistry& reg_;
  Rng* rng_;
  bool frozen_;
};

}  // namespace smc
