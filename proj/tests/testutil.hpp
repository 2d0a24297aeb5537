#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "smc/tensor.hpp"

namespace smc::testing {

struct GradCheck {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool ok = true;
};

/// Central finite differences against reverse-mode gradients. `loss_value`
/// must recompute the scalar loss from the parameters' current values
/// without touching any tape. Pass criterion per element:
/// |ad - fd| <= abs_tol  or  |ad - fd| / max(|ad|, |fd|) <= rel_tol.
inline GradCheck finite_diff_check(const std::function<Tensor()>& loss_builder,
                                   const std::vector<Tensor>& params,
                                   double eps = 1e-5, double rel_tol = 1e-4,
                                   double abs_tol = 1e-7) {
  // Reverse-mode gradients from one taped evaluation.
  std::vector<std::vector<double>> ad;
  {
    Tape tape;
    std::vector<Tensor> mutable_params = params;
    for (auto& p : mutable_params) p.zero_grad();
    TapeScope scope(tape);
    Tensor loss = loss_builder();
    tape.backward(loss);
    for (const auto& p : params) {
      auto g = p.grad();
      ad.emplace_back(g.begin(), g.end());
      if (ad.back().empty()) ad.back().assign(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }

  auto eval = [&]() { return loss_builder().item(); };

  GradCheck res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double up = eval();
      vals[i] = saved - eps;
      const double down = eval();
      vals[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double a = ad[pi][i];
      const double abs_err = std::abs(a - fd);
      const double denom = std::max(std::abs(a), std::abs(fd));
      const double rel_err = denom > 0.0 ? abs_err / denom : 0.0;
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      if (abs_err > abs_tol && rel_err > rel_tol) res.ok = false;
      if (denom > 1e-6) res.max_rel_err = std::max(res.max_rel_err, rel_err);
    }
  }
  return res;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double std_dev = 1.0,
                            bool param = true) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = std_dev * rng.next_gaussian();
  return param ? Tensor::parameter(std::move(shape), std::move(data))
               : Tensor::from_data(std::move(shape), std::move(data));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  auto av = a.values();
  auto bv = b.values();
  double m = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

}  // namespace smc::testing
