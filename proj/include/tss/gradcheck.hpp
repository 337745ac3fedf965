#pragma once

// Central-finite-difference verification of tape gradients. This is the
// oracle every trained component is checked against; it must stay independent
// of the backward implementation (it only runs forward evaluations).

#include <functional>
#include <vector>

#include "tss/nn.hpp"
#include "tss/tensor.hpp"

namespace tss {

// Returns max over all parameter entries of
//   |analytic - central_difference| / max(|analytic|, |numeric|, 1e-12).
// Meaningful at 64-bit precision; 32-bit floats drown the differences.
template <typename Scalar>
double finite_difference_check(const std::function<Tensor<Scalar>()>& f,
                               ParamList<Scalar>& params, Scalar h) {
  if (!(h > Scalar(0))) throw ContractError("finite_difference_check: h <= 0");

  auto eval = [&]() -> Scalar {
    GradPause<Scalar> pause;
    Tensor<Scalar> out = f();
    return out.item();
  };

  Scalar probe1 = eval();
  Scalar probe2 = eval();
  if (probe1 != probe2)
    throw OracleError(
        "finite_difference_check: f is not deterministic (two evaluations "
        "differ)");

  zero_grads(params);
  std::vector<typename TensorStorage<Scalar>::Flat> analytic;
  {
    Tape<Scalar> tape;
    Tensor<Scalar> loss = f();
    tape.backward(loss);
  }
  for (auto& p : params) analytic.push_back(p.tensor.grad());

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi].tensor.values();
    for (Index i = 0; i < values.size(); ++i) {
      Scalar saved = values[i];
      values[i] = saved + h;
      Scalar up = eval();
      values[i] = saved - h;
      Scalar down = eval();
      values[i] = saved;
      double numeric = static_cast<double>(up - down) / (2.0 * static_cast<double>(h));
      double exact = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::abs(exact), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace tss
