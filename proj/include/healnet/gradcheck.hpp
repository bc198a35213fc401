#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "healnet/tensor.hpp"

namespace healnet {

/// |a - n| / max(|a|, |n|, 1). The unit floor turns the measure into an
/// absolute error for small gradients, where f32 central differences carry
/// rounding noise of order ulp(f)/eps.
inline double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), 1.0});
}

/// Compares backward() against central differences for every coordinate of
/// `x` and returns the largest relative error. `f` must be scalar-valued.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float eps = 1e-3f) {
  if (!(eps >= 1e-4f && eps <= 1e-2f)) throw ContractError("grad_check: eps must be in [1e-4, 1e-2]");
  Tape tape;
  const Tensor leaf = tape.leaf(x);
  const Tensor y = f(leaf);
  tape.backward(y);
  const Tensor analytic = tape.gradient(leaf);

  double worst = 0.0;
  Tensor probe = x.detach();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float orig = x[i];
    probe.mutable_data()[i] = orig + eps;
    const double up = f(probe).item();
    probe.mutable_data()[i] = orig - eps;
    const double down = f(probe).item();
    probe.mutable_data()[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

/// Same check over every trainable parameter of a store. `loss` evaluates
/// the model with the given tape (nullptr for plain evaluation). Parameters
/// are restored afterwards.
inline double grad_check_parameters(ParameterStore& store,
                                    const std::function<Tensor(const ParameterStore&, Tape*)>& loss,
                                    float eps = 1e-3f) {
  Tape tape;
  const Tensor y = loss(store, &tape);
  tape.backward(y);
  const Gradients grads = tape.parameter_gradients(store);

  double worst = 0.0;
  for (std::size_t p = 0; p < store.size(); ++p) {
    Parameter& param = store[ParamId{p}];
    if (!param.trainable) continue;
    const Tensor& g = grads[ParamId{p}];
    for (std::size_t i = 0; i < param.value.numel(); ++i) {
      const float orig = param.value[i];
      param.value.mutable_data()[i] = orig + eps;
      const double up = loss(store, nullptr).item();
      param.value.mutable_data()[i] = orig - eps;
      const double down = loss(store, nullptr).item();
      param.value.mutable_data()[i] = orig;
      worst = std::max(worst, relative_error(g[i], (up - down) / (2.0 * eps)));
    }
  }
  return worst;
}

}  // namespace healnet
