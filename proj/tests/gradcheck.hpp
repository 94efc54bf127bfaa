#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "dsg/nn/layers.hpp"

namespace gradcheck {

struct Result {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Central differences over every scalar of every trainable parameter, compared with one
/// reverse pass. Relative error is |a - n| / max(|a|, |n|, floor).
inline Result check(dsg::nn::ParamStore& store, const std::function<dsg::nn::Var()>& loss_fn,
                    double h = 1e-5, double floor = 1e-5) {
  store.zero_grad();
  dsg::nn::backward(loss_fn());
  Result r;
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    const dsg::nn::Tensor analytic = p.grad();
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      const double saved = p.value()[i];
      double plus = 0.0, minus = 0.0;
      {
        dsg::nn::NoGradGuard guard;
        p.value()[i] = saved + h;
        plus = loss_fn().item();
        p.value()[i] = saved - h;
        minus = loss_fn().item();
      }
      p.value()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace gradcheck
