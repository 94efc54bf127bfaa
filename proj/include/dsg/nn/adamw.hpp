#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/nn/layers.hpp"

namespace dsg::nn {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
        !(eps > 0.0) || !(weight_decay >= 0.0)) {
      throw ConfigError("invalid AdamW hyperparameters");
    }
  }
};

/// AdamW with decoupled weight decay: w <- w (1 - lr wd), then the bias-corrected Adam step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AdamWConfig& config() const noexcept { return cfg_; }
  long step_count() const noexcept { return step_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

  void step(std::span<Parameter> params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value().rows(), p.value().cols());
        v_.emplace_back(p.value().rows(), p.value().cols());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("AdamW: parameter set changed between steps");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (!p.trainable) continue;
      Tensor& w = p.value();
      const Tensor& g = p.grad();
      if (!m_[k].same_shape(w)) throw ShapeError("AdamW: moment shape differs from parameter");
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        w[i] *= 1.0 - cfg_.lr * cfg_.weight_decay;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  long step_ = 0;
};

}  // namespace dsg::nn
