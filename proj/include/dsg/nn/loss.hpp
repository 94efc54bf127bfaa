#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "dsg/error.hpp"

namespace dsg::nn {

/// Numerically stable softmax (max subtraction).
inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  const double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

/// -log softmax(logits)[label].
inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw ShapeError("cross_entropy: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum) - logits[label];
}

/// Sum over (i in positives, j in negatives) of max(0, 1 - s_i + s_j).
inline double multilabel_margin(std::span<const double> scores, std::span<const int> positives,
                                std::span<const int> negatives) {
  for (int p : positives) {
    if (std::find(negatives.begin(), negatives.end(), p) != negatives.end()) {
      throw InputError("multilabel_margin: positive and negative sets overlap");
    }
  }
  auto at = [&](int i) {
    if (i < 0 || static_cast<std::size_t>(i) >= scores.size()) {
      throw ShapeError("multilabel_margin: index out of range");
    }
    return scores[static_cast<std::size_t>(i)];
  };
  double loss = 0.0;
  for (int i : positives)
    for (int j : negatives) loss += std::max(0.0, 1.0 - at(i) + at(j));
  return loss;
}

}  // namespace dsg::nn
