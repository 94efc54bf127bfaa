#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/nn/tensor.hpp"

namespace dsg::nn {

/// A value in the recorded computation. Leaves are parameters or constants; interior nodes
/// carry a closure that pushes their gradient into their inputs.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;

  Tensor& grad_buffer() {
    if (!grad.same_shape(value)) grad = Tensor(value.rows(), value.cols());
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables recording for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(std::move(n));
  }
  static Var leaf(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  Tensor& grad() { return node_->grad_buffer(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const {
    if (node_->value.size() != 1) throw ShapeError("item() needs a 1x1 tensor");
    return node_->value[0];
  }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return node_ != nullptr; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_mode()) {
    n->requires_grad = true;
    n->leaf = false;
    n->backward = std::move(backward);
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
  }
  return Var(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// Reverse pass from a scalar loss. Gradients accumulate into every reachable leaf; the
/// graph is released afterwards and cannot be replayed.
inline void backward(const Var& loss) {
  if (loss.value().size() != 1) throw ShapeError("backward needs a scalar loss");
  const auto& root = loss.node();
  if (root->consumed) throw StaleGraphError("graph already consumed; run forward again");
  if (!root->requires_grad) return;

  if (root->leaf) {
    root->grad_buffer()[0] += 1.0;
    return;
  }

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* node = stack.back().first;
    const std::size_t next = stack.back().second;
    if (next < node->inputs.size()) {
      ++stack.back().second;
      Node* child = node->inputs[next].get();
      if (child->requires_grad && !child->leaf && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.same_shape(n->value)) n->backward(*n);
  }
  for (Node* n : order) {
    n->backward = nullptr;
    n->inputs.clear();
    n->grad = Tensor();
    n->consumed = true;
  }
}

// ---------------------------------------------------------------------------------------------
// Operations

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) throw ShapeError("matmul: inner dimensions differ");
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A(i, p);
      if (av == 0.0) continue;
      const double* br = B.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return detail::make_op(std::move(out), {a, b}, [n, k, m](Node& self) {
    const Tensor& G = self.grad;
    const Tensor& A = self.inputs[0]->value;
    const Tensor& B = self.inputs[1]->value;
    if (detail::wants(self, 0)) {
      Tensor& GA = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* gr = G.data().data() + i * m;
          const double* br = B.data().data() + p * m;
          for (std::size_t j = 0; j < m; ++j) s += gr[j] * br[j];
          GA(i, p) += s;
        }
      }
    }
    if (detail::wants(self, 1)) {
      Tensor& GB = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = G.data().data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A(i, p);
          if (av == 0.0) continue;
          double* gb = GB.data().data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gb[j] += av * gr[j];
        }
      }
    }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& A = a.value();
  Tensor out(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out(j, i) = A(i, j);
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    Tensor& GA = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < GA.rows(); ++i)
      for (std::size_t j = 0; j < GA.cols(); ++j) GA(i, j) += self.grad(j, i);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t in = 0; in < 2; ++in) {
      if (!detail::wants(self, in)) continue;
      Tensor& g = self.inputs[in]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// x + b with b a 1 x cols row broadcast over every row of x.
inline Var add_row(const Var& x, const Var& b) {
  const Tensor& X = x.value();
  const Tensor& B = b.value();
  if (B.rows() != 1 || B.cols() != X.cols()) throw ShapeError("add_row: bias shape mismatch");
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += B(0, j);
  return detail::make_op(std::move(out), {x, b}, [](Node& self) {
    const Tensor& G = self.grad;
    if (detail::wants(self, 0)) {
      Tensor& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
    }
    if (detail::wants(self, 1)) {
      Tensor& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) g(0, j) += G(i, j);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t in = 0; in < 2; ++in) {
      if (!detail::wants(self, in)) continue;
      const Tensor& other = self.inputs[1 - in]->value;
      Tensor& g = self.inputs[in]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return detail::make_op(std::move(out), {a}, [s](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    const Tensor& X = self.inputs[0]->value;
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > 0.0) g[i] += self.grad[i];
  });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = sigmoid(v);
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    const Tensor& Y = self.value;
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * Y[i] * (1.0 - Y[i]);
  });
}

/// Row-wise softmax. When `segments` is non-empty (one id per row, and the matrix is square)
/// entry (i, j) takes part only if segments[i] == segments[j]; other entries are exactly 0.
inline Var softmax_rows(const Var& a, std::span<const int> segments = {}) {
  const Tensor& X = a.value();
  if (!segments.empty() && (segments.size() != X.rows() || X.rows() != X.cols())) {
    throw ShapeError("softmax_rows: segment mask needs a square matrix");
  }
  Tensor out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    auto keep = [&](std::size_t j) { return segments.empty() || segments[i] == segments[j]; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < X.cols(); ++j)
      if (keep(j)) mx = std::max(mx, X(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < X.cols(); ++j) {
      if (!keep(j)) continue;
      out(i, j) = std::exp(X(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) /= sum;
  }
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    const Tensor& Y = self.value;
    const Tensor& G = self.grad;
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < Y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < Y.cols(); ++j) dot += G(i, j) * Y(i, j);
      for (std::size_t j = 0; j < Y.cols(); ++j) g(i, j) += Y(i, j) * (G(i, j) - dot);
    }
  });
}

/// Per-row layer normalization with learned gain and bias (both 1 x cols).
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), m = X.cols();
  if (gamma.rows() != 1 || gamma.cols() != m || beta.rows() != 1 || beta.cols() != m) {
    throw ShapeError("layer_norm: parameter shape mismatch");
  }
  Tensor xhat(n, m), out(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += X(i, j);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (X(i, j) - mean) * (X(i, j) - mean);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat(i, j) = (X(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gamma.value()(0, j) + beta.value()(0, j);
    }
  }
  return detail::make_op(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n, m](Node& self) {
        const Tensor& G = self.grad;
        const Tensor& gam = self.inputs[1]->value;
        if (detail::wants(self, 1)) {
          Tensor& gg = self.inputs[1]->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gg(0, j) += G(i, j) * xhat(i, j);
        }
        if (detail::wants(self, 2)) {
          Tensor& gb = self.inputs[2]->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gb(0, j) += G(i, j);
        }
        if (detail::wants(self, 0)) {
          Tensor& gx = self.inputs[0]->grad_buffer();
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double gh = G(i, j) * gam(0, j);
              mean_g += gh;
              mean_gx += gh * xhat(i, j);
            }
            mean_g *= inv_m;
            mean_gx *= inv_m;
            for (std::size_t j = 0; j < m; ++j) {
              const double gh = G(i, j) * gam(0, j);
              gx(i, j) += inv_std[i] * (gh - mean_g - xhat(i, j) * mean_gx);
            }
          }
        }
      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor out(n, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  return detail::make_op(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t in = 0; in < self.inputs.size(); ++in) {
      const std::size_t w = self.inputs[in]->value.cols();
      if (detail::wants(self, in)) {
        Tensor& g = self.inputs[in]->grad_buffer();
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) g(i, j) += self.grad(i, off + j);
      }
      off += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw ShapeError("concat_rows: column counts differ");
    total += p.rows();
  }
  std::vector<double> data;
  data.reserve(total * m);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return detail::make_op(Tensor(total, m, std::move(data)), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t in = 0; in < self.inputs.size(); ++in) {
      const std::size_t count = self.inputs[in]->value.size();
      if (detail::wants(self, in)) {
        Tensor& g = self.inputs[in]->grad_buffer();
        for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[off + i];
      }
      off += count;
    }
  });
}

inline Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  const Tensor& X = x.value();
  if (start + count > X.cols()) throw ShapeError("slice_cols: range out of bounds");
  Tensor out(X.rows(), count);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = X(i, start + j);
  return detail::make_op(std::move(out), {x}, [start, count](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) g(i, start + j) += self.grad(i, j);
  });
}

/// Rows of x picked by index (indices may repeat; gradients scatter-add).
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  const Tensor& X = x.value();
  Tensor out(idx.size(), X.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= X.rows()) throw ShapeError("gather_rows: index out of range");
    for (std::size_t j = 0; j < X.cols(); ++j) out(r, j) = X(idx[r], j);
  }
  return detail::make_op(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < g.cols(); ++j) g(idx[r], j) += self.grad(r, j);
  });
}

/// Inverted dropout; identity outside training or when rate is 0.
inline Var dropout(const Var& x, double rate, std::mt19937_64& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  for (auto& v : mask.data()) v = keep(rng) ? s : 0.0;
  return mul(x, Var::constant(std::move(mask)));
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return detail::make_op(Tensor(1, 1, s), {x}, [](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    const double up = self.grad[0];
    for (auto& v : g.data()) v += up;
  });
}

/// Sum over rows of -log softmax(logits_r)[labels_r]; rows labelled -1 are skipped.
inline Var cross_entropy(const Var& logits, std::vector<int> labels) {
  const Tensor& X = logits.value();
  if (labels.size() != X.rows()) throw ShapeError("cross_entropy: one label per row required");
  Tensor probs(X.rows(), X.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < X.rows(); ++i) {
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= X.cols()) throw ShapeError("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < X.cols(); ++j) s += std::exp(X(i, j) - mx);
    const double lse = mx + std::log(s);
    loss += lse - X(i, static_cast<std::size_t>(labels[i]));
    for (std::size_t j = 0; j < X.cols(); ++j) probs(i, j) = std::exp(X(i, j) - lse);
  }
  return detail::make_op(Tensor(1, 1, loss), {logits},
                         [probs = std::move(probs), labels = std::move(labels)](Node& self) {
                           Tensor& g = self.inputs[0]->grad_buffer();
                           const double up = self.grad[0];
                           for (std::size_t i = 0; i < g.rows(); ++i) {
                             if (labels[i] < 0) continue;
                             for (std::size_t j = 0; j < g.cols(); ++j) {
                               const double target = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
                               g(i, j) += up * (probs(i, j) - target);
                             }
                           }
                         });
}

/// Sum over rows of sum_{i in P+, j not in P+} max(0, 1 - s_i + s_j). Rows with no positive
/// label contribute nothing.
inline Var multilabel_margin(const Var& scores, std::vector<std::vector<int>> positives) {
  const Tensor& S = scores.value();
  if (positives.size() != S.rows()) throw ShapeError("multilabel_margin: one label set per row");
  Tensor coef(S.rows(), S.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < S.rows(); ++r) {
    std::vector<bool> pos(S.cols(), false);
    for (int p : positives[r]) {
      if (p < 0 || static_cast<std::size_t>(p) >= S.cols()) throw ShapeError("multilabel_margin: label out of range");
      pos[static_cast<std::size_t>(p)] = true;
    }
    for (std::size_t i = 0; i < S.cols(); ++i) {
      if (!pos[i]) continue;
      for (std::size_t j = 0; j < S.cols(); ++j) {
        if (pos[j]) continue;
        const double term = 1.0 - S(r, i) + S(r, j);
        if (std::isnan(term)) loss += term;
        if (term > 0.0) {
          loss += term;
          coef(r, i) -= 1.0;
          coef(r, j) += 1.0;
        }
      }
    }
  }
  return detail::make_op(Tensor(1, 1, loss), {scores}, [coef = std::move(coef)](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * coef[i];
  });
}

}  // namespace dsg::nn
