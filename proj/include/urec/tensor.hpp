#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "urec/error.hpp"
#include "urec/rng.hpp"

namespace urec {

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap value handle onto a graph node. Ops record a backward
// closure only when some input requires gradients, so inference builds no
// graph at all and frozen weight matrices never get their dW products
// computed. Graphs are built and walked by one logical thread; node data is
// treated as immutable once an op has consumed it.

namespace detail {

template <typename T>
struct Node {
  std::vector<size_t> shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily; size()==data.size() once active
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;  // grad-requiring inputs only
  std::function<void()> backward_fn;

  size_t size() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

inline size_t shape_product(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// c[i,j] += sum_k a[i,k] * b[k,j]
template <typename T>
void mm_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      const T aip = ar[p];
      const T* br = b + p * n;
      for (size_t j = 0; j < n; ++j) cr[j] += aip * br[j];
    }
  }
}

// c[i,j] += sum_p a[i,p] * b[j,p]   (b row-major [n,p], used transposed)
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, size_t m, size_t p, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* ar = a + i * p;
    T* cr = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const T* br = b + j * p;
      T s = T(0);
      for (size_t q = 0; q < p; ++q) s += ar[q] * br[q];
      cr[j] += s;
    }
  }
}

// c[k,j] += sum_i a[i,k] * b[i,j]   (a row-major [m,k], used transposed)
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    const T* br = b + i * n;
    for (size_t p = 0; p < k; ++p) {
      const T aip = ar[p];
      T* cr = c + p * n;
      for (size_t j = 0; j < n; ++j) cr[j] += aip * br[j];
    }
  }
}

}  // namespace detail

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

public:
  using Node = detail::Node<T>;

  Tensor() : n_(std::make_shared<Node>()) {}

  static Tensor zeros(std::vector<size_t> shape) {
    Tensor t;
    t.n_->data.assign(detail::shape_product(shape), T(0));
    t.n_->shape = std::move(shape);
    return t;
  }

  static Tensor full(std::vector<size_t> shape, T value) {
    Tensor t;
    t.n_->data.assign(detail::shape_product(shape), value);
    t.n_->shape = std::move(shape);
    return t;
  }

  static Tensor from(std::vector<size_t> shape, std::vector<T> data) {
    if (detail::shape_product(shape) != data.size())
      raise(ErrorKind::dimension, "tensor data length " + std::to_string(data.size()) +
                                      " does not match shape " + detail::shape_str(shape));
    Tensor t;
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  static Tensor randn(std::vector<size_t> shape, Rng& rng, T stddev) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.n_->data) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return t;
  }

  const std::vector<size_t>& shape() const { return n_->shape; }
  size_t size() const { return n_->data.size(); }
  size_t rows() const { return n_->shape.empty() ? 0 : n_->shape[0]; }
  size_t cols() const { return n_->shape.size() < 2 ? 1 : n_->shape[1]; }

  std::vector<T>& data() { return n_->data; }
  const std::vector<T>& data() const { return n_->data; }

  T item() const {
    if (size() != 1)
      raise(ErrorKind::contract, "item() on non-scalar tensor " + detail::shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }

  bool grad_ready() const { return !n_->data.empty() && n_->grad.size() == n_->data.size(); }
  std::vector<T>& grad() {
    if (!grad_ready()) raise(ErrorKind::contract, "gradient not populated for this tensor");
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    if (!grad_ready()) raise(ErrorKind::contract, "gradient not populated for this tensor");
    return n_->grad;
  }

  void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

  // Value-only copy, cut loose from the graph.
  Tensor detach() const {
    Tensor t;
    t.n_->shape = n_->shape;
    t.n_->data = n_->data;
    return t;
  }

  // Reverse-mode backprop from a scalar. Accumulates into .grad of every
  // reachable tensor that requires gradients.
  void backward() const {
    if (size() != 1) raise(ErrorKind::contract, "backward() requires a scalar loss");
    if (!n_->requires_grad) return;

    // Iterative post-order DFS; deterministic since parent order is fixed.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
      Node* node;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    visited.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        Node* p = f.node->parents[f.next_parent++].get();
        if (visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn();
    }
  }

  std::shared_ptr<Node> node() const { return n_; }
  Node* raw() const { return n_.get(); }

private:
  std::shared_ptr<Node> n_;
};

namespace detail {

// Wires `out` into the graph when any input carries gradients. The closure
// is built by the caller after `out` exists, so it can capture out.raw().
template <typename T, typename F>
void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> inputs, F&& make_backward) {
  bool need = false;
  for (const auto& t : inputs) need = need || t.requires_grad();
  if (!need) return;
  out.raw()->requires_grad = true;
  for (const auto& t : inputs)
    if (t.requires_grad()) out.raw()->parents.push_back(t.node());
  out.raw()->backward_fn = make_backward();
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    raise(ErrorKind::dimension, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = Tensor<T>::zeros(a.shape());
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::attach(out, {a, b}, [&] {
    return [o = out.raw(), an = a.node(), bn = b.node(), n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i];
      }
    };
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = Tensor<T>::zeros(a.shape());
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::attach(out, {a, b}, [&] {
    return [o = out.raw(), an = a.node(), bn = b.node(), n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < n; ++i) bn->grad[i] -= o->grad[i];
      }
    };
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = Tensor<T>::zeros(a.shape());
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::attach(out, {a, b}, [&] {
    return [o = out.raw(), an = a.node(), bn = b.node(), n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < n; ++i) an->grad[i] += o->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i] * an->data[i];
      }
    };
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = Tensor<T>::zeros(a.shape());
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * factor;
  detail::attach(out, {a}, [&] {
    return [o = out.raw(), an = a.node(), factor, n] {
      an->ensure_grad();
      for (size_t i = 0; i < n; ++i) an->grad[i] += o->grad[i] * factor;
    };
  });
  return out;
}

// wa*a + wb*b on same-shape tensors; the combined-loss primitive.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, T wa, const Tensor<T>& b, T wb) {
  detail::check_same_shape(a, b, "weighted_sum");
  auto out = Tensor<T>::zeros(a.shape());
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = wa * a.data()[i] + wb * b.data()[i];
  detail::attach(out, {a, b}, [&] {
    return [o = out.raw(), an = a.node(), bn = b.node(), wa, wb, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < n; ++i) an->grad[i] += wa * o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < n; ++i) bn->grad[i] += wb * o->grad[i];
      }
    };
  });
  return out;
}

// Broadcasts a row vector over every row of a matrix (bias add).
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.shape().size() != 2 || bias.shape().size() != 1 || x.cols() != bias.size())
    raise(ErrorKind::dimension, "add_rows: incompatible shapes " + detail::shape_str(x.shape()) +
                                    " vs " + detail::shape_str(bias.shape()));
  const size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  detail::attach(out, {x, bias}, [&] {
    return [o = out.raw(), xn = x.node(), bn = bias.node(), m, n] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < m * n; ++i) xn->grad[i] += o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) bn->grad[j] += o->grad[i * n + j];
      }
    };
  });
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    raise(ErrorKind::dimension, "matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                                    " x " + detail::shape_str(b.shape()));
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto out = Tensor<T>::zeros({m, n});
  detail::mm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  detail::attach(out, {a, b}, [&] {
    return [o = out.raw(), an = a.node(), bn = b.node(), m, k, n] {
      if (an->requires_grad) {  // dA += dC * B^T
        an->ensure_grad();
        detail::mm_nt_acc(o->grad.data(), bn->data.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {  // dB += A^T * dC
        bn->ensure_grad();
        detail::mm_tn_acc(an->data.data(), o->grad.data(), bn->grad.data(), m, k, n);
      }
    };
  });
  return out;
}

// a [m,k] times b^T where b is stored [n,k]; the LoRA-friendly product.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    raise(ErrorKind::dimension, "matmul_nt: incompatible shapes " + detail::shape_str(a.shape()) +
                                    " x " + detail::shape_str(b.shape()) + "^T");
  const size_t m = a.rows(), k = a.cols(), n = b.rows();
  auto out = Tensor<T>::zeros({m, n});
  detail::mm_nt_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  detail::attach(out, {a, b}, [&] {
    return [o = out.raw(), an = a.node(), bn = b.node(), m, k, n] {
      if (an->requires_grad) {  // dA += dC * B
        an->ensure_grad();
        detail::mm_acc(o->grad.data(), bn->data.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {  // dB += dC^T * A
        bn->ensure_grad();
        detail::mm_tn_acc(o->grad.data(), an->data.data(), bn->grad.data(), m, n, k);
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// tanh-approximated GELU; smooth everywhere, which keeps finite-difference
// gradient checks clean.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const size_t n = x.size();
  auto out = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x.data()[i]);
    const double t = std::tanh(kC * (v + kA * v * v * v));
    out.data()[i] = static_cast<T>(0.5 * v * (1.0 + t));
  }
  detail::attach(out, {x}, [&] {
    return [o = out.raw(), xn = x.node(), n] {
      xn->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(xn->data[i]);
        const double u = kC * (v + kA * v * v * v);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        xn->grad[i] += o->grad[i] * static_cast<T>(d);
      }
    };
  });
  return out;
}

// Per-row layer normalization with learnable gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.shape().size() != 2 || gain.size() != x.cols() || bias.size() != x.cols())
    raise(ErrorKind::dimension, "layer_norm: incompatible shapes " + detail::shape_str(x.shape()) +
                                    ", " + detail::shape_str(gain.shape()) + ", " +
                                    detail::shape_str(bias.shape()));
  const size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto rstd = std::make_shared<std::vector<T>>(m);
  for (size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    double mean = 0;
    for (size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0;
    for (size_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[i] = r;
    for (size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>((row[j] - mean) * r);
      (*xhat)[i * n + j] = h;
      out.data()[i * n + j] = gain.data()[j] * h + bias.data()[j];
    }
  }
  detail::attach(out, {x, gain, bias}, [&] {
    return [o = out.raw(), xn = x.node(), gn = gain.node(), bn = bias.node(), xhat, rstd, m, n] {
      for (size_t i = 0; i < m; ++i) {
        const T* go = o->grad.data() + i * n;
        const T* h = xhat->data() + i * n;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (size_t j = 0; j < n; ++j) gn->grad[j] += go[j] * h[j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t j = 0; j < n; ++j) bn->grad[j] += go[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double sum_dh = 0, sum_dh_h = 0;
          for (size_t j = 0; j < n; ++j) {
            const double dh = static_cast<double>(go[j]) * gn->data[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (size_t j = 0; j < n; ++j) {
            const double dh = static_cast<double>(go[j]) * gn->data[j];
            xn->grad[i * n + j] += static_cast<T>(
                (*rstd)[i] * (dh - sum_dh * inv_n - h[j] * sum_dh_h * inv_n));
          }
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

// Row lookup: out[i,:] = table[ids[i],:].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int32_t>& ids) {
  if (table.shape().size() != 2)
    raise(ErrorKind::dimension, "embedding: table must be a matrix, got " +
                                    detail::shape_str(table.shape()));
  const size_t v = table.rows(), d = table.cols(), m = ids.size();
  for (int32_t id : ids)
    if (id < 0 || static_cast<size_t>(id) >= v)
      raise(ErrorKind::index, "embedding: id " + std::to_string(id) + " out of range [0, " +
                                  std::to_string(v) + ")");
  auto out = Tensor<T>::zeros({m, d});
  for (size_t i = 0; i < m; ++i)
    std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  detail::attach(out, {table}, [&] {
    return [o = out.raw(), tn = table.node(), ids, d, m] {
      tn->ensure_grad();
      for (size_t i = 0; i < m; ++i) {
        T* dst = tn->grad.data() + static_cast<size_t>(ids[i]) * d;
        const T* src = o->grad.data() + i * d;
        for (size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  });
  return out;
}

// Selects rows of x: out[i,:] = x[rows[i],:].
template <typename T>
Tensor<T> row_select(const Tensor<T>& x, const std::vector<size_t>& rows) {
  if (x.shape().size() != 2)
    raise(ErrorKind::dimension, "row_select: expected matrix, got " + detail::shape_str(x.shape()));
  const size_t n = x.cols();
  for (size_t r : rows)
    if (r >= x.rows())
      raise(ErrorKind::index, "row_select: row " + std::to_string(r) + " out of range");
  auto out = Tensor<T>::zeros({rows.size(), n});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().data() + rows[i] * n, n, out.data().data() + i * n);
  detail::attach(out, {x}, [&] {
    return [o = out.raw(), xn = x.node(), rows, n] {
      xn->ensure_grad();
      for (size_t i = 0; i < rows.size(); ++i) {
        T* dst = xn->grad.data() + rows[i] * n;
        const T* src = o->grad.data() + i * n;
        for (size_t j = 0; j < n; ++j) dst[j] += src[j];
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Multi-head causal self-attention over a packed ragged batch.
// q,k,v are [total_tokens, d_model]; offsets[b]..offsets[b+1] delimit
// sequence b. Softmax probabilities are kept for the backward pass.
template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const std::vector<size_t>& offsets, size_t n_heads) {
  detail::check_same_shape(q, k, "causal_self_attention");
  detail::check_same_shape(q, v, "causal_self_attention");
  const size_t total = q.rows(), d = q.cols();
  if (d % n_heads != 0)
    raise(ErrorKind::dimension, "causal_self_attention: d_model " + std::to_string(d) +
                                    " not divisible by heads " + std::to_string(n_heads));
  if (offsets.empty() || offsets.back() != total)
    raise(ErrorKind::contract, "causal_self_attention: bad offsets");
  const size_t dh = d / n_heads;
  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Probabilities stored ragged: for each sequence, n_heads triangular T_b x T_b blocks.
  size_t prob_total = 0;
  for (size_t b = 0; b + 1 < offsets.size(); ++b) {
    const size_t len = offsets[b + 1] - offsets[b];
    prob_total += n_heads * len * len;
  }
  auto probs = std::make_shared<std::vector<T>>(prob_total, T(0));

  auto out = Tensor<T>::zeros({total, d});
  size_t pbase = 0;
  for (size_t b = 0; b + 1 < offsets.size(); ++b) {
    const size_t s0 = offsets[b];
    const size_t len = offsets[b + 1] - s0;
    for (size_t h = 0; h < n_heads; ++h) {
      const size_t c0 = h * dh;
      T* pblk = probs->data() + pbase + h * len * len;
      for (size_t i = 0; i < len; ++i) {
        const T* qi = q.data().data() + (s0 + i) * d + c0;
        T* pi = pblk + i * len;
        // scores for j <= i, max-subtracted softmax
        T mx = -std::numeric_limits<T>::infinity();
        for (size_t j = 0; j <= i; ++j) {
          const T* kj = k.data().data() + (s0 + j) * d + c0;
          T s = T(0);
          for (size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt_dh;
          pi[j] = s;
          mx = std::max(mx, s);
        }
        double denom = 0;
        for (size_t j = 0; j <= i; ++j) {
          const double e = std::exp(static_cast<double>(pi[j] - mx));
          pi[j] = static_cast<T>(e);
          denom += e;
        }
        const T inv = static_cast<T>(1.0 / denom);
        T* oi = out.data().data() + (s0 + i) * d + c0;
        for (size_t j = 0; j <= i; ++j) {
          pi[j] *= inv;
          const T* vj = v.data().data() + (s0 + j) * d + c0;
          const T pij = pi[j];
          for (size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
    pbase += n_heads * len * len;
  }

  detail::attach(out, {q, k, v}, [&] {
    return [o = out.raw(), qn = q.node(), kn = k.node(), vn = v.node(), probs, offsets, n_heads,
            dh, d, inv_sqrt_dh] {
      const bool need_q = qn->requires_grad;
      const bool need_k = kn->requires_grad;
      const bool need_v = vn->requires_grad;
      if (need_q) qn->ensure_grad();
      if (need_k) kn->ensure_grad();
      if (need_v) vn->ensure_grad();
      std::vector<T> dp;  // scratch for one row of dprobs
      size_t pbase = 0;
      for (size_t b = 0; b + 1 < offsets.size(); ++b) {
        const size_t s0 = offsets[b];
        const size_t len = offsets[b + 1] - s0;
        dp.assign(len, T(0));
        for (size_t h = 0; h < n_heads; ++h) {
          const size_t c0 = h * dh;
          const T* pblk = probs->data() + pbase + h * len * len;
          for (size_t i = 0; i < len; ++i) {
            const T* pi = pblk + i * len;
            const T* doi = o->grad.data() + (s0 + i) * d + c0;
            // dV[j] += p_ij * dO_i; dp_j = dO_i . V_j
            double dot_pp = 0;
            for (size_t j = 0; j <= i; ++j) {
              const T* vj = vn->data.data() + (s0 + j) * d + c0;
              T s = T(0);
              const T pij = pi[j];
              if (need_v) {
                T* dvj = vn->grad.data() + (s0 + j) * d + c0;
                for (size_t c = 0; c < dh; ++c) {
                  dvj[c] += pij * doi[c];
                  s += doi[c] * vj[c];
                }
              } else {
                for (size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
              }
              dp[j] = s;
              dot_pp += static_cast<double>(pij) * s;
            }
            if (!need_q && !need_k) continue;
            // softmax backward then score backward
            const T* qi = qn->data.data() + (s0 + i) * d + c0;
            T* dqi = need_q ? qn->grad.data() + (s0 + i) * d + c0 : nullptr;
            for (size_t j = 0; j <= i; ++j) {
              const T ds = pi[j] * static_cast<T>(dp[j] - dot_pp) * inv_sqrt_dh;
              const T* kj = kn->data.data() + (s0 + j) * d + c0;
              if (need_q)
                for (size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
              if (need_k) {
                T* dkj = kn->grad.data() + (s0 + j) * d + c0;
                for (size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
        pbase += n_heads * len * len;
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Probabilistic ops
// ---------------------------------------------------------------------------

// Numerically stable softmax over a vector.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.shape().size() != 1 || logits.size() == 0)
    raise(ErrorKind::dimension,
          "softmax: expected non-empty vector, got " + detail::shape_str(logits.shape()));
  const size_t n = logits.size();
  for (T x : logits.data())
    if (!std::isfinite(x)) raise(ErrorKind::numeric, "softmax: non-finite input");
  auto out = Tensor<T>::zeros(logits.shape());
  T mx = logits.data()[0];
  for (T x : logits.data()) mx = std::max(mx, x);
  double denom = 0;
  for (size_t i = 0; i < n; ++i) {
    const double e = std::exp(static_cast<double>(logits.data()[i] - mx));
    out.data()[i] = static_cast<T>(e);
    denom += e;
  }
  const T inv = static_cast<T>(1.0 / denom);
  for (size_t i = 0; i < n; ++i) out.data()[i] *= inv;
  detail::attach(out, {logits}, [&] {
    return [o = out.raw(), ln = logits.node(), n] {
      ln->ensure_grad();
      double dot = 0;
      for (size_t i = 0; i < n; ++i) dot += static_cast<double>(o->grad[i]) * o->data[i];
      for (size_t i = 0; i < n; ++i)
        ln->grad[i] += o->data[i] * static_cast<T>(static_cast<double>(o->grad[i]) - dot);
    };
  });
  return out;
}

inline constexpr double kKlFloor = 1e-12;

// KL(p || q) = sum_i p_i ln(p_i / q_i); q clamped at kKlFloor, 0*ln(0/x) = 0.
// Differentiable in q (and p away from zeros).
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  if (p.shape() != q.shape() || p.shape().size() != 1)
    raise(ErrorKind::dimension, "kl_divergence: shape mismatch " + detail::shape_str(p.shape()) +
                                    " vs " + detail::shape_str(q.shape()));
  const size_t n = p.size();
  double sp = 0, sq = 0;
  for (size_t i = 0; i < n; ++i) {
    sp += p.data()[i];
    sq += q.data()[i];
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    raise(ErrorKind::validation, "kl_divergence: inputs must sum to 1 (got " + std::to_string(sp) +
                                     ", " + std::to_string(sq) + ")");
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    const double pi = p.data()[i];
    if (pi <= 0) continue;
    const double qi = std::max(static_cast<double>(q.data()[i]), kKlFloor);
    acc += pi * std::log(pi / qi);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  detail::attach(out, {p, q}, [&] {
    return [o = out.raw(), pn = p.node(), qn = q.node(), n] {
      const T g = o->grad[0];
      if (qn->requires_grad) {
        qn->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          const double pi = pn->data[i];
          if (pi <= 0) continue;
          const double qi = std::max(static_cast<double>(qn->data[i]), kKlFloor);
          qn->grad[i] -= g * static_cast<T>(pi / qi);
        }
      }
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          const double pi = pn->data[i];
          if (pi <= 0) continue;  // subgradient 0 at the boundary
          const double qi = std::max(static_cast<double>(qn->data[i]), kKlFloor);
          pn->grad[i] += g * static_cast<T>(std::log(pi / qi) + 1.0);
        }
      }
    };
  });
  return out;
}

// -log softmax(logits)[target]; gradient is softmax(logits) - one_hot(target).
template <typename T>
Tensor<T> cross_entropy_nll(const Tensor<T>& logits, size_t target) {
  if (logits.shape().size() != 1 || logits.size() == 0)
    raise(ErrorKind::dimension, "cross_entropy_nll: expected non-empty vector");
  const size_t n = logits.size();
  if (target >= n)
    raise(ErrorKind::index, "cross_entropy_nll: target " + std::to_string(target) +
                                " out of range [0, " + std::to_string(n) + ")");
  T mx = logits.data()[0];
  for (T x : logits.data()) mx = std::max(mx, x);
  double denom = 0;
  for (size_t i = 0; i < n; ++i) denom += std::exp(static_cast<double>(logits.data()[i] - mx));
  const double log_z = std::log(denom) + static_cast<double>(mx);
  auto out = Tensor<T>::scalar(static_cast<T>(log_z - static_cast<double>(logits.data()[target])));
  detail::attach(out, {logits}, [&] {
    return [o = out.raw(), ln = logits.node(), target, n, mx, denom] {
      ln->ensure_grad();
      const T g = o->grad[0];
      for (size_t i = 0; i < n; ++i) {
        const T p = static_cast<T>(std::exp(static_cast<double>(ln->data[i] - mx)) / denom);
        ln->grad[i] += g * (p - (i == target ? T(1) : T(0)));
      }
    };
  });
  return out;
}

// Mean NLL over rows of a logits matrix; the batched Eq.-style prediction
// loss. Row i is scored against targets[i].
template <typename T>
Tensor<T> mean_nll_rows(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
  if (logits.shape().size() != 2 || logits.rows() != targets.size() || targets.empty())
    raise(ErrorKind::dimension, "mean_nll_rows: logits " + detail::shape_str(logits.shape()) +
                                    " vs " + std::to_string(targets.size()) + " targets");
  const size_t m = logits.rows(), n = logits.cols();
  auto probs = std::make_shared<std::vector<T>>(m * n);
  double acc = 0;
  for (size_t i = 0; i < m; ++i) {
    const T* row = logits.data().data() + i * n;
    T* prow = probs->data() + i * n;
    T mx = row[0];
    for (size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (size_t j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      prow[j] = static_cast<T>(e);
      denom += e;
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (size_t j = 0; j < n; ++j) prow[j] *= inv;
    const auto t = static_cast<size_t>(targets[i]);
    if (t >= n) raise(ErrorKind::index, "mean_nll_rows: target out of range");
    acc += std::log(denom) + static_cast<double>(mx) - static_cast<double>(row[t]);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(m)));
  detail::attach(out, {logits}, [&] {
    return [o = out.raw(), ln = logits.node(), probs, targets, m, n] {
      ln->ensure_grad();
      const T g = o->grad[0] / static_cast<T>(m);
      for (size_t i = 0; i < m; ++i) {
        const T* prow = probs->data() + i * n;
        T* grow = ln->grad.data() + i * n;
        for (size_t j = 0; j < n; ++j) grow[j] += g * prow[j];
        grow[static_cast<size_t>(targets[i])] -= g;
      }
    };
  });
  return out;
}

// Mean KL(teacher_i || softmax(logits_i)) over rows, with constant teacher
// probabilities. Fused with log-softmax so the gradient is exactly
// (softmax(logits) - teacher) / rows even for underflowing entries.
template <typename T>
Tensor<T> mean_kl_teacher_rows(const std::vector<T>& teacher, const Tensor<T>& logits) {
  if (logits.shape().size() != 2 || teacher.size() != logits.size())
    raise(ErrorKind::dimension, "mean_kl_teacher_rows: teacher size " +
                                    std::to_string(teacher.size()) + " vs logits " +
                                    detail::shape_str(logits.shape()));
  const size_t m = logits.rows(), n = logits.cols();
  auto probs = std::make_shared<std::vector<T>>(m * n);
  double acc = 0;
  for (size_t i = 0; i < m; ++i) {
    const T* row = logits.data().data() + i * n;
    const T* trow = teacher.data() + i * n;
    T* prow = probs->data() + i * n;
    T mx = row[0];
    for (size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (size_t j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      prow[j] = static_cast<T>(e);
      denom += e;
    }
    const double log_z = std::log(denom) + static_cast<double>(mx);
    const T inv = static_cast<T>(1.0 / denom);
    for (size_t j = 0; j < n; ++j) prow[j] *= inv;
    for (size_t j = 0; j < n; ++j) {
      const double tj = trow[j];
      if (tj <= 0) continue;
      const double logq = static_cast<double>(row[j]) - log_z;
      acc += tj * (std::log(tj) - logq);
    }
  }
  auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(m)));
  detail::attach(out, {logits}, [&] {
    return [o = out.raw(), ln = logits.node(), probs, teacher, m, n] {
      ln->ensure_grad();
      const T g = o->grad[0] / static_cast<T>(m);
      for (size_t i = 0; i < m * n; ++i) ln->grad[i] += g * ((*probs)[i] - teacher[i]);
    };
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  detail::attach(out, {x}, [&] {
    return [o = out.raw(), xn = x.node()] {
      xn->ensure_grad();
      for (auto& g : xn->grad) g += o->grad[0];
    };
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) raise(ErrorKind::dimension, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

}  // namespace urec
