#include "versebyte/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace versebyte {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

// The kernels are elementwise multiply-adds in a fixed order, so every clone
// produces bit-identical results (no FMA contraction in ISO mode).
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define VERSEBYTE_KERNEL __attribute__((target_clones("avx512f", "avx2", "default")))
#else
#define VERSEBYTE_KERNEL
#endif

// C[m,n] += A[m,k] · B[k,n]. Tiles of C are held in local accumulators;
// each element still sums its k products in ascending order.
template <typename T>
VERSEBYTE_KERNEL void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 32;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    std::size_t j0 = 0;
    for (; j0 + kCols <= n; j0 += kCols) {
      T acc[kRows][kCols];
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t j = 0; j < kCols; ++j) acc[r][j] = c[(i + r) * n + j0 + j];
      }
      for (std::size_t p = 0; p < k; ++p) {
        const T* __restrict brow = b + p * n + j0;
        for (std::size_t r = 0; r < kRows; ++r) {
          const T s = a[(i + r) * k + p];
          for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += s * brow[j];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t j = 0; j < kCols; ++j) c[(i + r) * n + j0 + j] = acc[r][j];
      }
    }
    for (std::size_t r = 0; r < kRows; ++r) {
      T* __restrict crow = c + (i + r) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T s = a[(i + r) * k + p];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = j0; j < n; ++j) crow[j] += s * brow[j];
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = a[i * k + p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// C[k,n] += A[m,k]ᵀ · B[m,n], summing over rows of A in ascending order.
template <typename T>
VERSEBYTE_KERNEL void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 32;
  std::size_t p0 = 0;
  for (; p0 + kRows <= k; p0 += kRows) {
    std::size_t j0 = 0;
    for (; j0 + kCols <= n; j0 += kCols) {
      T acc[kRows][kCols];
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t j = 0; j < kCols; ++j) acc[r][j] = c[(p0 + r) * n + j0 + j];
      }
      for (std::size_t i = 0; i < m; ++i) {
        const T* __restrict brow = b + i * n + j0;
        for (std::size_t r = 0; r < kRows; ++r) {
          const T s = a[i * k + p0 + r];
          for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += s * brow[j];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t j = 0; j < kCols; ++j) c[(p0 + r) * n + j0 + j] = acc[r][j];
      }
    }
    for (std::size_t i = 0; i < m && j0 < n; ++i) {
      for (std::size_t r = 0; r < kRows; ++r) {
        const T s = a[i * k + p0 + r];
        T* __restrict crow = c + (p0 + r) * n;
        const T* __restrict brow = b + i * n;
        for (std::size_t j = j0; j < n; ++j) crow[j] += s * brow[j];
      }
    }
  }
  for (std::size_t i = 0; i < m && p0 < k; ++i) {
    const T* __restrict brow = b + i * n;
    for (std::size_t p = p0; p < k; ++p) {
      const T s = a[i * k + p];
      T* __restrict crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// C[m,n] += A[m,k] · B[n,k]ᵀ
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto bt = transposed(b, n, k);
  gemm_nn(m, k, n, a, bt.data(), c);
}

void require_matrix(const Shape& shape, std::string_view op) {
  if (shape.size() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got shape " + shape_string(shape));
  }
}

template <typename T>
void require_same_graph(Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw Error("operands belong to different graphs");
}

template <typename T>
T gelu_value(T x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T kC = T(0.7978845608028654);
  constexpr T kA = T(0.044715);
  const T t = std::tanh(kC * (x + kA * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * kC * (T(1) + T(3) * kA * x * x);
}

}  // namespace

template <typename T>
Graph<T>::Graph(bool track_gradients) : tracking_(track_gradients) {
#ifdef NDEBUG
  check_finite_ = false;
#else
  check_finite_ = true;
#endif
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::parameter(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, tracking_, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Graph<T>::grad(Var<T> v) const {
  const Node& node = nodes_[v.id];
  if (node.grad.empty()) return Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
Tensor<T>* Graph<T>::grad_target(Var<T> v) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return &node.grad;
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, Tensor<T> value, std::span<const Var<T>> inputs,
                        BackwardFn backward) {
  if (check_finite_) {
    for (T x : value.values()) {
      if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
  bool needs_grad = false;
  for (const auto& input : inputs) needs_grad = needs_grad || nodes_[input.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(backward) : BackwardFn{}});
  return {this, nodes_.size() - 1};
}

template <typename T>
void Graph<T>::backward(Var<T> output) {
  if (nodes_[output.id].value.size() != 1) {
    throw ShapeError("backward() needs a single-element output, got shape " +
                     shape_string(nodes_[output.id].value.shape()));
  }
  for (auto& node : nodes_) node.grad = Tensor<T>();
  if (!nodes_[output.id].requires_grad) return;
  nodes_[output.id].grad = Tensor<T>(nodes_[output.id].value.shape(), T(1));
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    // The callback may touch other nodes' grads but never this one's.
    Tensor<T> output_grad = std::move(node.grad);
    node.backward(*this, node.value, output_grad);
    nodes_[id].grad = std::move(output_grad);
  }
}

template <typename T>
void Graph<T>::truncate(std::size_t mark) {
  if (mark < nodes_.size()) nodes_.erase(nodes_.begin() + static_cast<std::ptrdiff_t>(mark), nodes_.end());
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul shape mismatch: " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out({m, n});
  gemm_nn(m, k, n, av.data(), bv.data(), out.data());
  return a.graph->record("matmul", std::move(out), {a, b},
                         [a, b, m, k, n](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
                           // dA = dC · Bᵀ, dB = Aᵀ · dC
                           if (auto* da = g.grad_target(a)) gemm_nt(m, n, k, dc.data(), g.value(b).data(), da->data());
                           if (auto* db = g.grad_target(b)) gemm_tn(m, k, n, g.value(a).data(), dc.data(), db->data());
                         });
}

template <typename T>
Var<T> matmul_transposed(Var<T> a, Var<T> b) {
  require_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
    throw ShapeError("matmul_transposed shape mismatch: " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()) + "^T");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor<T> out({m, n});
  gemm_nt(m, k, n, av.data(), bv.data(), out.data());
  return a.graph->record("matmul_transposed", std::move(out), {a, b},
                         [a, b, m, k, n](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
                           // dA = dC · B, dB = dCᵀ · A
                           if (auto* da = g.grad_target(a)) gemm_nn(m, n, k, dc.data(), g.value(b).data(), da->data());
                           if (auto* db = g.grad_target(b)) gemm_tn(m, n, k, dc.data(), g.value(a).data(), db->data());
                         });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto rhs = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rhs[i];
  return a.graph->record("add", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
    for (auto v : {a, b}) {
      if (auto* d = g.grad_target(v)) {
        for (std::size_t i = 0; i < dc.size(); ++i) (*d)[i] += dc[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto rhs = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= rhs[i];
  return a.graph->record("mul", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
    if (auto* da = g.grad_target(a)) {
      const auto& bv = g.value(b);
      for (std::size_t i = 0; i < dc.size(); ++i) (*da)[i] += dc[i] * bv[i];
    }
    if (auto* db = g.grad_target(b)) {
      const auto& av = g.value(a);
      for (std::size_t i = 0; i < dc.size(); ++i) (*db)[i] += dc[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= factor;
  return a.graph->record("scale", std::move(out), {a}, [a, factor](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
    if (auto* da = g.grad_target(a)) {
      for (std::size_t i = 0; i < dc.size(); ++i) (*da)[i] += dc[i] * factor;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T x : a.value().values()) total += x;
  return a.graph->record("sum", Tensor<T>::scalar(total), {a}, [a](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
    if (auto* da = g.grad_target(a)) {
      for (auto& x : da->values()) x += dc[0];
    }
  });
}

template <typename T>
Var<T> softmax(Var<T> a) {
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const T peak = *std::max_element(row.begin(), row.end());
    T total = 0;
    for (auto& x : row) {
      x = std::exp(x - peak);
      total += x;
    }
    for (auto& x : row) x /= total;
  }
  return a.graph->record("softmax", std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& p, const Tensor<T>& dc) {
    auto* da = g.grad_target(a);
    if (!da) return;
    // dx = p ⊙ (dy − Σ dy·p)
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const auto pr = p.row(r);
      const auto dr = dc.row(r);
      T dot = 0;
      for (std::size_t c = 0; c < pr.size(); ++c) dot += pr[c] * dr[c];
      auto out = da->row(r);
      for (std::size_t c = 0; c < pr.size(); ++c) out[c] += pr[c] * (dr[c] - dot);
    }
  });
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps) {
  require_same_graph(x, gain);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const std::size_t d = xv.cols();
  if (gv.size() != d) {
    throw ShapeError("rms_norm gain of shape " + shape_string(gv.shape()) + " does not match input " +
                     shape_string(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  std::vector<T> inv_rms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto in = xv.row(r);
    T mean_square = 0;
    for (T v : in) mean_square += v * v;
    mean_square /= T(d);
    const T denom = std::sqrt(mean_square + eps);
    // A zero row with eps == 0 normalizes to zero rather than NaN.
    inv_rms[r] = denom > T(0) ? T(1) / denom : T(0);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = gv[c] * in[c] * inv_rms[r];
  }
  return x.graph->record(
      "rms_norm", std::move(out), {x, gain},
      [x, gain, d, inv_rms = std::move(inv_rms)](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
        const auto& xv = g.value(x);
        const auto& gv = g.value(gain);
        if (auto* dg = g.grad_target(gain)) {
          for (std::size_t r = 0; r < xv.rows(); ++r) {
            const auto in = xv.row(r);
            const auto dr = dc.row(r);
            for (std::size_t c = 0; c < d; ++c) (*dg)[c] += dr[c] * in[c] * inv_rms[r];
          }
        }
        if (auto* dx = g.grad_target(x)) {
          // dx = s·(g⊙dy) − x·s³·⟨g⊙dy, x⟩/d with s = 1/rms
          for (std::size_t r = 0; r < xv.rows(); ++r) {
            const auto in = xv.row(r);
            const auto dr = dc.row(r);
            const T s = inv_rms[r];
            T dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += gv[c] * dr[c] * in[c];
            const T coef = dot * s * s * s / T(d);
            auto o = dx->row(r);
            for (std::size_t c = 0; c < d; ++c) o[c] += gv[c] * dr[c] * s - in[c] * coef;
          }
        }
      });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = gelu_value(v);
  return x.graph->record("gelu", std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
    if (auto* dx = g.grad_target(x)) {
      const auto& xv = g.value(x);
      for (std::size_t i = 0; i < dc.size(); ++i) (*dx)[i] += dc[i] * gelu_derivative(xv[i]);
    }
  });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  require_matrix(tv.shape(), "embedding");
  if (ids.empty()) throw ShapeError("embedding lookup needs at least one id");
  const std::size_t d = tv.cols();
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw RangeError("embedding id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[r])).data(), d, out.row(r).data());
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.graph->record("embedding", std::move(out), {table},
                             [table, d, saved = std::move(saved)](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
                               if (auto* dt = g.grad_target(table)) {
                                 for (std::size_t r = 0; r < saved.size(); ++r) {
                                   auto dst = dt->row(static_cast<std::size_t>(saved[r]));
                                   const auto src = dc.row(r);
                                   for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                                 }
                               }
                             });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout rate must be below 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.value().size());
  for (auto& m : mask) m = rng.uniform() >= rate ? keep_scale : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.graph->record("dropout", std::move(out), {x},
                         [x, mask = std::move(mask)](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
                           if (auto* dx = g.grad_target(x)) {
                             for (std::size_t i = 0; i < dc.size(); ++i) (*dx)[i] += dc[i] * mask[i];
                           }
                         });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows needs at least one part");
  Graph<T>* graph = parts.front().graph;
  const std::size_t d = parts.front().value().cols();
  std::size_t rows = 0;
  for (const auto& part : parts) {
    require_same_graph(parts.front(), part);
    if (part.value().cols() != d) {
      throw ShapeError("concat_rows width mismatch: " + shape_string(parts.front().shape()) + " vs " +
                       shape_string(part.shape()));
    }
    rows += part.value().rows();
  }
  Tensor<T> out({rows, d});
  std::size_t offset = 0;
  for (const auto& part : parts) {
    std::copy(part.value().values().begin(), part.value().values().end(), out.data() + offset);
    offset += part.value().size();
  }
  std::vector<Var<T>> saved(parts.begin(), parts.end());
  auto backward = [saved](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
    std::size_t offset = 0;
    for (const auto& part : saved) {
      const std::size_t n = g.value(part).size();
      if (auto* dp = g.grad_target(part)) {
        for (std::size_t i = 0; i < n; ++i) (*dp)[i] += dc[offset + i];
      }
      offset += n;
    }
  };
  return graph->record("concat_rows", std::move(out), parts, std::move(backward));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets, int ignore_id) {
  const auto& lv = logits.value();
  require_matrix(lv.shape(), "cross_entropy");
  if (targets.size() != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(lv.shape()));
  }
  const std::size_t v = lv.cols();
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw RangeError("cross_entropy target " + std::to_string(t) + " outside 0.." + std::to_string(v - 1));
    }
    ++count;
  }
  // Probabilities of the non-ignored rows are kept for the backward pass.
  Tensor<T> probs(lv.shape());
  T total = 0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (targets[r] == ignore_id) continue;
    const auto row = lv.row(r);
    const T peak = *std::max_element(row.begin(), row.end());
    T z = 0;
    auto pr = probs.row(r);
    for (std::size_t c = 0; c < v; ++c) {
      pr[c] = std::exp(row[c] - peak);
      z += pr[c];
    }
    for (auto& p : pr) p /= z;
    total += std::log(z) + peak - row[static_cast<std::size_t>(targets[r])];
  }
  const T loss = count ? total / T(count) : T(0);
  std::vector<int> saved(targets.begin(), targets.end());
  return logits.graph->record(
      "cross_entropy", Tensor<T>::scalar(loss), {logits},
      [logits, ignore_id, count, probs = std::move(probs), saved = std::move(saved)](
          Graph<T>& g, const Tensor<T>&, const Tensor<T>& dc) {
        auto* dl = g.grad_target(logits);
        if (!dl || count == 0) return;
        const T factor = dc[0] / T(count);
        for (std::size_t r = 0; r < saved.size(); ++r) {
          if (saved[r] == ignore_id) continue;
          const auto pr = probs.row(r);
          auto out = dl->row(r);
          for (std::size_t c = 0; c < pr.size(); ++c) out[c] += factor * pr[c];
          out[static_cast<std::size_t>(saved[r])] -= factor;
        }
      });
}

template <typename T>
Var<T> attention(Var<T> query, Var<T> key, Var<T> value, int n_heads, const AttentionMask& mask,
                 const std::optional<PositionBias<T>>& bias) {
  require_same_graph(query, key);
  require_same_graph(query, value);
  const auto& qv = query.value();
  const auto& kv = key.value();
  const auto& vv = value.value();
  require_matrix(qv.shape(), "attention");
  const std::size_t tq = qv.rows(), tk = kv.rows(), d = qv.cols();
  const auto heads = static_cast<std::size_t>(n_heads);
  if (n_heads < 1 || d % heads != 0 || kv.cols() != d || vv.cols() != d || vv.rows() != tk) {
    throw ShapeError("attention shapes q" + shape_string(qv.shape()) + " k" + shape_string(kv.shape()) +
                     " v" + shape_string(vv.shape()) + " with " + std::to_string(n_heads) + " heads");
  }
  if (!mask.key_valid.empty() && mask.key_valid.size() != tk) {
    throw ShapeError("attention key mask has " + std::to_string(mask.key_valid.size()) + " entries for " +
                     std::to_string(tk) + " keys");
  }
  std::size_t num_buckets = 0;
  if (bias) {
    require_same_graph(query, bias->table);
    num_buckets = bias->table.value().cols();
    if (bias->table.value().rows() != heads || !bias->buckets || bias->buckets->size() != tq * tk) {
      throw ShapeError("position bias table " + shape_string(bias->table.shape()) +
                       " does not match attention layout");
    }
  }
  const std::size_t dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(T(dh));

  // visible[i*tk + j]: query i may attend to key j.
  std::vector<std::uint8_t> visible(tq * tk);
  for (std::size_t i = 0; i < tq; ++i) {
    for (std::size_t j = 0; j < tk; ++j) {
      visible[i * tk + j] = (mask.key_valid.empty() || mask.key_valid[j]) && (!mask.causal || j <= i);
    }
  }

  Tensor<T> out({tq, d});
  std::vector<T> probs(heads * tq * tk, T(0));
  const T* bias_table = bias ? bias->table.value().data() : nullptr;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      T* p = probs.data() + (h * tq + i) * tk;
      const T* q = qv.data() + i * d + h * dh;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        if (!visible[i * tk + j]) continue;
        const T* k = kv.data() + j * d + h * dh;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
        s *= scale_factor;
        if (bias_table) s += bias_table[h * num_buckets + static_cast<std::size_t>((*bias->buckets)[i * tk + j])];
        p[j] = s;
        peak = std::max(peak, s);
      }
      if (peak == -std::numeric_limits<T>::infinity()) continue;  // nothing visible: zero output
      T z = 0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!visible[i * tk + j]) continue;
        p[j] = std::exp(p[j] - peak);
        z += p[j];
      }
      T* o = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!visible[i * tk + j]) continue;
        p[j] /= z;
        const T* v = vv.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * v[c];
      }
    }
  }

  const bool has_bias = bias.has_value();
  const Var<T> table = has_bias ? bias->table : query;
  std::shared_ptr<const std::vector<int>> buckets = has_bias ? bias->buckets : nullptr;
  return query.graph->record(
      "attention", std::move(out),
      {query, key, value, table},
      [=, probs = std::move(probs), visible = std::move(visible)](Graph<T>& g, const Tensor<T>&,
                                                                  const Tensor<T>& dout) {
        const auto& qv = g.value(query);
        const auto& kv = g.value(key);
        const auto& vv = g.value(value);
        Tensor<T>* dq = g.grad_target(query);
        Tensor<T>* dk = g.grad_target(key);
        Tensor<T>* dv = g.grad_target(value);
        Tensor<T>* dbias = has_bias ? g.grad_target(table) : nullptr;
        std::vector<T> ds(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < tq; ++i) {
            const T* p = probs.data() + (h * tq + i) * tk;
            const T* go = dout.data() + i * d + h * dh;
            // ds_j = p_j (dp_j − Σ_l p_l dp_l), dp_j = ⟨dO_i, v_j⟩
            T weighted = 0;
            for (std::size_t j = 0; j < tk; ++j) {
              ds[j] = 0;
              if (!visible[i * tk + j]) continue;
              const T* v = vv.data() + j * d + h * dh;
              T dp = 0;
              for (std::size_t c = 0; c < dh; ++c) dp += go[c] * v[c];
              ds[j] = dp;
              weighted += p[j] * dp;
            }
            for (std::size_t j = 0; j < tk; ++j) {
              if (!visible[i * tk + j]) continue;
              ds[j] = p[j] * (ds[j] - weighted);
              if (dv) {
                T* gv = dv->data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gv[c] += p[j] * go[c];
              }
              if (dbias) {
                (*dbias)[h * num_buckets + static_cast<std::size_t>((*buckets)[i * tk + j])] += ds[j];
              }
              const T sj = ds[j] * scale_factor;
              if (dq) {
                T* gq = dq->data() + i * d + h * dh;
                const T* k = kv.data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gq[c] += sj * k[c];
              }
              if (dk) {
                T* gk = dk->data() + j * d + h * dh;
                const T* q = qv.data() + i * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gk[c] += sj * q[c];
              }
            }
          }
        }
      });
}

#define VERSEBYTE_INSTANTIATE(T)                                                                      \
  template class Graph<T>;                                                                            \
  template Var<T> matmul(Var<T>, Var<T>);                                                             \
  template Var<T> matmul_transposed(Var<T>, Var<T>);                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                                \
  template Var<T> scale(Var<T>, T);                                                                   \
  template Var<T> sum(Var<T>);                                                                        \
  template Var<T> softmax(Var<T>);                                                                    \
  template Var<T> rms_norm(Var<T>, Var<T>, T);                                                        \
  template Var<T> gelu(Var<T>);                                                                       \
  template Var<T> embedding(Var<T>, std::span<const int>);                                            \
  template Var<T> dropout(Var<T>, double, Rng&);                                                      \
  template Var<T> concat_rows(std::span<const Var<T>>);                                               \
  template Var<T> cross_entropy(Var<T>, std::span<const int>, int);                                   \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, int, const AttentionMask&,                        \
                            const std::optional<PositionBias<T>>&);

VERSEBYTE_INSTANTIATE(float)
VERSEBYTE_INSTANTIATE(double)

#undef VERSEBYTE_INSTANTIATE

}  // namespace versebyte
