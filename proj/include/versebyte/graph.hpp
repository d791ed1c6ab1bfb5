#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "versebyte/rng.hpp"
#include "versebyte/tensor.hpp"

namespace versebyte {

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives
// and has not been truncated below it.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// creation order is a valid reverse topological order for backward().
template <typename T>
class Graph {
 public:
  // Receives the node's output and its gradient; accumulates into inputs.
  using BackwardFn =
      std::function<void(Graph&, const Tensor<T>& output, const Tensor<T>& output_grad)>;

  explicit Graph(bool track_gradients = true);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return tracking_; }
  void set_check_finite(bool enabled) { check_finite_ = enabled; }

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Tensor<T> value);

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  // Gradient accumulated by the last backward(); zeros if none reached it.
  Tensor<T> grad(Var<T> v) const;

  // Seeds d(output)/d(output) = 1 on a single-element node and propagates.
  void backward(Var<T> output);

  std::size_t size() const { return nodes_.size(); }
  // Drops every node created at or after `mark` (used to bound memory in
  // step-by-step decoding).
  void truncate(std::size_t mark);

  // Op plumbing.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }
  Var<T> record(std::string_view op, Tensor<T> value, std::span<const Var<T>> inputs,
                BackwardFn backward);
  // Gradient buffer of an input, or nullptr when it does not require grad.
  Tensor<T>* grad_target(Var<T> v);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool tracking_;
  bool check_finite_;
};

struct AttentionMask {
  // One flag per key position; empty means every key is visible.
  std::vector<std::uint8_t> key_valid;
  // Query i sees key j only if j <= i.
  bool causal = false;
};

// Learned per-head additive bias looked up by bucketed relative position.
template <typename T>
struct PositionBias {
  Var<T> table;  // [n_heads, num_buckets]
  std::shared_ptr<const std::vector<int>> buckets;  // [t_query * t_key]
};

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a · bᵀ
template <typename T> Var<T> matmul_transposed(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> rms_norm(Var<T> x, Var<T> gain, T eps);
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> embedding(Var<T> table, std::span<const int> ids);
template <typename T> Var<T> dropout(Var<T> x, double rate, Rng& rng);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
// Mean of -log softmax(logits)[target] over rows whose target != ignore_id.
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> targets, int ignore_id);
// Multi-head scaled dot-product attention over [t, d] inputs.
template <typename T>
Var<T> attention(Var<T> query, Var<T> key, Var<T> value, int n_heads, const AttentionMask& mask,
                 const std::optional<PositionBias<T>>& bias);

}  // namespace versebyte
