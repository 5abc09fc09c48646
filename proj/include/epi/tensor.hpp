// Copyright 2026 The epilab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace epi {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles with optional participation in the
/// reverse pass. Tensor is a handle: copies share the underlying node. Use
/// clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t i) const { return node_->data.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool enabled);
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Independent leaf with the same data, no gradient, no history.
  Tensor detach() const;
  /// Independent leaf with the same data, grad and requires_grad flag.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive on the current thread, ops record no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---- Operations --------------------------------------------------------
//
// Broadcasting: for binary elementwise ops the smaller operand's shape must
// equal the trailing dimensions of the larger one (e.g. [n, d] with [d]).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sum(const Tensor& a);

/// Normalizes over the last axis; gain and bias have shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean over rows of -log softmax(logits)[row, target]. logits is [n, V].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// Rows of table [V, d] selected by ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

/// One independent attention problem per segment: query rows
/// [q_offset, q_offset + q_len) attend to key rows [k_offset, k_offset + k_len).
struct AttentionSegment {
  std::size_t q_offset = 0;
  std::size_t q_len = 0;
  std::size_t k_offset = 0;
  std::size_t k_len = 0;
};

/// Multi-head scaled dot-product attention over packed rows. q is [Tq, d],
/// k and v are [Tk, d]; d must be divisible by heads. With causal = true,
/// query i of a segment only sees keys 0..i of that segment (requires
/// q_len == k_len).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads, bool causal);

/// Reverse pass from a scalar loss. Gradients of grad-enabled leaves are
/// summed into their existing grad buffers (they accumulate across calls
/// until zeroed). The recorded history is released afterwards, so a graph
/// supports exactly one backward call.
void backward(const Tensor& loss);

}  // namespace epi
