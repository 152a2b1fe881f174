// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mare::numerics {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;

// A node of the reverse-mode tape. Each node owns its forward value and,
// after backward(), its gradient. `parents` keeps the inputs alive until the
// output is dropped; `backward` reads this node's grad and accumulates into
// the parents that require grad.
struct Node {
  Node(Shape s, std::vector<double> v, bool rg);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void ensure_grad();

  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::string name;
};

// Dense row-major float64 tensor with optional gradient tracking. Tensor is
// a cheap handle; copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const std::string& name() const;
  void set_name(std::string name);

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode accumulation from a scalar loss. Gradients accumulate (+=)
// into every reachable tensor with requires_grad, so callers zero them
// between steps.
void backward(const Tensor& loss);

// Graph recording is skipped while a NoGradGuard is alive on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Bytes of tensor storage (values and grads) currently alive, and the high
// water mark since the last reset. Used as a memory proxy in resource
// comparisons.
std::int64_t live_tensor_bytes();
std::int64_t peak_live_tensor_bytes();
void reset_peak_live_tensor_bytes();

}  // namespace mare::numerics
