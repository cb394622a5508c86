#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace granudet::nn {

// A graph node: a row-major matrix value plus the closure that pushes its
// gradient back into its inputs. Everything in the engine is a 2-D matrix;
// spatial maps are stored as (H*W) x C with token index y*W + x.
struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, double fill = 0.0);
  Tensor(int rows, int cols, std::vector<double> values);

  // Leaf that accumulates gradients.
  static Tensor parameter(int rows, int cols, std::vector<double> values);
  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::span<const double> values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }

  double operator()(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * node_->cols + c]; }
  double& operator()(int r, int c) { return node_->value[static_cast<std::size_t>(r) * node_->cols + c]; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the value with no history.
  Tensor detach() const;

  // Reverse-mode sweep from a 1x1 tensor.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

  // Builds an op result. Records history only when grad mode is on and one
  // of the inputs requires a gradient.
  static Tensor make(int rows, int cols, std::vector<double> value,
                     std::vector<Tensor> inputs, std::function<void(Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

}  // namespace granudet::nn
