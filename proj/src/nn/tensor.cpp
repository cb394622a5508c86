#include "granudet/nn/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace granudet::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor(int rows, int cols, double fill) : node_(std::make_shared<Node>()) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("negative tensor dimension");
  node_->rows = rows;
  node_->cols = cols;
  node_->value.assign(static_cast<std::size_t>(rows) * cols, fill);
}

Tensor::Tensor(int rows, int cols, std::vector<double> values) : node_(std::make_shared<Node>()) {
  if (values.size() != static_cast<std::size_t>(rows) * cols)
    throw std::invalid_argument("tensor value count does not match shape");
  node_->rows = rows;
  node_->cols = cols;
  node_->value = std::move(values);
}

Tensor Tensor::parameter(int rows, int cols, std::vector<double> values) {
  Tensor t(rows, cols, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on a non-scalar tensor");
  return node_->value[0];
}

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(rows(), cols(), node_->value); }

void Tensor::backward() const {
  if (size() != 1) throw std::logic_error("backward() needs a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    for (auto& in : n->inputs)
      if (in->requires_grad) in->ensure_grad();
    n->backward(*n);
  }
}

Tensor Tensor::make(int rows, int cols, std::vector<double> value, std::vector<Tensor> inputs,
                    std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace granudet::nn
