#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "granudet/nn/ops.hpp"
#include "granudet/rng.hpp"

namespace granudet::nn {

// Named parameters in registration order. Names are dotted paths such as
// "det.decoder.0.ffn.fc1.w"; freeze sets and lr multipliers match on prefixes.
class ParameterStore {
 public:
  Tensor add(const std::string& name, int rows, int cols, std::vector<double> init);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  Tensor find(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

  // FNV-1a over the raw bytes of every parameter whose name starts with one
  // of `prefixes` (all parameters when empty).
  std::uint64_t hash(const std::vector<std::string>& prefixes = {}) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

bool has_prefix(std::string_view name, const std::vector<std::string>& prefixes);

std::vector<double> xavier_uniform(int fan_in, int fan_out, Rng& rng);

class Linear {
 public:
  Linear() = default;
  // zero_init leaves both weight and bias at zero.
  Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool zero_init = false);
  Tensor operator()(const Tensor& x) const { return linear(x, w_, b_); }
  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_, b_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain_, bias_); }

 private:
  Tensor gain_, bias_;
};

// Linear layers with ReLU between them.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::vector<int>& dims, Rng& rng,
      bool zero_last = false);
  Tensor operator()(const Tensor& x) const;

 private:
  std::vector<Linear> layers_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay Adam. Decay is skipped for single-row parameters
// (biases, norms, scalars).
class AdamW {
 public:
  AdamW(ParameterStore& store, AdamWConfig cfg);

  // lr_scale(name) multiplies the step; 0 leaves the parameter untouched.
  void step(double lr, const std::function<double(const std::string&)>& lr_scale);
  std::int64_t steps() const { return t_; }

 private:
  ParameterStore& store_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// Rescales gradients of the selected parameters so their joint L2 norm is at
// most max_norm. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm, const std::function<bool(const std::string&)>& select);

// Linear warmup then cosine annealing to zero.
double warmup_cosine_lr(double base_lr, std::int64_t step, std::int64_t warmup, std::int64_t total);

}  // namespace granudet::nn
