#include "granudet/nn/layers.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace granudet::nn {

Tensor ParameterStore::add(const std::string& name, int rows, int cols, std::vector<double> init) {
  if (find(name).defined()) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t = Tensor::parameter(rows, cols, std::move(init));
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParameterStore::find(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  return {};
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

bool has_prefix(std::string_view name, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (name.substr(0, p.size()) == p) return true;
  return false;
}

std::uint64_t ParameterStore::hash(const std::vector<std::string>& prefixes) const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : entries_) {
    if (!prefixes.empty() && !has_prefix(name, prefixes)) continue;
    mix(name.data(), name.size());
    mix(t.data(), t.size() * sizeof(double));
  }
  return h;
}

std::vector<double> xavier_uniform(int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> w(static_cast<std::size_t>(fan_in) * fan_out);
  for (double& x : w) x = rng.uniform(-a, a);
  return w;
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool zero_init) {
  w_ = store.add(name + ".w", in, out,
                 zero_init ? std::vector<double>(static_cast<std::size_t>(in) * out, 0.0) : xavier_uniform(in, out, rng));
  b_ = store.add(name + ".b", 1, out, std::vector<double>(out, 0.0));
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int dim) {
  gain_ = store.add(name + ".g", 1, dim, std::vector<double>(dim, 1.0));
  bias_ = store.add(name + ".b", 1, dim, std::vector<double>(dim, 0.0));
}

Mlp::Mlp(ParameterStore& store, const std::string& name, const std::vector<int>& dims, Rng& rng, bool zero_last) {
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers_.emplace_back(store, name + "." + std::to_string(i), dims[i], dims[i + 1], rng,
                         zero_last && i + 2 == dims.size());
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

AdamW::AdamW(ParameterStore& store, AdamWConfig cfg) : store_(store), cfg_(cfg) {
  for (const auto& e : store_.entries()) {
    m_.emplace_back(e.second.size(), 0.0);
    v_.emplace_back(e.second.size(), 0.0);
  }
}

void AdamW::step(double lr, const std::function<double(const std::string&)>& lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  auto& entries = store_.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& name = entries[k].first;
    Tensor t = entries[k].second;
    const double s = lr_scale(name);
    if (s == 0.0) continue;
    const double step_lr = lr * s;
    const bool decay = t.rows() > 1;
    auto g = t.grad();
    auto& w = t.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * g[i];
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m_[k][i] / bc1;
      const double vhat = v_[k][i] / bc2;
      if (decay) w[i] -= step_lr * cfg_.weight_decay * w[i];
      w[i] -= step_lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double clip_grad_norm(ParameterStore& store, double max_norm, const std::function<bool(const std::string&)>& select) {
  double sq = 0.0;
  for (const auto& [name, t] : store.entries()) {
    if (!select(name)) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (auto& [name, t] : store.entries()) {
      if (!select(name)) continue;
      Tensor tt = t;
      for (double& g : tt.mutable_grad()) g *= f;
    }
  }
  return norm;
}

double warmup_cosine_lr(double base_lr, std::int64_t step, std::int64_t warmup, std::int64_t total) {
  if (warmup > 0 && step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max<std::int64_t>(1, total - warmup)));
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * progress));
}

}  // namespace granudet::nn
