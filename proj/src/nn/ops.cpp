#include "granudet/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace granudet::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// Products go through Eigen-owned copies: the small-size kernels peel
// according to buffer alignment, so multiplying the maps directly can round
// differently depending on where the heap placed them.
template <typename A, typename B>
MatR product(const A& a, const B& b) {
  const MatR x = a, y = b;
  return x * y;
}

// Column sums of a row-major m x n buffer into out, rows in order.
void add_column_sums(const double* g, int m, int n, double* out) {
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out[c] += g[static_cast<std::size_t>(r) * n + c];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

std::size_t idx(int r, int c, int cols) { return static_cast<std::size_t>(r) * cols + c; }

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

template <typename F, typename G>
Tensor unary(const Tensor& x, F f, G df) {
  std::vector<double> out(x.size());
  const double* xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make(x.rows(), x.cols(), std::move(out), {x}, [df](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x.requires_grad) x.grad[i] += self.grad[i];
      if (y.requires_grad) y.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x.requires_grad) x.grad[i] += self.grad[i] * y.value[i];
      if (y.requires_grad) y.grad[i] += self.grad[i] * x.value[i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw std::invalid_argument("add_row: shape mismatch");
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[idx(i, j, c)] = x.data()[idx(i, j, c)] + row.data()[j];
  return Tensor::make(r, c, std::move(out), {x, row}, [r, c](Node& self) {
    Node& in = *self.inputs[0];
    Node& b = *self.inputs[1];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const double g = self.grad[idx(i, j, c)];
        if (in.requires_grad) in.grad[idx(i, j, c)] += g;
        if (b.requires_grad) b.grad[j] += g;
      }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw std::invalid_argument("mul_scalar: scalar expected");
  const double sv = s.item();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
  return Tensor::make(x.rows(), x.cols(), std::move(out), {x, s}, [](Node& self) {
    Node& in = *self.inputs[0];
    Node& sc = *self.inputs[1];
    double gs = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in.requires_grad) in.grad[i] += self.grad[i] * sc.value[0];
      gs += self.grad[i] * in.value[i];
    }
    if (sc.requires_grad) sc.grad[0] += gs;
  });
}

Tensor add_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw std::invalid_argument("add_scalar: scalar expected");
  const double sv = s.item();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + sv;
  return Tensor::make(x.rows(), x.cols(), std::move(out), {x, s}, [](Node& self) {
    Node& in = *self.inputs[0];
    Node& sc = *self.inputs[1];
    double gs = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in.requires_grad) in.grad[i] += self.grad[i];
      gs += self.grad[i];
    }
    if (sc.requires_grad) sc.grad[0] += gs;
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); }, [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor inverse_sigmoid(const Tensor& x, double eps) {
  return unary(
      x,
      [eps](double v) {
        const double c = std::clamp(v, eps, 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](double v, double) {
        if (v < eps || v > 1.0 - eps) return 0.0;
        return 1.0 / (v * (1.0 - v));
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapR(out.data(), m, n) = product(CMapR(a.data(), m, k), CMapR(b.data(), k, n));
  return Tensor::make(m, n, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    CMapR g(self.grad.data(), m, n);
    if (x.requires_grad) MapR(x.grad.data(), m, k) += product(g, CMapR(y.value.data(), k, n).transpose());
    if (y.requires_grad) MapR(y.grad.data(), k, n) += product(CMapR(x.value.data(), m, k).transpose(), g);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
    throw std::invalid_argument("linear: shape mismatch");
  const int m = x.rows(), k = x.cols(), n = w.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapR o(out.data(), m, n);
  o = product(CMapR(x.data(), m, k), CMapR(w.data(), k, n));
  o.rowwise() += CMapR(b.data(), 1, n).row(0);
  return Tensor::make(m, n, std::move(out), {x, w, b}, [m, k, n](Node& self) {
    Node& xi = *self.inputs[0];
    Node& wi = *self.inputs[1];
    Node& bi = *self.inputs[2];
    CMapR g(self.grad.data(), m, n);
    if (xi.requires_grad) MapR(xi.grad.data(), m, k) += product(g, CMapR(wi.value.data(), k, n).transpose());
    if (wi.requires_grad) MapR(wi.grad.data(), k, n) += product(CMapR(xi.value.data(), m, k).transpose(), g);
    if (bi.requires_grad) add_column_sums(self.grad.data(), m, n, bi.grad.data());
  });
}

Tensor dot_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("dot_rows: width mismatch");
  const int m = a.rows(), n = b.rows(), d = a.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* ai = a.data() + idx(i, 0, d);
    for (int j = 0; j < n; ++j) {
      const double* bj = b.data() + idx(j, 0, d);
      double s = 0.0;
      for (int t = 0; t < d; ++t) s += ai[t] * bj[t];
      out[idx(i, j, n)] = s;
    }
  }
  return Tensor::make(m, n, std::move(out), {a, b}, [m, n, d](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const double g = self.grad[idx(i, j, n)];
        if (g == 0.0) continue;
        for (int t = 0; t < d; ++t) {
          if (x.requires_grad) x.grad[idx(i, t, d)] += g * y.value[idx(j, t, d)];
          if (y.requires_grad) y.grad[idx(j, t, d)] += g * x.value[idx(i, t, d)];
        }
      }
  });
}

Tensor transpose(const Tensor& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[idx(j, i, r)] = x.data()[idx(i, j, c)];
  return Tensor::make(c, r, std::move(out), {x}, [r, c](Node& self) {
    Node& in = *self.inputs[0];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) in.grad[idx(i, j, c)] += self.grad[idx(j, i, r)];
  });
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
  if (begin < 0 || end > x.rows() || begin > end) throw std::out_of_range("slice_rows");
  const int c = x.cols();
  std::vector<double> out(x.data() + idx(begin, 0, c), x.data() + idx(end, 0, c));
  return Tensor::make(end - begin, c, std::move(out), {x}, [begin, c](Node& self) {
    Node& in = *self.inputs[0];
    const std::size_t off = idx(begin, 0, c);
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[off + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
  if (begin < 0 || end > x.cols() || begin > end) throw std::out_of_range("slice_cols");
  const int r = x.rows(), c = x.cols(), w = end - begin;
  std::vector<double> out(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out[idx(i, j, w)] = x.data()[idx(i, begin + j, c)];
  return Tensor::make(r, w, std::move(out), {x}, [r, c, w, begin](Node& self) {
    Node& in = *self.inputs[0];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) in.grad[idx(i, begin + j, c)] += self.grad[idx(i, j, w)];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  const int c = parts[0].cols();
  int r = 0;
  std::vector<double> out;
  std::vector<int> starts;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: width mismatch");
    starts.push_back(r);
    r += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make(r, c, std::move(out), inputs, [starts, c](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      Node& in = *self.inputs[p];
      if (!in.requires_grad) continue;
      const std::size_t off = idx(starts[p], 0, c);
      for (std::size_t i = 0; i < in.value.size(); ++i) in.grad[i] += self.grad[off + i];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: nothing to concatenate");
  const int r = parts[0].rows();
  int c = 0;
  std::vector<int> starts;
  for (const auto& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: height mismatch");
    starts.push_back(c);
    c += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const int w = parts[p].cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) out[idx(i, starts[p] + j, c)] = parts[p].data()[idx(i, j, w)];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make(r, c, std::move(out), inputs, [starts, r, c](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      Node& in = *self.inputs[p];
      if (!in.requires_grad) continue;
      const int w = in.cols;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) in.grad[idx(i, j, w)] += self.grad[idx(i, starts[p] + j, c)];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const int> index) {
  const int c = x.cols();
  std::vector<int> ids(index.begin(), index.end());
  std::vector<double> out(ids.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= x.rows()) throw std::out_of_range("gather_rows index");
    std::copy_n(x.data() + idx(ids[i], 0, c), c, out.data() + i * c);
  }
  return Tensor::make(static_cast<int>(ids.size()), c, std::move(out), {x}, [ids, c](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < c; ++j) in.grad[idx(ids[i], j, c)] += self.grad[i * c + j];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make(1, 1, {s}, {x}, [](Node& self) {
    Node& in = *self.inputs[0];
    for (double& g : in.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int r = x.rows(), c = x.cols();
  if (gain.size() != static_cast<std::size_t>(c) || bias.size() != static_cast<std::size_t>(c))
    throw std::invalid_argument("layer_norm: parameter width mismatch");
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(r);
  for (int i = 0; i < r; ++i) {
    const double* row = x.data() + idx(i, 0, c);
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      xhat[idx(i, j, c)] = (row[j] - mu) * inv_std[i];
      out[idx(i, j, c)] = xhat[idx(i, j, c)] * gain.data()[j] + bias.data()[j];
    }
  }
  return Tensor::make(r, c, std::move(out), {x, gain, bias},
                      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                        Node& xi = *self.inputs[0];
                        Node& gi = *self.inputs[1];
                        Node& bi = *self.inputs[2];
                        for (int i = 0; i < r; ++i) {
                          double mean_g = 0.0, mean_gx = 0.0;
                          for (int j = 0; j < c; ++j) {
                            const double g = self.grad[idx(i, j, c)];
                            const double gx = g * gi.value[j];
                            mean_g += gx;
                            mean_gx += gx * xhat[idx(i, j, c)];
                            if (gi.requires_grad) gi.grad[j] += g * xhat[idx(i, j, c)];
                            if (bi.requires_grad) bi.grad[j] += g;
                          }
                          if (!xi.requires_grad) continue;
                          mean_g /= c;
                          mean_gx /= c;
                          for (int j = 0; j < c; ++j) {
                            const double gx = self.grad[idx(i, j, c)] * gi.value[j];
                            xi.grad[idx(i, j, c)] += inv_std[i] * (gx - mean_g - xhat[idx(i, j, c)] * mean_gx);
                          }
                        }
                      });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(x.size()), norms(r);
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += x.data()[idx(i, j, c)] * x.data()[idx(i, j, c)];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int j = 0; j < c; ++j) out[idx(i, j, c)] = x.data()[idx(i, j, c)] / norms[i];
  }
  return Tensor::make(r, c, std::move(out), {x}, [r, c, norms = std::move(norms)](Node& self) {
    Node& in = *self.inputs[0];
    for (int i = 0; i < r; ++i) {
      double dotgy = 0.0;
      for (int j = 0; j < c; ++j) dotgy += self.grad[idx(i, j, c)] * self.value[idx(i, j, c)];
      for (int j = 0; j < c; ++j)
        in.grad[idx(i, j, c)] += (self.grad[idx(i, j, c)] - self.value[idx(i, j, c)] * dotgy) / norms[i];
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvShape& s) {
  const int cin = s.in_channels, k = s.kernel;
  if (x.rows() != s.height * s.width || x.cols() != cin) throw std::invalid_argument("conv2d: input shape");
  if (weight.rows() != k * k * cin || bias.cols() != weight.cols()) throw std::invalid_argument("conv2d: weights");
  const int ho = s.out_height(), wo = s.out_width(), cout = weight.cols();
  const int patch = k * k * cin;
  std::vector<double> cols(static_cast<std::size_t>(ho) * wo * patch, 0.0);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* dst = cols.data() + idx(oy * wo + ox, 0, patch);
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= s.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= s.width) continue;
          std::copy_n(x.data() + idx(iy * s.width + ix, 0, cin), cin, dst + (ky * k + kx) * cin);
        }
      }
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo * cout);
  MapR o(out.data(), ho * wo, cout);
  o = product(CMapR(cols.data(), ho * wo, patch), CMapR(weight.data(), patch, cout));
  o.rowwise() += CMapR(bias.data(), 1, cout).row(0);
  return Tensor::make(ho * wo, cout, std::move(out), {x, weight, bias},
                      [s, ho, wo, cout, patch, cols = std::move(cols)](Node& self) {
                        Node& xi = *self.inputs[0];
                        Node& wi = *self.inputs[1];
                        Node& bi = *self.inputs[2];
                        const int cin = s.in_channels, k = s.kernel;
                        CMapR g(self.grad.data(), ho * wo, cout);
                        if (wi.requires_grad)
                          MapR(wi.grad.data(), patch, cout) +=
                              product(CMapR(cols.data(), ho * wo, patch).transpose(), g);
                        if (bi.requires_grad) add_column_sums(self.grad.data(), ho * wo, cout, bi.grad.data());
                        if (!xi.requires_grad) return;
                        const MatR dcols = product(g, CMapR(wi.value.data(), patch, cout).transpose());
                        for (int oy = 0; oy < ho; ++oy)
                          for (int ox = 0; ox < wo; ++ox) {
                            const double* src = dcols.data() + idx(oy * wo + ox, 0, patch);
                            for (int ky = 0; ky < k; ++ky) {
                              const int iy = oy * s.stride - s.pad + ky;
                              if (iy < 0 || iy >= s.height) continue;
                              for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * s.stride - s.pad + kx;
                                if (ix < 0 || ix >= s.width) continue;
                                double* dst = xi.grad.data() + idx(iy * s.width + ix, 0, cin);
                                const double* sp = src + (ky * k + kx) * cin;
                                for (int c = 0; c < cin; ++c) dst[c] += sp[c];
                              }
                            }
                          }
                      });
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                           std::shared_ptr<const AttentionMask> mask) {
  const int n = q.rows(), m = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != m || d % heads != 0)
    throw std::invalid_argument("multihead_attention: shape mismatch");
  if (mask && (mask->rows != n || mask->cols != m)) throw std::invalid_argument("multihead_attention: mask shape");
  const int dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h][i*m + j]
  std::vector<double> probs(static_cast<std::size_t>(heads) * n * m, 0.0);
  std::vector<double> out(static_cast<std::size_t>(n) * d, 0.0);
  const double* qv = q.data();
  const double* kv = k.data();
  const double* vv = v.data();
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh;
    for (int i = 0; i < n; ++i) {
      double* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * m;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < m; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        double s = 0.0;
        for (int t = 0; t < dh; ++t) s += qv[idx(i, c0 + t, d)] * kv[idx(j, c0 + t, d)];
        p[j] = s * inv;
        mx = std::max(mx, p[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (int j = 0; j < m; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (int j = 0; j < m; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        p[j] /= z;
        for (int t = 0; t < dh; ++t) out[idx(i, c0 + t, d)] += p[j] * vv[idx(j, c0 + t, d)];
      }
    }
  }
  return Tensor::make(
      n, d, std::move(out), {q, k, v}, [n, m, d, heads, dh, inv, mask, probs = std::move(probs)](Node& self) {
        Node& qi = *self.inputs[0];
        Node& ki = *self.inputs[1];
        Node& vi = *self.inputs[2];
        std::vector<double> dp(m);
        for (int h = 0; h < heads; ++h) {
          const int c0 = h * dh;
          for (int i = 0; i < n; ++i) {
            const double* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * m;
            double dot = 0.0;
            for (int j = 0; j < m; ++j) {
              dp[j] = 0.0;
              if (mask && !(*mask)(i, j)) continue;
              for (int t = 0; t < dh; ++t) {
                const double g = self.grad[idx(i, c0 + t, d)];
                dp[j] += g * vi.value[idx(j, c0 + t, d)];
                if (vi.requires_grad) vi.grad[idx(j, c0 + t, d)] += p[j] * g;
              }
              dot += dp[j] * p[j];
            }
            for (int j = 0; j < m; ++j) {
              if (mask && !(*mask)(i, j)) continue;
              const double ds = p[j] * (dp[j] - dot) * inv;
              if (ds == 0.0) continue;
              for (int t = 0; t < dh; ++t) {
                if (qi.requires_grad) qi.grad[idx(i, c0 + t, d)] += ds * ki.value[idx(j, c0 + t, d)];
                if (ki.requires_grad) ki.grad[idx(j, c0 + t, d)] += ds * qi.value[idx(i, c0 + t, d)];
              }
            }
          }
        }
      });
}

namespace {

// Bilinear corner lookup on one level, with border clamping.
struct Bilinear {
  int r00, r01, r10, r11;  // value rows
  double w00, w01, w10, w11;
  bool clamp_x, clamp_y;
  double fx, fy;
};

Bilinear bilinear_at(const LevelShape& lv, double x, double y) {
  Bilinear b{};
  double px = x * lv.width - 0.5;
  double py = y * lv.height - 0.5;
  b.clamp_x = px < 0.0 || px > lv.width - 1;
  b.clamp_y = py < 0.0 || py > lv.height - 1;
  px = std::clamp(px, 0.0, static_cast<double>(lv.width - 1));
  py = std::clamp(py, 0.0, static_cast<double>(lv.height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(px)), lv.width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(py)), lv.height - 1);
  const int x1 = std::min(x0 + 1, lv.width - 1);
  const int y1 = std::min(y0 + 1, lv.height - 1);
  b.fx = px - x0;
  b.fy = py - y0;
  b.r00 = lv.start + y0 * lv.width + x0;
  b.r01 = lv.start + y0 * lv.width + x1;
  b.r10 = lv.start + y1 * lv.width + x0;
  b.r11 = lv.start + y1 * lv.width + x1;
  b.w00 = (1 - b.fx) * (1 - b.fy);
  b.w01 = b.fx * (1 - b.fy);
  b.w10 = (1 - b.fx) * b.fy;
  b.w11 = b.fx * b.fy;
  return b;
}

}  // namespace

Tensor deformable_sample(const Tensor& value, std::span<const LevelShape> levels_in, const Tensor& reference,
                         const Tensor& offsets, const Tensor& logits, int heads, int points) {
  const int nq = reference.rows(), d = value.cols();
  const int nl = static_cast<int>(levels_in.size());
  const int per_head = nl * points;
  if (reference.cols() != 2 && reference.cols() != 4) throw std::invalid_argument("deformable_sample: reference");
  if (offsets.rows() != nq || offsets.cols() != heads * per_head * 2)
    throw std::invalid_argument("deformable_sample: offsets shape");
  if (logits.rows() != nq || logits.cols() != heads * per_head)
    throw std::invalid_argument("deformable_sample: logits shape");
  if (d % heads != 0) throw std::invalid_argument("deformable_sample: heads");
  std::vector<LevelShape> levels(levels_in.begin(), levels_in.end());
  const int dh = d / heads;
  const bool box_ref = reference.cols() == 4;

  std::vector<double> weights(logits.size());
  std::vector<double> locs(offsets.size());
  for (int q = 0; q < nq; ++q) {
    const double rx = reference(q, 0), ry = reference(q, 1);
    for (int h = 0; h < heads; ++h) {
      const std::size_t base = idx(q, h * per_head, heads * per_head);
      double mx = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < per_head; ++s) mx = std::max(mx, logits.data()[base + s]);
      double z = 0.0;
      for (int s = 0; s < per_head; ++s) z += weights[base + s] = std::exp(logits.data()[base + s] - mx);
      for (int s = 0; s < per_head; ++s) weights[base + s] /= z;
      for (int l = 0; l < nl; ++l)
        for (int p = 0; p < points; ++p) {
          const std::size_t o = (base + l * points + p) * 2;
          const double ox = offsets.data()[o], oy = offsets.data()[o + 1];
          if (box_ref) {
            locs[o] = rx + ox / points * reference(q, 2) * 0.5;
            locs[o + 1] = ry + oy / points * reference(q, 3) * 0.5;
          } else {
            locs[o] = rx + ox / levels[l].width;
            locs[o + 1] = ry + oy / levels[l].height;
          }
        }
    }
  }

  std::vector<double> out(static_cast<std::size_t>(nq) * d, 0.0);
  const double* v = value.data();
  for (int q = 0; q < nq; ++q)
    for (int h = 0; h < heads; ++h) {
      double* o = out.data() + idx(q, h * dh, d);
      for (int l = 0; l < nl; ++l)
        for (int p = 0; p < points; ++p) {
          const std::size_t s = idx(q, h * per_head, heads * per_head) + l * points + p;
          const Bilinear b = bilinear_at(levels[l], locs[s * 2], locs[s * 2 + 1]);
          const double a = weights[s];
          for (int t = 0; t < dh; ++t) {
            const int c = h * dh + t;
            o[t] += a * (b.w00 * v[idx(b.r00, c, d)] + b.w01 * v[idx(b.r01, c, d)] + b.w10 * v[idx(b.r10, c, d)] +
                         b.w11 * v[idx(b.r11, c, d)]);
          }
        }
    }

  return Tensor::make(
      nq, d, std::move(out), {value, reference, offsets, logits},
      [nq, d, dh, heads, points, nl, per_head, box_ref, levels = std::move(levels), weights = std::move(weights),
       locs = std::move(locs)](Node& self) {
        Node& vi = *self.inputs[0];
        Node& ri = *self.inputs[1];
        Node& oi = *self.inputs[2];
        Node& li = *self.inputs[3];
        const double* v = vi.value.data();
        std::vector<double> dw(per_head);
        for (int q = 0; q < nq; ++q)
          for (int h = 0; h < heads; ++h) {
            const double* g = self.grad.data() + idx(q, h * dh, d);
            const std::size_t base = idx(q, h * per_head, heads * per_head);
            for (int l = 0; l < nl; ++l)
              for (int p = 0; p < points; ++p) {
                const std::size_t s = base + l * points + p;
                const LevelShape& lv = levels[l];
                const Bilinear b = bilinear_at(lv, locs[s * 2], locs[s * 2 + 1]);
                const double a = weights[s];
                double sampled_dot = 0.0, dpx = 0.0, dpy = 0.0;
                for (int t = 0; t < dh; ++t) {
                  const int c = h * dh + t;
                  const double v00 = v[idx(b.r00, c, d)], v01 = v[idx(b.r01, c, d)];
                  const double v10 = v[idx(b.r10, c, d)], v11 = v[idx(b.r11, c, d)];
                  sampled_dot += g[t] * (b.w00 * v00 + b.w01 * v01 + b.w10 * v10 + b.w11 * v11);
                  dpx += g[t] * ((1 - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
                  dpy += g[t] * ((1 - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
                  if (vi.requires_grad) {
                    vi.grad[idx(b.r00, c, d)] += a * b.w00 * g[t];
                    vi.grad[idx(b.r01, c, d)] += a * b.w01 * g[t];
                    vi.grad[idx(b.r10, c, d)] += a * b.w10 * g[t];
                    vi.grad[idx(b.r11, c, d)] += a * b.w11 * g[t];
                  }
                }
                dw[l * points + p] = sampled_dot;
                if (oi.requires_grad) {
                  const double gx = b.clamp_x ? 0.0 : a * dpx * lv.width;
                  const double gy = b.clamp_y ? 0.0 : a * dpy * lv.height;
                  if (box_ref) {
                    oi.grad[s * 2] += gx / points * ri.value[idx(q, 2, 4)] * 0.5;
                    oi.grad[s * 2 + 1] += gy / points * ri.value[idx(q, 3, 4)] * 0.5;
                  } else {
                    oi.grad[s * 2] += gx / lv.width;
                    oi.grad[s * 2 + 1] += gy / lv.height;
                  }
                }
              }
            if (li.requires_grad) {
              double dot = 0.0;
              for (int s = 0; s < per_head; ++s) dot += dw[s] * weights[base + s];
              for (int s = 0; s < per_head; ++s) li.grad[base + s] += weights[base + s] * (dw[s] - dot);
            }
          }
      });
}

Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const double> targets, double alpha, double gamma,
                          double normalizer) {
  if (targets.size() != logits.size()) throw std::invalid_argument("sigmoid_focal_loss: target size");
  if (normalizer <= 0) throw std::invalid_argument("sigmoid_focal_loss: normalizer must be positive");
  std::vector<double> tg(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < tg.size(); ++i) {
    const double x = logits.data()[i];
    const double p = 1.0 / (1.0 + std::exp(-x));
    const double t = tg[i];
    // -log p = softplus(-x), -log(1-p) = softplus(x)
    const double ce = t * softplus(-x) + (1 - t) * softplus(x);
    const double pt = p * t + (1 - p) * (1 - t);
    const double at = alpha >= 0 ? alpha * t + (1 - alpha) * (1 - t) : 1.0;
    total += at * std::pow(1 - pt, gamma) * ce;
  }
  return Tensor::make(1, 1, {total / normalizer}, {logits},
                      [tg = std::move(tg), alpha, gamma, normalizer](Node& self) {
                        Node& in = *self.inputs[0];
                        const double g = self.grad[0] / normalizer;
                        for (std::size_t i = 0; i < tg.size(); ++i) {
                          const double x = in.value[i];
                          const double p = 1.0 / (1.0 + std::exp(-x));
                          const double t = tg[i];
                          const double a_pos = alpha >= 0 ? alpha : 1.0;
                          const double a_neg = alpha >= 0 ? 1 - alpha : 1.0;
                          // Positive part: a (1-p)^g [g p log p - (1-p)]
                          const double dpos =
                              a_pos * std::pow(1 - p, gamma) * (gamma * p * (-softplus(-x)) - (1 - p));
                          // Negative part: (1-a) p^g [p - g (1-p) log(1-p)]
                          const double dneg = a_neg * std::pow(p, gamma) * (p - gamma * (1 - p) * (-softplus(x)));
                          in.grad[i] += g * (t * dpos + (1 - t) * dneg);
                        }
                      });
}

Tensor giou_loss_sum(const Tensor& pred, std::span<const double> target) {
  if (pred.cols() != 4 || target.size() != pred.size()) throw std::invalid_argument("giou_loss_sum: shapes");
  const int n = pred.rows();
  std::vector<double> tg(target.begin(), target.end());
  struct Parts {
    double I, U, E, iw, ih, ew, eh;
  };
  auto parts = [](const double* p, const double* t) {
    const double x0 = p[0] - p[2] / 2, x1 = p[0] + p[2] / 2, y0 = p[1] - p[3] / 2, y1 = p[1] + p[3] / 2;
    const double tx0 = t[0] - t[2] / 2, tx1 = t[0] + t[2] / 2, ty0 = t[1] - t[3] / 2, ty1 = t[1] + t[3] / 2;
    Parts r{};
    r.iw = std::max(0.0, std::min(x1, tx1) - std::max(x0, tx0));
    r.ih = std::max(0.0, std::min(y1, ty1) - std::max(y0, ty0));
    r.I = r.iw * r.ih;
    r.U = (x1 - x0) * (y1 - y0) + (tx1 - tx0) * (ty1 - ty0) - r.I;
    r.ew = std::max(x1, tx1) - std::min(x0, tx0);
    r.eh = std::max(y1, ty1) - std::min(y0, ty0);
    r.E = std::max(r.ew * r.eh, 1e-12);
    return r;
  };
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const Parts r = parts(pred.data() + 4 * i, tg.data() + 4 * i);
    const double iou = r.U > 0 ? r.I / r.U : 0.0;
    total += 1.0 - (iou - (r.E - r.U) / r.E);
  }
  return Tensor::make(1, 1, {total}, {pred}, [n, tg = std::move(tg), parts](Node& self) {
    Node& in = *self.inputs[0];
    for (int i = 0; i < n; ++i) {
      const double* p = in.value.data() + 4 * i;
      const double* t = tg.data() + 4 * i;
      const Parts r = parts(p, t);
      if (r.U <= 0) continue;
      const double x0 = p[0] - p[2] / 2, x1 = p[0] + p[2] / 2, y0 = p[1] - p[3] / 2, y1 = p[1] + p[3] / 2;
      const double tx0 = t[0] - t[2] / 2, tx1 = t[0] + t[2] / 2, ty0 = t[1] - t[3] / 2, ty1 = t[1] + t[3] / 2;
      const bool overlap = r.iw > 0 && r.ih > 0;
      // d/d(x0, x1, y0, y1)
      double dI[4] = {0, 0, 0, 0};
      if (overlap) {
        dI[0] = x0 > tx0 ? -r.ih : 0.0;
        dI[1] = x1 < tx1 ? r.ih : 0.0;
        dI[2] = y0 > ty0 ? -r.iw : 0.0;
        dI[3] = y1 < ty1 ? r.iw : 0.0;
      }
      const double dA[4] = {-(y1 - y0), (y1 - y0), -(x1 - x0), (x1 - x0)};
      double dE[4] = {x0 < tx0 ? -r.eh : 0.0, x1 > tx1 ? r.eh : 0.0, y0 < ty0 ? -r.ew : 0.0,
                      y1 > ty1 ? r.ew : 0.0};
      if (r.ew * r.eh < 1e-12) dE[0] = dE[1] = dE[2] = dE[3] = 0.0;
      double dg[4];
      for (int c = 0; c < 4; ++c) {
        const double dU = dA[c] - dI[c];
        dg[c] = (dI[c] * r.U - r.I * dU) / (r.U * r.U) + (dU * r.E - r.U * dE[c]) / (r.E * r.E);
      }
      const double g = -self.grad[0];
      in.grad[4 * i + 0] += g * (dg[0] + dg[1]);
      in.grad[4 * i + 1] += g * (dg[2] + dg[3]);
      in.grad[4 * i + 2] += g * 0.5 * (dg[1] - dg[0]);
      in.grad[4 * i + 3] += g * 0.5 * (dg[3] - dg[2]);
    }
  });
}

std::vector<double> log_softmax_row(std::span<const double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lz;
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != n || n == 0) throw std::invalid_argument("cross_entropy: targets");
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (tg[i] < 0 || tg[i] >= v) throw std::out_of_range("cross_entropy: target id");
    const auto ls = log_softmax_row(std::span<const double>(logits.data() + idx(i, 0, v), v));
    total -= ls[tg[i]];
    for (int j = 0; j < v; ++j) probs[idx(i, j, v)] = std::exp(ls[j]);
  }
  return Tensor::make(1, 1, {total / n}, {logits},
                      [n, v, tg = std::move(tg), probs = std::move(probs)](Node& self) {
                        Node& in = *self.inputs[0];
                        const double g = self.grad[0] / n;
                        for (int i = 0; i < n; ++i)
                          for (int j = 0; j < v; ++j)
                            in.grad[idx(i, j, v)] += g * (probs[idx(i, j, v)] - (j == tg[i] ? 1.0 : 0.0));
                      });
}

}  // namespace granudet::nn
