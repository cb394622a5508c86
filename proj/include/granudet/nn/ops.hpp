#pragma once

#include <memory>
#include <span>
#include <vector>

#include "granudet/nn/tensor.hpp"

namespace granudet::nn {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x + row, row is 1 x C broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor scale(const Tensor& x, double s);
// x * s where s is a 1x1 tensor.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor add_scalar(const Tensor& x, const Tensor& s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
Tensor inverse_sigmoid(const Tensor& x, double eps = 1e-5);

Tensor matmul(const Tensor& a, const Tensor& b);
// x (N x in) * w (in x out) + b (1 x out).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Cell (i, j) = sum_d a[i, d] * b[j, d], accumulated in a fixed order so a
// column never depends on which other rows of b are present.
Tensor dot_rows(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor slice_cols(const Tensor& x, int begin, int end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& x, std::span<const int> index);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

struct ConvShape {
  int height = 0;
  int width = 0;
  int in_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};
// x is (H*W) x Cin, weight is (k*k*Cin) x Cout, bias 1 x Cout.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvShape& shape);

// Row-major n x m matrix of allowed (1) / blocked (0) attention cells.
struct AttentionMask {
  int rows = 0;
  int cols = 0;
  std::vector<unsigned char> allowed;
  bool operator()(int i, int j) const { return allowed[static_cast<std::size_t>(i) * cols + j] != 0; }
};

// Scaled dot-product attention over `heads` equal column groups. Blocked
// cells are skipped entirely, so they cannot influence the result.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                           std::shared_ptr<const AttentionMask> mask = nullptr);

struct LevelShape {
  int height = 0;
  int width = 0;
  int start = 0;  // first row of this level in the flattened value matrix
};

// Multi-scale deformable sampling.
//   value:      T x D, all levels stacked
//   reference:  Q x 2 (points) or Q x 4 (cx, cy, w, h boxes); treated as constant
//   offsets:    Q x (heads * levels * points * 2)
//   logits:     Q x (heads * levels * points), softmax-ed per head
// Sampling is bilinear on pixel centres; locations outside a map are clamped
// to its border.
Tensor deformable_sample(const Tensor& value, std::span<const LevelShape> levels, const Tensor& reference,
                         const Tensor& offsets, const Tensor& logits, int heads, int points);

// Sum of sigmoid focal loss over every cell divided by `normalizer`.
Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const double> targets, double alpha, double gamma,
                          double normalizer);
// Sum over rows of 1 - GIoU between predicted and constant target boxes, both
// in centre form.
Tensor giou_loss_sum(const Tensor& pred, std::span<const double> target);
// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Non-differentiable helpers.
std::vector<double> log_softmax_row(std::span<const double> row);

}  // namespace granudet::nn
