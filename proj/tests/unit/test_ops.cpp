#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "granudet/nn/layers.hpp"
#include "granudet/nn/ops.hpp"
#include "granudet/rng.hpp"

using namespace granudet;
using namespace granudet::nn;
using granudet::testing::grad_check;

namespace {

Tensor randn(int r, int c, Rng& rng, double s = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  for (double& x : v) x = rng.normal() * s;
  return Tensor(r, c, v);
}

Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  // Fixed random projection so every output element matters.
  Rng rng(seed);
  Tensor w = randn(x.rows(), x.cols(), rng);
  return sum(mul(x, w));
}

}  // namespace

TEST(Ops, ElementwiseAndLinearGradients) {
  Rng rng(1);
  auto r = grad_check(
      [](const std::vector<Tensor>& in) {
        Tensor h = linear(in[0], in[1], in[2]);
        h = add(relu(h), sigmoid(h));
        h = mul_scalar(h, in[3]);
        h = add_row(h, in[2]);
        return weighted_sum(sub(mul(h, h), abs(h)), 3);
      },
      {randn(3, 4, rng), randn(4, 5, rng), randn(1, 5, rng), Tensor(1, 1, 0.7)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Ops, MatmulTransposeSliceConcatGather) {
  Rng rng(2);
  auto r = grad_check(
      [](const std::vector<Tensor>& in) {
        Tensor a = matmul(in[0], transpose(in[1]));
        Tensor parts[] = {slice_cols(a, 0, 2), slice_cols(a, 2, 3)};
        Tensor b = concat_cols(parts);
        Tensor rows[] = {slice_rows(b, 1, 3), b};
        Tensor c = concat_rows(rows);
        const int idx[] = {4, 0, 0, 2};
        return weighted_sum(add(gather_rows(c, idx), gather_rows(c, idx)), 5);
      },
      {randn(3, 4, rng), randn(3, 4, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Ops, NormalizationGradients) {
  Rng rng(3);
  auto r = grad_check(
      [](const std::vector<Tensor>& in) {
        Tensor h = layer_norm(in[0], in[1], in[2]);
        return weighted_sum(add(l2_normalize_rows(h), h), 7);
      },
      {randn(4, 6, rng), randn(1, 6, rng), randn(1, 6, rng)});
  EXPECT_LT(r.max_rel_error, 1e-5);
  auto r2 = grad_check(
      [](const std::vector<Tensor>& in) { return weighted_sum(dot_rows(l2_normalize_rows(in[0]), in[1]), 8); },
      {randn(3, 5, rng), randn(4, 5, rng)});
  EXPECT_LT(r2.max_rel_error, 1e-6);
}

TEST(Ops, ExpAndInverseSigmoid) {
  Rng rng(4);
  std::vector<double> p(6);
  for (double& x : p) x = rng.uniform(0.1, 0.9);
  auto r = grad_check([](const std::vector<Tensor>& in) { return weighted_sum(add(exp(in[0]), inverse_sigmoid(in[1])), 9); },
                      {randn(2, 3, rng, 0.5), Tensor(2, 3, p)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Ops, ConvGradients) {
  Rng rng(5);
  ConvShape s{5, 6, 3, 3, 2, 1};
  auto r = grad_check(
      [s](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], in[2], s), 10); },
      {randn(30, 3, rng), randn(27, 4, rng, 0.3), randn(1, 4, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(s.out_height(), 3);
  EXPECT_EQ(s.out_width(), 3);
}

TEST(Ops, ConvMatchesDirectLoop) {
  Rng rng(6);
  ConvShape s{4, 4, 2, 3, 1, 1};
  Tensor x = randn(16, 2, rng), w = randn(18, 3, rng), b = randn(1, 3, rng);
  Tensor y = conv2d(x, w, b, s);
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox)
      for (int co = 0; co < 3; ++co) {
        double acc = b(0, co);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy - 1 + ky, ix = ox - 1 + kx;
            if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
            for (int ci = 0; ci < 2; ++ci) acc += x(iy * 4 + ix, ci) * w((ky * 3 + kx) * 2 + ci, co);
          }
        EXPECT_NEAR(y(oy * 4 + ox, co), acc, 1e-12);
      }
}

TEST(Ops, AttentionGradientsWithMask) {
  Rng rng(7);
  auto mask = std::make_shared<AttentionMask>();
  mask->rows = 4;
  mask->cols = 5;
  mask->allowed = {1, 1, 0, 0, 0, 1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  auto r = grad_check(
      [mask](const std::vector<Tensor>& in) {
        return weighted_sum(multihead_attention(in[0], in[1], in[2], 2, mask), 11);
      },
      {randn(4, 6, rng), randn(5, 6, rng), randn(5, 6, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Ops, AttentionIgnoresBlockedCells) {
  Rng rng(8);
  auto mask = std::make_shared<AttentionMask>();
  mask->rows = 2;
  mask->cols = 3;
  mask->allowed = {1, 1, 0, 1, 1, 1};
  Tensor q = randn(2, 4, rng), k = randn(3, 4, rng), v = randn(3, 4, rng);
  Tensor a = multihead_attention(q, k, v, 2, mask);
  k(2, 1) += 5.0;
  v(2, 3) -= 3.0;
  Tensor b = multihead_attention(q, k, v, 2, mask);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(a(0, j), b(0, j));
  EXPECT_NE(a(1, 3), b(1, 3));
}

TEST(Ops, DeformableSampleGradients) {
  Rng rng(9);
  std::vector<LevelShape> levels{{3, 4, 0}, {2, 2, 12}};
  const int heads = 2, points = 2, nq = 3;
  for (int ref_cols : {2, 4}) {
    std::vector<double> ref;
    for (int q = 0; q < nq; ++q) {
      ref.push_back(rng.uniform(0.3, 0.7));
      ref.push_back(rng.uniform(0.3, 0.7));
      if (ref_cols == 4) {
        ref.push_back(rng.uniform(0.1, 0.3));
        ref.push_back(rng.uniform(0.1, 0.3));
      }
    }
    Tensor reference(nq, ref_cols, ref);
    auto r = grad_check(
        [&](const std::vector<Tensor>& in) {
          return weighted_sum(deformable_sample(in[0], levels, reference, in[1], in[2], heads, points), 12);
        },
        {randn(16, 4, rng), randn(nq, heads * 2 * points * 2, rng, 0.3), randn(nq, heads * 2 * points, rng)}, 1e-7);
    EXPECT_LT(r.max_rel_error, 1e-5) << "reference width " << ref_cols;
  }
}

TEST(Ops, FocalLoss) {
  // gamma = 0, alpha = 0.5 reduces to half the binary cross-entropy.
  Tensor x(1, 1, 0.3);
  const double t1[] = {1.0};
  const double bce = -std::log(1.0 / (1.0 + std::exp(-0.3)));
  EXPECT_NEAR(sigmoid_focal_loss(x, t1, 0.5, 0.0, 1.0).item(), 0.5 * bce, 1e-15);

  Tensor sat(2, 2, std::vector<double>{20, -20, -20, 20});
  const double t2[] = {1, 0, 0, 1};
  EXPECT_LT(sigmoid_focal_loss(sat, t2, 0.25, 2.0, 2.0).item(), 1e-6);

  Rng rng(10);
  std::vector<double> targets(12, 0.0);
  targets[1] = targets[6] = targets[11] = 1.0;
  auto r = grad_check(
      [&](const std::vector<Tensor>& in) { return sigmoid_focal_loss(in[0], targets, 0.25, 2.0, 3.0); },
      {randn(3, 4, rng, 2.0)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Ops, GiouLossGradients) {
  Rng rng(11);
  std::vector<double> pred, tgt;
  for (int i = 0; i < 4; ++i) {
    pred.insert(pred.end(), {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)});
    tgt.insert(tgt.end(), {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)});
  }
  // One disjoint pair exercises the enclosing-area term alone.
  pred[16 - 4] = 0.1;
  tgt[16 - 4] = 0.9;
  auto r = grad_check([&](const std::vector<Tensor>& in) { return giou_loss_sum(in[0], tgt); },
                      {Tensor(4, 4, pred)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Ops, CrossEntropy) {
  Tensor logits(1, 3, std::vector<double>{1.0, 2.0, 0.5});
  const int t[] = {1};
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
  EXPECT_NEAR(cross_entropy(logits, t).item(), -std::log(std::exp(2.0) / z), 1e-14);
  Rng rng(12);
  const int t3[] = {0, 3, 2};
  auto r = grad_check([&](const std::vector<Tensor>& in) { return cross_entropy(in[0], t3); }, {randn(3, 5, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Optim, AdamWMovesAgainstGradientAndSkipsFrozen) {
  ParameterStore store;
  Tensor a = store.add("a.w", 2, 1, {1.0, -1.0});
  Tensor b = store.add("b.w", 2, 1, {1.0, -1.0});
  AdamW opt(store, {0.9, 0.999, 1e-8, 0.0});
  Tensor loss = sum(add(mul(a, a), mul(b, b)));
  loss.backward();
  const auto before = store.hash({"b."});
  opt.step(0.1, [](const std::string& n) { return n.rfind("b.", 0) == 0 ? 0.0 : 1.0; });
  EXPECT_NEAR(a(0, 0), 0.9, 1e-6);
  EXPECT_NEAR(a(1, 0), -0.9, 1e-6);
  EXPECT_EQ(store.hash({"b."}), before);
  EXPECT_NEAR(warmup_cosine_lr(1.0, 0, 10, 100), 0.1, 1e-12);
  EXPECT_NEAR(warmup_cosine_lr(1.0, 10, 10, 100), 1.0, 1e-12);
  EXPECT_NEAR(warmup_cosine_lr(1.0, 100, 10, 100), 0.0, 1e-12);
}
