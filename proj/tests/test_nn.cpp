#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"

#include "conv_oracle.hpp"
#include "grad_check.hpp"
#include "gepd/nn/cbam.hpp"
#include "gepd/nn/conv.hpp"
#include "gepd/nn/layers.hpp"
#include "gepd/nn/lstm.hpp"
#include "gepd/nn/optim.hpp"

using namespace gepd;
using gepd::testing::grad_check;
using gepd::testing::random_tensor;

TEST_CASE("conv2d matches loop oracle for assorted geometries") {
  std::mt19937_64 rng(11);
  struct Case {
    Shape in;
    std::size_t cout, kh, kw, sh, sw, dh, dw, groups;
    bool same;
  };
  const Case cases[] = {
      {{2, 3, 5, 9}, 6, 2, 3, 1, 1, 1, 1, 3, false},
      {{1, 4, 6, 20}, 8, 1, 5, 1, 2, 1, 2, 2, true},
      {{2, 2, 4, 17}, 2, 1, 4, 1, 3, 1, 4, 1, false},
      {{1, 8, 7, 11}, 16, 7, 1, 1, 1, 1, 1, 8, false},
      {{3, 1, 1, 33}, 4, 1, 32, 1, 1, 1, 1, 1, true},
  };
  for (const auto& c : cases) {
    nn::ConvGeometry g = c.same ? nn::ConvGeometry::same(c.kh, c.kw, c.dh, c.dw, c.groups) : nn::ConvGeometry{};
    g.kernel_h = c.kh;
    g.kernel_w = c.kw;
    g.stride_h = c.sh;
    g.stride_w = c.sw;
    g.dilation_h = c.dh;
    g.dilation_w = c.dw;
    g.groups = c.groups;
    const Tensor x = random_tensor(c.in, rng);
    const Tensor w = random_tensor({c.cout, c.in[1] / c.groups, c.kh, c.kw}, rng);
    const Tensor y = nn::conv2d(x, w, nullptr, g);
    const Tensor ref = gepd::testing::conv_loop_oracle(x, w, g);
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad groups and oversized footprints") {
  const Tensor x({1, 3, 1, 8});
  nn::ConvGeometry g;
  g.groups = 2;
  CHECK_THROWS_AS(nn::conv2d(x, Tensor({2, 1, 1, 1}), nullptr, g), std::invalid_argument);
  nn::ConvGeometry big;
  big.kernel_w = 3;
  big.dilation_w = 4;
  CHECK_THROWS_AS(nn::conv2d(x, Tensor({1, 3, 1, 3}), nullptr, big), std::invalid_argument);
}

TEST_CASE("same padding preserves width for even kernels") {
  const auto g = nn::ConvGeometry::same(1, 32);
  CHECK(g.pad_left == 15);
  CHECK(g.pad_right == 16);
  CHECK(g.out_w(2500) == 2500);
  const auto gd = nn::ConvGeometry::same(1, 8, 1, 4);
  CHECK(gd.out_w(39) == 39);
}

TEST_CASE("layer gradients match central differences") {
  std::mt19937_64 rng(3);
  SUBCASE("conv2d grouped dilated strided") {
    nn::ConvGeometry g = nn::ConvGeometry::same(2, 3, 1, 2, 2);
    g.stride_w = 2;
    nn::Conv2d conv(4, 6, g, true, rng);
    const auto r = grad_check(conv, random_tensor({2, 4, 3, 9}, rng), rng);
    CHECK(r.input_rel_error < 1e-6);
    CHECK(r.param_rel_error < 1e-6);
  }
  SUBCASE("transposed conv") {
    nn::ConvTranspose1d tconv(3, 2, 4, 2, 1, 1, rng);
    const Tensor x = random_tensor({2, 3, 1, 5}, rng);
    CHECK(tconv.forward(x).dim(3) == 11);
    const auto r = grad_check(tconv, x, rng);
    CHECK(r.input_rel_error < 1e-6);
    CHECK(r.param_rel_error < 1e-6);
  }
  SUBCASE("linear") {
    nn::Linear lin(5, 3, rng);
    const auto r = grad_check(lin, random_tensor({4, 5}, rng), rng);
    CHECK(r.input_rel_error < 1e-6);
    CHECK(r.param_rel_error < 1e-6);
  }
  SUBCASE("batchnorm training mode") {
    nn::BatchNorm2d bn(3);
    const auto r = grad_check(bn, random_tensor({4, 3, 2, 5}, rng), rng);
    CHECK(r.input_rel_error < 1e-5);
    CHECK(r.param_rel_error < 1e-5);
  }
  SUBCASE("elementwise and pooling") {
    nn::Sequential seq;
    seq.emplace<nn::Elu>();
    seq.emplace<nn::AvgPoolWidth>(4);
    seq.emplace<nn::LeakyRelu>(0.2);
    seq.emplace<nn::ScaledTanh>(4.0);
    seq.emplace<nn::Flatten>();
    const auto r = grad_check(seq, random_tensor({2, 3, 2, 13}, rng), rng);
    CHECK(r.input_rel_error < 1e-6);
  }
  SUBCASE("cbam 2-d") {
    nn::Cbam cbam(6, 2, 3, false, rng);
    const auto r = grad_check(cbam, random_tensor({2, 6, 4, 5}, rng), rng);
    CHECK(r.input_rel_error < 1e-5);
    CHECK(r.param_rel_error < 1e-5);
  }
  SUBCASE("cbam flat") {
    nn::Cbam cbam(4, 4, 7, true, rng);
    const auto r = grad_check(cbam, random_tensor({3, 4, 1, 12}, rng), rng);
    CHECK(r.input_rel_error < 1e-5);
    CHECK(r.param_rel_error < 1e-5);
  }
  SUBCASE("lstm both directions") {
    for (bool reverse : {false, true}) {
      nn::Lstm lstm(3, 4, reverse, rng);
      const auto r = grad_check(lstm, random_tensor({2, 6, 3}, rng), rng);
      CHECK(r.input_rel_error < 1e-5);
      CHECK(r.param_rel_error < 1e-5);
    }
  }
  SUBCASE("bilstm and time-distributed linear") {
    nn::Sequential seq;
    seq.emplace<nn::BiLstm>(3, 4, rng);
    seq.emplace<nn::Lstm>(8, 5, false, rng);
    seq.emplace<nn::TimeDistributedLinear>(5, 3, rng);
    const auto r = grad_check(seq, random_tensor({2, 5, 3}, rng), rng);
    CHECK(r.input_rel_error < 1e-5);
    CHECK(r.param_rel_error < 1e-5);
  }
}

TEST_CASE("cbam contract") {
  std::mt19937_64 rng(5);
  nn::Cbam cbam(4, 2, 7, true, rng);
  const Tensor x = random_tensor({2, 4, 1, 16}, rng);
  CHECK(cbam.forward(x).shape() == x.shape());

  CHECK(max_abs_diff(cbam.forward(Tensor(x.shape())), Tensor(x.shape())) == 0.0);

  const double inf = std::numeric_limits<double>::infinity();
  cbam.mlp_out().bias().value.fill(inf);
  cbam.spatial_conv().bias().value.fill(inf);
  CHECK(cbam.forward(x) == x);
}

TEST_CASE("batchnorm eval mode uses running statistics") {
  nn::BatchNorm2d bn(2);
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({4, 2, 1, 8}, rng, 3.0);
  for (int i = 0; i < 50; ++i) bn.forward(x);
  bn.set_training(false);
  const Tensor a = bn.forward(x);
  const Tensor b = bn.forward(x);
  CHECK(a == b);
}

TEST_CASE("dropout is identity in eval mode and rescales in training") {
  nn::Dropout drop(0.5, 1);
  const Tensor x({1, 1000}, 1.0);
  const Tensor y = drop.forward(x);
  double s = 0.0;
  for (double v : y.values()) {
    CHECK((v == 0.0 || v == 2.0));
    s += v;
  }
  CHECK(std::abs(s / 1000.0 - 1.0) < 0.15);
  drop.set_training(false);
  CHECK(drop.forward(x) == x);
}

TEST_CASE("softmax cross entropy gradient") {
  std::mt19937_64 rng(2);
  const Tensor logits = random_tensor({4, 3}, rng);
  const std::vector<int> labels{0, 2, 1, 2};
  const auto r = nn::softmax_cross_entropy(logits, labels);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor p = logits, m = logits;
    p[i] += eps;
    m[i] -= eps;
    const double num = (nn::softmax_cross_entropy(p, labels).value - nn::softmax_cross_entropy(m, labels).value) / (2 * eps);
    CHECK(std::abs(num - r.grad[i]) < 1e-8);
  }
  const Tensor sm = nn::softmax(logits);
  for (std::size_t row = 0; row < 4; ++row) {
    CHECK(std::abs(sm[row * 3] + sm[row * 3 + 1] + sm[row * 3 + 2] - 1.0) < 1e-12);
  }
}

TEST_CASE("smooth l1 values") {
  const Tensor a({4}, std::vector<double>{0.0, 0.5, 2.0, -3.0});
  const Tensor b({4});
  const auto r = nn::smooth_l1(a, b);
  CHECK(r.value == doctest::Approx((0.0 + 0.125 + 1.5 + 2.5) / 4.0));
  CHECK(r.grad[1] == doctest::Approx(0.5 / 4.0));
  CHECK(r.grad[3] == doctest::Approx(-0.25));
}

TEST_CASE("adam minimises a quadratic") {
  nn::Parameter p("w", Tensor({3}, std::vector<double>{5.0, -4.0, 2.0}));
  nn::Adam opt({&p}, {.lr = 0.1});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    for (std::size_t k = 0; k < 3; ++k) p.grad[k] = 2.0 * (p.value[k] - 1.0);
    opt.step();
  }
  for (double v : p.value.values()) CHECK(std::abs(v - 1.0) < 1e-3);
}

TEST_CASE("weight penalty and clipping") {
  nn::Parameter w("w", Tensor({2}, std::vector<double>{0.5, -2.0}));
  nn::Parameter b("b", Tensor({1}, std::vector<double>{3.0}), false);
  std::vector<nn::Parameter*> ps{&w, &b};
  const double pen = nn::apply_weight_penalty(ps, 0.1, 0.01);
  CHECK(pen == doctest::Approx(0.1 * 2.5 + 0.01 * 4.25));
  CHECK(w.grad[0] == doctest::Approx(0.1 + 0.01));
  CHECK(w.grad[1] == doctest::Approx(-0.1 - 0.04));
  CHECK(b.grad[0] == 0.0);
  nn::clip_parameters(ps, 0.01);
  CHECK(w.value[1] == -0.01);
  CHECK(b.value[0] == 0.01);
}
