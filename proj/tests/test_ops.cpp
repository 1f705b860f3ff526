#include <cmath>
#include <random>

#include "doctest.h"
#include "gcp/errors.hpp"
#include "gcp/ops.hpp"
#include "oracles.hpp"

using namespace gcp;

namespace {

std::vector<double> as_vector(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("tensor rejects zero extents and checks sizes") {
  CHECK_THROWS_AS(Tensor({2, 0, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), DimensionError);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
}

TEST_CASE("conv forward: zero input gives zero output") {
  std::mt19937_64 rng(1);
  Tensor x({2, 3, 5, 5});
  Tensor w = oracle::random_tensor<float>({4, 3, 3, 3}, rng);
  Tensor y = conv2d_forward(x, w, {1, 1});
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv forward: scalar product case") {
  Tensor x({1, 1, 1, 1}, 3.0f), w({1, 1, 1, 1}, 2.0f);
  Tensor y = conv2d_forward(x, w, {1, 0});
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 6.0f);
}

TEST_CASE("conv forward matches the direct loop oracle") {
  std::mt19937_64 rng(7);
  SUBCASE("1x2x4x4 input, 3x2x3x3 weights, pad 1") {
    Tensor x = oracle::random_tensor<float>({1, 2, 4, 4}, rng);
    Tensor w = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
    Tensor y = conv2d_forward(x, w, {1, 1});
    Tensor ref = oracle::direct_conv(x, w, 1, 1);
    REQUIRE(y.shape() == ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-6);
  }
  SUBCASE("exhaustive random shapes with dims <= 5") {
    std::uniform_int_distribution<std::size_t> d(1, 5), kd(1, 3), sd(1, 2), pd(0, 2);
    int checked = 0;
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t n = d(rng), m = d(rng), c = d(rng), h = d(rng), w_ = d(rng), k = kd(rng), s = sd(rng),
                        p = pd(rng);
      if (h + 2 * p < k || w_ + 2 * p < k) continue;
      TensorD x = oracle::random_tensor<double>({n, m, h, w_}, rng);
      TensorD w = oracle::random_tensor<double>({c, m, k, k}, rng);
      TensorD y = conv2d_forward(x, w, {s, p});
      TensorD ref = oracle::direct_conv(x, w, s, p);
      REQUIRE(y.shape() == ref.shape());
      double err = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) err = std::max(err, std::abs(y[i] - ref[i]));
      CHECK(err < 1e-12);
      ++checked;
    }
    CHECK(checked > 200);
  }
}

TEST_CASE("conv errors") {
  Tensor x({1, 2, 4, 4}), w({3, 3, 3, 3}), w2({3, 2, 5, 5});
  CHECK_THROWS_AS(conv2d_forward(x, w, {1, 1}), DimensionError);
  CHECK_THROWS_AS(conv2d_forward(x, w2, {1, 0}), ConfigError);
  Tensor w3({3, 2, 3, 3});
  CHECK_THROWS_AS(conv2d_backward(x, w3, Tensor({1, 3, 3, 3}), {1, 1}), DimensionError);
}

TEST_CASE("conv backward: scalar chain rule and zero cotangent") {
  Tensor x({1, 1, 1, 1}, 3.0f), w({1, 1, 1, 1}, 2.0f), g({1, 1, 1, 1}, 1.0f);
  auto grads = conv2d_backward(x, w, g, {1, 0});
  CHECK(grads.input[0] == 2.0f);
  CHECK(grads.weights[0] == 3.0f);

  std::mt19937_64 rng(3);
  Tensor xr = oracle::random_tensor<float>({2, 2, 4, 4}, rng);
  Tensor wr = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
  auto zero = conv2d_backward(xr, wr, Tensor({2, 3, 4, 4}), {1, 1});
  for (float v : zero.input.data()) CHECK(v == 0.0f);
  for (float v : zero.weights.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv backward matches finite differences") {
  std::mt19937_64 rng(11);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}, {2, 0}}) {
    TensorD x = oracle::random_tensor<double>({2, 3, 5, 5}, rng);
    TensorD w = oracle::random_tensor<double>({4, 3, 3, 3}, rng);
    TensorD y0 = conv2d_forward(x, w, {stride, pad});
    TensorD g = oracle::random_tensor<double>(y0.shape(), rng);
    auto grads = conv2d_backward(x, w, g, {stride, pad});

    std::vector<double> xv = as_vector(x), wv = as_vector(w);
    auto loss = [&] {
      TensorD xx(x.shape(), xv), ww(w.shape(), wv);
      TensorD y = conv2d_forward(xx, ww, {stride, pad});
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * g[i];
      return s;
    };
    CHECK(oracle::relative_error(as_vector(grads.input), oracle::numeric_gradient(xv, loss)) < 1e-4);
    CHECK(oracle::relative_error(as_vector(grads.weights), oracle::numeric_gradient(wv, loss)) < 1e-4);
  }
}

TEST_CASE("batchnorm forward: hand example and special cases") {
  SUBCASE("batch statistics of {1, 7}") {
    Tensor x({2, 1, 1, 1}, std::vector<float>{1.0f, 7.0f});
    std::vector<float> g{2.0f}, b{1.0f}, m{0.0f}, v{1.0f};
    auto f = batchnorm_forward<float>(x, g, b, m, v, 0.0, BnMode::BatchStats);
    CHECK(f.context.batch_mean[0] == doctest::Approx(4.0));
    CHECK(f.context.batch_var[0] == doctest::Approx(9.0));
    CHECK(f.output[0] == doctest::Approx(-1.0));
    CHECK(f.output[1] == doctest::Approx(3.0));
  }
  SUBCASE("identity normalization") {
    std::mt19937_64 rng(2);
    Tensor x = oracle::random_tensor<float>({2, 3, 2, 2}, rng);
    BnParams<float> p(3, 0.0);
    auto f = batchnorm_forward(x, p, BnMode::FrozenStats);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(f.output[i] == x[i]);
  }
  SUBCASE("zero scale gives constant beta") {
    std::mt19937_64 rng(2);
    Tensor x = oracle::random_tensor<float>({2, 2, 3, 3}, rng);
    BnParams<float> p(2);
    p.gamma = {0.0f, 0.0f};
    p.beta = {0.5f, -1.5f};
    for (BnMode mode : {BnMode::BatchStats, BnMode::FrozenStats}) {
      auto f = batchnorm_forward(x, p, mode);
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) CHECK(f.output.at(n, c, i, j) == p.beta[c]);
    }
  }
  SUBCASE("normalized channels have zero mean and matching variance") {
    std::mt19937_64 rng(5);
    TensorD x = oracle::random_tensor<double>({4, 3, 3, 3}, rng, -2.0, 5.0);
    BnParams<double> p(3, 1e-3);
    auto f = batchnorm_forward(x, p, BnMode::BatchStats);
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> z;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) z.push_back(f.context.normalized.data()[(n * 3 + c) * 9 + i]);
      auto [mean, var] = oracle::pooled_stats(z);
      const double s2 = f.context.batch_var[c];
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - s2 / (s2 + 1e-3)) < 1e-5);
    }
  }
}

TEST_CASE("batchnorm errors") {
  Tensor x({1, 2, 1, 1});
  BnParams<float> p(2), q(3);
  CHECK_THROWS_AS(batchnorm_forward(x, p, BnMode::BatchStats), ConfigError);
  CHECK_NOTHROW(batchnorm_forward(x, p, BnMode::FrozenStats));
  CHECK_THROWS_AS(batchnorm_forward(x, q, BnMode::FrozenStats), DimensionError);
  auto f = batchnorm_forward(x, p, BnMode::FrozenStats);
  CHECK_THROWS_AS(batchnorm_backward(f.context, Tensor({1, 2, 2, 1})), DimensionError);
}

TEST_CASE("batchnorm backward") {
  std::mt19937_64 rng(13);
  SUBCASE("zero cotangent") {
    Tensor x = oracle::random_tensor<float>({3, 2, 2, 2}, rng);
    auto f = batchnorm_forward(x, BnParams<float>(2), BnMode::BatchStats);
    auto g = batchnorm_backward(f.context, Tensor(x.shape()));
    for (float v : g.input.data()) CHECK(v == 0.0f);
    for (float v : g.gamma) CHECK(v == 0.0f);
    for (float v : g.beta) CHECK(v == 0.0f);
  }
  SUBCASE("frozen statistics affine gradients") {
    TensorD x = oracle::random_tensor<double>({3, 2, 2, 2}, rng);
    BnParams<double> p(2);
    p.running_mean = {0.3, -0.2};
    p.running_var = {1.5, 0.7};
    auto f = batchnorm_forward(x, p, BnMode::FrozenStats);
    TensorD dy = oracle::random_tensor<double>(x.shape(), rng);
    auto g = batchnorm_backward(f.context, dy);
    for (std::size_t c = 0; c < 2; ++c) {
      double dg = 0.0, db = 0.0;
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 4; ++i) {
          const std::size_t k = (n * 2 + c) * 4 + i;
          dg += f.context.normalized[k] * dy[k];
          db += dy[k];
        }
      CHECK(g.gamma[c] == doctest::Approx(dg).epsilon(1e-12));
      CHECK(g.beta[c] == doctest::Approx(db).epsilon(1e-12));
    }
  }
  SUBCASE("finite differences in both modes") {
    for (BnMode mode : {BnMode::BatchStats, BnMode::FrozenStats}) {
      TensorD x = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
      BnParams<double> p(2);
      p.gamma = {1.3, -0.6};
      p.beta = {0.2, 0.4};
      p.running_mean = {0.1, -0.3};
      p.running_var = {0.8, 1.6};
      TensorD dy = oracle::random_tensor<double>(x.shape(), rng);
      auto f = batchnorm_forward(x, p, mode);
      auto g = batchnorm_backward(f.context, dy);

      std::vector<double> xv(x.data().begin(), x.data().end()), gv = p.gamma, bv = p.beta;
      auto loss = [&] {
        TensorD xx(x.shape(), xv);
        auto out = batchnorm_forward<double>(xx, gv, bv, p.running_mean, p.running_var, p.eps, mode).output;
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * dy[i];
        return s;
      };
      CHECK(oracle::relative_error(as_vector(g.input), oracle::numeric_gradient(xv, loss)) < 1e-4);
      CHECK(oracle::relative_error(g.gamma, oracle::numeric_gradient(gv, loss)) < 1e-4);
      CHECK(oracle::relative_error(g.beta, oracle::numeric_gradient(bv, loss)) < 1e-4);
    }
  }
}

TEST_CASE("relu, pooling, linear head and cross-entropy") {
  Tensor r({1, 1, 1, 2}, std::vector<float>{-2.0f, 3.0f});
  Tensor y = relu_forward(r);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 3.0f);

  Tensor logits({1, 10});
  std::vector<int> label{4};
  CHECK(softmax_cross_entropy<float>(logits, label).loss == doctest::Approx(2.302585).epsilon(1e-6));
  std::vector<int> bad{10};
  CHECK_THROWS_AS(softmax_cross_entropy<float>(logits, bad), InputError);

  std::mt19937_64 rng(17);
  TensorD feat = oracle::random_tensor<double>({3, 5}, rng);
  TensorD w = oracle::random_tensor<double>({4, 5}, rng);
  std::vector<double> b{0.1, -0.2, 0.3, 0.0};
  std::vector<int> labels{0, 3, 2};
  auto logits_d = linear_forward<double>(feat, w, b);
  auto ce = softmax_cross_entropy<double>(logits_d, labels);
  auto lg = linear_backward(feat, w, ce.grad_logits);

  std::vector<double> fv = as_vector(feat), wv = as_vector(w), bv = b;
  auto loss = [&] {
    TensorD ff(feat.shape(), fv), ww(w.shape(), wv);
    return softmax_cross_entropy<double>(linear_forward<double>(ff, ww, bv), labels).loss;
  };
  CHECK(oracle::relative_error(as_vector(lg.features), oracle::numeric_gradient(fv, loss)) < 1e-4);
  CHECK(oracle::relative_error(as_vector(lg.weights), oracle::numeric_gradient(wv, loss)) < 1e-4);
  CHECK(oracle::relative_error(lg.bias, oracle::numeric_gradient(bv, loss)) < 1e-4);

  TensorD x = oracle::random_tensor<double>({2, 3, 3, 3}, rng);
  TensorD gp = oracle::random_tensor<double>({2, 3}, rng);
  std::vector<double> xv = as_vector(x);
  auto pool_loss = [&] {
    TensorD p = global_avg_pool_forward(TensorD(x.shape(), xv));
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * gp[i];
    return s;
  };
  CHECK(oracle::relative_error(as_vector(global_avg_pool_backward(x.shape(), gp)),
                               oracle::numeric_gradient(xv, pool_loss)) < 1e-4);
  TensorD gr = oracle::random_tensor<double>(x.shape(), rng);
  auto relu_loss = [&] {
    TensorD p = relu_forward(TensorD(x.shape(), xv));
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * gr[i];
    return s;
  };
  CHECK(oracle::relative_error(as_vector(relu_backward(x, gr)), oracle::numeric_gradient(xv, relu_loss)) < 1e-4);
}

TEST_CASE("sgd momentum step") {
  SUBCASE("plain step") {
    std::vector<float> p{1.0f}, g{1.0f};
    OptimState<float> s{{0.0f}, 0.1, 0.0, 0.0};
    sgd_momentum_step<float>(p, g, s);
    CHECK(p[0] == doctest::Approx(0.9f));
  }
  SUBCASE("fixed point") {
    std::vector<float> p{1.5f}, g{0.0f};
    OptimState<float> s{{0.0f}, 0.1, 0.9, 0.0};
    sgd_momentum_step<float>(p, g, s);
    CHECK(p[0] == 1.5f);
  }
  SUBCASE("two steps against the unrolled recurrence") {
    std::vector<double> p{0.7}, g1{0.3}, g2{-0.5};
    OptimState<double> s{{0.0}, 0.05, 0.9, 1e-3};
    sgd_momentum_step<double>(p, g1, s);
    sgd_momentum_step<double>(p, g2, s);
    double v = 0.0, q = 0.7;
    v = 0.9 * v + 0.3 + 1e-3 * q;
    q -= 0.05 * v;
    v = 0.9 * v - 0.5 + 1e-3 * q;
    q -= 0.05 * v;
    CHECK(std::abs(p[0] - q) < 1e-7);
  }
  SUBCASE("non-finite gradient") {
    std::vector<float> p{1.0f}, g{std::nanf("")};
    OptimState<float> s{{0.0f}, 0.1, 0.9, 0.0};
    CHECK_THROWS_AS(sgd_momentum_step<float>(p, g, s), NumericError);
  }
}

TEST_CASE("soft threshold") {
  CHECK(soft_threshold(0.5, 0.2) == doctest::Approx(0.3));
  CHECK(soft_threshold(-0.1, 0.2) == 0.0);
  CHECK(soft_threshold(-1.0, 0.25) == doctest::Approx(-0.75));
  CHECK_THROWS_AS(soft_threshold(1.0, -0.1), InputError);

  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> xd(-3.0, 3.0), td(0.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    const double x = xd(rng), t = td(rng);
    const double resolution = 4.0 * std::abs(x) / 400000.0;
    CHECK(std::abs(soft_threshold(x, t) - oracle::grid_prox(x, t)) <= resolution + 1e-12);
  }
}

TEST_CASE("kernels are deterministic") {
  std::mt19937_64 rng(23);
  Tensor x = oracle::random_tensor<float>({8, 4, 6, 6}, rng);
  Tensor w = oracle::random_tensor<float>({5, 4, 3, 3}, rng);
  Tensor a = conv2d_forward(x, w, {1, 1}), b = conv2d_forward(x, w, {1, 1});
  CHECK(a == b);
  auto ga = conv2d_backward(x, w, a, {1, 1}), gb = conv2d_backward(x, w, a, {1, 1});
  CHECK(ga.weights == gb.weights);
  CHECK(ga.input == gb.input);
}
