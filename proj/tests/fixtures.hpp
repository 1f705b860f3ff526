#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <random>
#include <vector>

#include "gcp/architectures.hpp"
#include "gcp/network.hpp"
#include "oracles.hpp"

namespace fixture {

// conv(3->c1) bn relu conv(c1->c2) bn relu pool fc
inline gcp::NetworkSpec two_conv_net(std::size_t c1 = 4, std::size_t c2 = 5, std::size_t hw = 8,
                                     std::size_t classes = 3) {
  gcp::SpecBuilder b({3, hw, hw, classes});
  int x = b.conv_bn_relu(b.input(), c1, 3, 1, "conv1");
  x = b.conv_bn_relu(x, c2, 3, 2, "conv2");
  b.pool_and_linear(x);
  return b.build();
}

// Stem plus one identity residual block (conv-bn-relu-conv-bn + stem), then a
// strided block with a projection shortcut.
inline gcp::NetworkSpec residual_net(std::size_t hw = 8, std::size_t classes = 3) {
  gcp::SpecBuilder b({3, hw, hw, classes});
  int x = b.conv_bn_relu(b.input(), 4, 3, 1, "stem");
  int h = b.conv_bn_relu(x, 4, 3, 1, "b1.conv1");
  int bn = b.batchnorm(b.conv(h, 4, 3, 1, "b1.conv2"), "b1.conv2.bn");
  x = b.relu(b.add(bn, x, "b1.add"), "b1.relu");
  h = b.conv_bn_relu(x, 6, 3, 2, "b2.conv1");
  bn = b.batchnorm(b.conv(h, 6, 3, 1, "b2.conv2"), "b2.conv2.bn");
  int sc = b.batchnorm(b.conv(x, 6, 1, 2, "b2.shortcut"), "b2.shortcut.bn");
  x = b.relu(b.add(bn, sc, "b2.add"), "b2.relu");
  b.pool_and_linear(x);
  return b.build();
}

// Random non-trivial BN parameters and statistics so every path matters.
template <typename T>
void randomize(gcp::BasicModel<T>& model, std::uint64_t seed) {
  gcp::initialize_parameters(model, seed);
  std::mt19937_64 rng(seed + 1000);
  std::uniform_real_distribution<double> g(0.5, 1.5), b(-0.3, 0.3), m(-0.2, 0.2), v(0.5, 2.0), s(-1.0, 1.0);
  for (auto& [id, p] : model.bn) {
    for (auto& x : p.gamma) x = static_cast<T>(g(rng) * (s(rng) < -0.8 ? -1.0 : 1.0));
    for (auto& x : p.beta) x = static_cast<T>(b(rng));
    for (auto& x : p.running_mean) x = static_cast<T>(m(rng));
    for (auto& x : p.running_var) x = static_cast<T>(v(rng));
  }
  for (auto& x : model.head_bias) x = static_cast<T>(b(rng));
  model.mark_modified();
}

template <typename T>
std::vector<int> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(classes) - 1);
  std::vector<int> out(n);
  for (auto& l : out) l = d(rng);
  return out;
}

template <typename T>
double max_abs_diff(const gcp::BasicTensor<T>& a, const gcp::BasicTensor<T>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  return d;
}

}  // namespace fixture

namespace fixture {

struct GradCheck {
  std::string name;
  double rel_error = 0.0;
  std::size_t entries = 0;
};

// Central-difference check of every gradient the model's trainable flags
// produce (64-bit). At most `per_tensor` entries of each tensor are probed.
inline std::vector<GradCheck> gradient_check(gcp::ModelD& model, const gcp::TensorD& x,
                                             const std::vector<int>& labels, gcp::BnMode mode,
                                             std::size_t per_tensor = 24, std::uint64_t seed = 1) {
  auto fw = gcp::forward(model, x, mode, labels, true);
  const gcp::Gradients<double> grads = gcp::backward(model, fw.tape, fw.grad_logits);
  auto loss = [&] { return *gcp::forward(model, x, mode, labels, false).loss; };
  std::mt19937_64 rng(seed);
  std::vector<GradCheck> out;
  auto probe = [&](const std::string& name, std::span<double> values, std::span<const double> analytic) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() > per_tensor) idx.resize(per_tensor);
    std::vector<double> a, n;
    for (std::size_t i : idx) {
      std::vector<double> one{values[i]};
      auto g = oracle::numeric_gradient(one, [&] {
        const double saved = values[i];
        values[i] = one[0];
        const double l = loss();
        values[i] = saved;
        return l;
      });
      a.push_back(analytic[i]);
      n.push_back(g[0]);
    }
    out.push_back({name, oracle::relative_error(a, n), idx.size()});
  };
  for (const auto& [id, g] : grads.conv_weights) {
    probe("conv" + std::to_string(id), model.conv_weights.at(id).data(), g.data());
  }
  for (const auto& [id, g] : grads.gamma) probe("gamma" + std::to_string(id), model.bn.at(id).gamma, g);
  for (const auto& [id, g] : grads.beta) probe("beta" + std::to_string(id), model.bn.at(id).beta, g);
  for (const auto& [gid, g] : grads.group_mask) {
    probe("mask" + std::to_string(gid), model.group_mask[static_cast<std::size_t>(gid)], g);
  }
  if (grads.head_weights) probe("head.weight", model.head_weights.data(), grads.head_weights->data());
  if (grads.head_bias) probe("head.bias", model.head_bias, *grads.head_bias);
  return out;
}

}  // namespace fixture
