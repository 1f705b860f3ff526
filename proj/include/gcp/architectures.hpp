#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "gcp/network.hpp"

namespace gcp {

struct InputGeometry {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 10;
};

// Incremental builder for Conv-BN-ReLU networks. Ids are assigned in
// creation order, which is also the order convolution layers are plotted in.
class SpecBuilder {
 public:
  explicit SpecBuilder(InputGeometry geo);

  int input() const { return input_id_; }
  int conv(int from, std::size_t out_channels, std::size_t kernel, std::size_t stride, const std::string& name);
  int batchnorm(int from, const std::string& name);
  int relu(int from, const std::string& name);
  int add(int lhs, int rhs, const std::string& name);
  int pool_and_linear(int from);

  // conv -> bn -> relu, returns the relu id
  int conv_bn_relu(int from, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                   const std::string& name);

  NetworkSpec build() const { return spec_; }
  std::size_t channels_of(int id) const;

 private:
  int push(LayerSpec layer);

  NetworkSpec spec_;
  InputGeometry geo_;
  int input_id_ = 0;
  int next_id_ = 0;
};

// Stem conv plus three stages of one basic residual block each
// (post-add ReLU, 1x1 strided projection where the width changes).
NetworkSpec resnet8_spec(InputGeometry geo = {}, std::array<std::size_t, 3> widths = {16, 32, 64});

// Plain six-conv chain, stride 2 at the third and fifth convolution.
NetworkSpec convnet6_spec(InputGeometry geo = {}, std::array<std::size_t, 3> widths = {16, 32, 64});

// "resnet8" | "convnet6"; throws ConfigError otherwise.
NetworkSpec builtin_spec(const std::string& name, InputGeometry geo);

}  // namespace gcp
