#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gcp/tensor.hpp"

// Layer kernels for the Conv-BN-ReLU family: forward and exact backward maps,
// the SGD-with-momentum update and the L1 proximal operator. Every kernel is a
// pure function of its arguments and is instantiated for float and double.
namespace gcp {

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no bias)

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Output extent of one spatial axis; throws ConfigError when it would be < 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry geo);

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights, ConvGeometry geo);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;    // empty when not requested
  BasicTensor<T> weights;  // empty when not requested
};

// Gradients of sum(conv(input, weights) * grad_output). Either side can be
// skipped; frozen-filter training never needs the weight gradient.
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_output, ConvGeometry geo, bool want_input = true,
                             bool want_weights = true);

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode { BatchStats, FrozenStats };

template <typename T>
struct BnParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double eps = 1e-5;

  BnParams() = default;
  explicit BnParams(std::size_t channels, double epsilon = 1e-5)
      : gamma(channels, T{1}), beta(channels, T{0}), running_mean(channels, T{0}), running_var(channels, T{1}),
        eps(epsilon) {}

  std::size_t channels() const { return gamma.size(); }
  void check() const;

  friend bool operator==(const BnParams&, const BnParams&) = default;
};

// What backward needs from a forward call.
template <typename T>
struct BnContext {
  BnMode mode = BnMode::FrozenStats;
  BasicTensor<T> normalized;  // z-hat
  std::vector<T> gamma;       // scale actually applied
  std::vector<T> inv_std;
  std::vector<T> batch_mean;  // BatchStats only
  std::vector<T> batch_var;   // BatchStats only, population convention
};

template <typename T>
struct BnForward {
  BasicTensor<T> output;
  BnContext<T> context;
};

template <typename T>
BnForward<T> batchnorm_forward(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                               std::span<const T> running_mean, std::span<const T> running_var, double eps,
                               BnMode mode);

template <typename T>
BnForward<T> batchnorm_forward(const BasicTensor<T>& input, const BnParams<T>& params, BnMode mode) {
  return batchnorm_forward<T>(input, params.gamma, params.beta, params.running_mean, params.running_var, params.eps,
                              mode);
}

template <typename T>
struct BnGrads {
  BasicTensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BnGrads<T> batchnorm_backward(const BnContext<T>& context, const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Pointwise ops and classifier head

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output);

// (N, C, H, W) -> (N, C)
template <typename T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_output);

// features (N, F), weights (classes, F), bias (classes) -> logits (N, classes)
template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& features, const BasicTensor<T>& weights,
                              std::span<const T> bias);

template <typename T>
struct LinearGrads {
  BasicTensor<T> features;
  BasicTensor<T> weights;
  std::vector<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& features, const BasicTensor<T>& weights,
                               const BasicTensor<T>& grad_logits);

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> grad_logits;
};

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Optimization primitives

template <typename T>
struct OptimState {
  std::vector<T> velocity;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
// Throws NumericError on a non-finite gradient entry.
template <typename T>
void sgd_momentum_step(std::span<T> param, std::span<const T> grad, OptimState<T>& state);

// sign(x) * max(|x| - t, 0); exact zero when |x| <= t.
double soft_threshold(double x, double t);

template <typename T>
void soft_threshold_inplace(std::span<T> values, double t);

template <typename T>
BasicTensor<T> soft_threshold(const BasicTensor<T>& x, double t);

}  // namespace gcp
