#include "gcp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <utility>
#include <string>
#include <type_traits>

#include "gcp/parallel.hpp"

namespace gcp {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
constexpr bool kThreaded = std::is_same_v<T, float>;

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(shape));
  }
}

struct ConvDims {
  std::size_t batch, in_ch, in_h, in_w, out_ch, kernel, out_h, out_w;
  std::size_t patch() const { return in_ch * kernel * kernel; }
  std::size_t out_plane() const { return out_h * out_w; }
  bool pointwise(ConvGeometry geo) const { return kernel == 1 && geo.stride == 1 && geo.pad == 0; }
};

template <typename T>
ConvDims conv_dims(const BasicTensor<T>& input, const BasicTensor<T>& weights, ConvGeometry geo) {
  require_rank(input.shape(), 4, "conv input");
  require_rank(weights.shape(), 4, "conv weights");
  if (geo.stride == 0) throw ConfigError("conv stride must be positive");
  if (weights.dim(1) != input.dim(1) || weights.dim(2) != weights.dim(3)) {
    throw DimensionError("conv weights " + shape_str(weights.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
  }
  ConvDims d{};
  d.batch = input.dim(0);
  d.in_ch = input.dim(1);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_ch = weights.dim(0);
  d.kernel = weights.dim(2);
  d.out_h = conv_output_extent(d.in_h, d.kernel, geo);
  d.out_w = conv_output_extent(d.in_w, d.kernel, geo);
  return d;
}

// Patch matrix of one image: row (c, kh, kw), column (oh, ow).
// Output columns [lo, hi) whose input column oh*stride + k - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t k, std::size_t pad,
                                                       std::size_t stride) {
  // ow * stride + k >= pad  and  ow * stride + k < in + pad
  const std::size_t lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  const std::size_t limit = in + pad;
  std::size_t hi = k >= limit ? 0 : (limit - k + stride - 1) / stride;
  hi = std::min(hi, out);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* image, const ConvDims& d, ConvGeometry geo, T* col) {
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    const T* plane = image + c * d.in_h * d.in_w;
    for (std::size_t kh = 0; kh < d.kernel; ++kh) {
      const auto [h_lo, h_hi] = valid_range(d.out_h, d.in_h, kh, geo.pad, geo.stride);
      for (std::size_t kw = 0; kw < d.kernel; ++kw) {
        const auto [w_lo, w_hi] = valid_range(d.out_w, d.in_w, kw, geo.pad, geo.stride);
        T* row = col + ((c * d.kernel + kh) * d.kernel + kw) * d.out_plane();
        std::fill(row, row + h_lo * d.out_w, T{0});
        std::fill(row + h_hi * d.out_w, row + d.out_plane(), T{0});
        for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
          const std::size_t ih = oh * geo.stride + kh - geo.pad;
          T* dst = row + oh * d.out_w;
          const T* src = plane + ih * d.in_w;
          std::fill(dst, dst + w_lo, T{0});
          if (w_lo < w_hi) {
            const T* first = src + (w_lo * geo.stride + kw - geo.pad);
            if (geo.stride == 1) {
              std::copy(first, first + (w_hi - w_lo), dst + w_lo);
            } else {
              for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow] = first[(ow - w_lo) * geo.stride];
            }
          }
          std::fill(dst + w_hi, dst + d.out_w, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, ConvGeometry geo, T* image) {
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    T* plane = image + c * d.in_h * d.in_w;
    for (std::size_t kh = 0; kh < d.kernel; ++kh) {
      const auto [h_lo, h_hi] = valid_range(d.out_h, d.in_h, kh, geo.pad, geo.stride);
      for (std::size_t kw = 0; kw < d.kernel; ++kw) {
        const auto [w_lo, w_hi] = valid_range(d.out_w, d.in_w, kw, geo.pad, geo.stride);
        const T* row = col + ((c * d.kernel + kh) * d.kernel + kw) * d.out_plane();
        for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
          const std::size_t ih = oh * geo.stride + kh - geo.pad;
          if (w_lo >= w_hi) continue;
          T* dst = plane + ih * d.in_w + (w_lo * geo.stride + kw - geo.pad);
          const T* src = row + oh * d.out_w;
          for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[(ow - w_lo) * geo.stride] += src[ow];
        }
      }
    }
  }
}

// Fixed-order sums over a contiguous run using 8 independent lanes, so the
// compiler can vectorize while results stay bit-reproducible.
template <typename T>
double lane_sum(const T* p, std::size_t len, double) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= len; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) lanes[k] += static_cast<double>(p[i + k]);
  }
  double sum = 0.0;
  for (; i < len; ++i) sum += static_cast<double>(p[i]);
  for (double l : lanes) sum += l;
  return sum;
}

template <typename T>
double lane_sum_sq(const T* p, std::size_t len, double mu) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= len; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) {
      const double d = static_cast<double>(p[i + k]) - mu;
      lanes[k] += d * d;
    }
  }
  double sum = 0.0;
  for (; i < len; ++i) {
    const double d = static_cast<double>(p[i]) - mu;
    sum += d * d;
  }
  for (double l : lanes) sum += l;
  return sum;
}

template <typename T>
double lane_dot(const T* a, const T* b, std::size_t len) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= len; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) lanes[k] += static_cast<double>(a[i + k]) * static_cast<double>(b[i + k]);
  }
  double sum = 0.0;
  for (; i < len; ++i) sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  for (double l : lanes) sum += l;
  return sum;
}

template <typename T>
void check_bn_vectors(std::size_t channels, std::size_t gamma, std::size_t beta, std::size_t mean,
                      std::size_t var) {
  if (gamma != channels || beta != channels || mean != channels || var != channels) {
    throw DimensionError("batchnorm parameters sized (" + std::to_string(gamma) + ", " + std::to_string(beta) + ", " +
                         std::to_string(mean) + ", " + std::to_string(var) + ") for " + std::to_string(channels) +
                         " channels");
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry geo) {
  if (geo.stride == 0) throw ConfigError("conv stride must be positive");
  std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * geo.pad) - static_cast<std::ptrdiff_t>(kernel);
  if (span < 0) {
    throw ConfigError("conv output size is not positive (input " + std::to_string(in) + ", kernel " +
                      std::to_string(kernel) + ", pad " + std::to_string(geo.pad) + ")");
  }
  return static_cast<std::size_t>(span) / geo.stride + 1;
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights, ConvGeometry geo) {
  const ConvDims d = conv_dims(input, weights, geo);
  BasicTensor<T> output({d.batch, d.out_ch, d.out_h, d.out_w});
  const std::size_t in_image = d.in_ch * d.in_h * d.in_w;
  const std::size_t out_image = d.out_ch * d.out_plane();
  Eigen::Map<const RowMat<T>> filters(weights.data().data(), d.out_ch, d.patch());

  parallel_for(
      d.batch,
      [&](std::size_t n) {
        const T* image = input.data().data() + n * in_image;
        Eigen::Map<RowMat<T>> out(output.data().data() + n * out_image, d.out_ch, d.out_plane());
        if (d.pointwise(geo)) {
          out.noalias() = filters * Eigen::Map<const RowMat<T>>(image, d.patch(), d.out_plane());
          return;
        }
        thread_local std::vector<T> col;
        col.resize(d.patch() * d.out_plane());
        im2col(image, d, geo, col.data());
        out.noalias() = filters * Eigen::Map<const RowMat<T>>(col.data(), d.patch(), d.out_plane());
      },
      kThreaded<T>);
  return output;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_output, ConvGeometry geo, bool want_input,
                             bool want_weights) {
  const ConvDims d = conv_dims(input, weights, geo);
  const Shape expected{d.batch, d.out_ch, d.out_h, d.out_w};
  if (grad_output.shape() != expected) {
    throw DimensionError("conv grad_output " + shape_str(grad_output.shape()) + " does not match output " +
                         shape_str(expected));
  }
  ConvGrads<T> grads;
  if (!want_input && !want_weights) return grads;

  const std::size_t in_image = d.in_ch * d.in_h * d.in_w;
  const std::size_t out_image = d.out_ch * d.out_plane();
  const std::size_t filter_size = d.out_ch * d.patch();
  Eigen::Map<const RowMat<T>> filters(weights.data().data(), d.out_ch, d.patch());

  if (want_input) grads.input = BasicTensor<T>(input.shape());
  // One partial per image, summed in image order below, so the result does
  // not depend on how images were spread across workers.
  std::vector<T> partials(want_weights ? d.batch * filter_size : 0);

  parallel_for(
      d.batch,
      [&](std::size_t n) {
        const T* image = input.data().data() + n * in_image;
        Eigen::Map<const RowMat<T>> gout(grad_output.data().data() + n * out_image, d.out_ch, d.out_plane());
        thread_local std::vector<T> col;
        const bool pointwise = d.pointwise(geo);
        if (want_weights) {
          Eigen::Map<RowMat<T>> partial(partials.data() + n * filter_size, d.out_ch, d.patch());
          if (pointwise) {
            partial.noalias() = gout * Eigen::Map<const RowMat<T>>(image, d.patch(), d.out_plane()).transpose();
          } else {
            col.resize(d.patch() * d.out_plane());
            im2col(image, d, geo, col.data());
            partial.noalias() = gout * Eigen::Map<const RowMat<T>>(col.data(), d.patch(), d.out_plane()).transpose();
          }
        }
        if (want_input) {
          T* gimage = grads.input.data().data() + n * in_image;
          if (pointwise) {
            Eigen::Map<RowMat<T>>(gimage, d.patch(), d.out_plane()).noalias() = filters.transpose() * gout;
          } else {
            col.resize(d.patch() * d.out_plane());
            Eigen::Map<RowMat<T>>(col.data(), d.patch(), d.out_plane()).noalias() = filters.transpose() * gout;
            col2im_add(col.data(), d, geo, gimage);
          }
        }
      },
      kThreaded<T>);

  if (want_weights) {
    grads.weights = BasicTensor<T>(weights.shape());
    T* dst = grads.weights.data().data();
    for (std::size_t n = 0; n < d.batch; ++n) {
      const T* src = partials.data() + n * filter_size;
      for (std::size_t i = 0; i < filter_size; ++i) dst[i] += src[i];
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

template <typename T>
void BnParams<T>::check() const {
  check_bn_vectors<T>(gamma.size(), gamma.size(), beta.size(), running_mean.size(), running_var.size());
  if (!(eps > 0.0)) throw ConfigError("batchnorm eps must be positive");
  for (T v : running_var) {
    if (!(v >= T{0})) throw ConfigError("batchnorm running variance must be non-negative");
  }
}

template <typename T>
BnForward<T> batchnorm_forward(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                               std::span<const T> running_mean, std::span<const T> running_var, double eps,
                               BnMode mode) {
  require_rank(input.shape(), 4, "batchnorm input");
  const std::size_t batch = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
  check_bn_vectors<T>(channels, gamma.size(), beta.size(), running_mean.size(), running_var.size());
  const std::size_t count = batch * plane;
  if (mode == BnMode::BatchStats && count < 2) {
    throw ConfigError("batch statistics need at least 2 entries per channel, got " + std::to_string(count));
  }

  BnForward<T> result;
  BnContext<T>& ctx = result.context;
  ctx.mode = mode;
  ctx.gamma.assign(gamma.begin(), gamma.end());
  ctx.inv_std.resize(channels);
  std::vector<double> mean(channels), var(channels);
  if (mode == BnMode::BatchStats) {
    ctx.batch_mean.resize(channels);
    ctx.batch_var.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (std::size_t n = 0; n < batch; ++n) sum += lane_sum(input.data().data() + (n * channels + c) * plane, plane, 0.0);
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < batch; ++n) sq += lane_sum_sq(input.data().data() + (n * channels + c) * plane, plane, mu);
      mean[c] = mu;
      var[c] = sq / static_cast<double>(count);
      ctx.batch_mean[c] = static_cast<T>(mean[c]);
      ctx.batch_var[c] = static_cast<T>(var[c]);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }

  ctx.normalized = BasicTensor<T>(input.shape());
  result.output = BasicTensor<T>(input.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    ctx.inv_std[c] = static_cast<T>(inv);
    const T mu = static_cast<T>(mean[c]);
    const T inv_t = static_cast<T>(inv);
    const T g = gamma[c], b = beta[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      const T* src = input.data().data() + off;
      T* zhat = ctx.normalized.data().data() + off;
      T* out = result.output.data().data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        zhat[i] = (src[i] - mu) * inv_t;
        out[i] = g * zhat[i] + b;
      }
    }
  }
  return result;
}

template <typename T>
BnGrads<T> batchnorm_backward(const BnContext<T>& ctx, const BasicTensor<T>& grad_output) {
  if (grad_output.shape() != ctx.normalized.shape()) {
    throw DimensionError("batchnorm grad_output " + shape_str(grad_output.shape()) + " does not match " +
                         shape_str(ctx.normalized.shape()));
  }
  const std::size_t batch = grad_output.dim(0), channels = grad_output.dim(1),
                    plane = grad_output.dim(2) * grad_output.dim(3);
  const double count = static_cast<double>(batch * plane);
  BnGrads<T> grads;
  grads.input = BasicTensor<T>(grad_output.shape());
  grads.gamma.assign(channels, T{0});
  grads.beta.assign(channels, T{0});

  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_z = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      const T* dy = grad_output.data().data() + off;
      sum_dy += lane_sum(dy, plane, 0.0);
      sum_dy_z += lane_dot(dy, ctx.normalized.data().data() + off, plane);
    }
    grads.gamma[c] = static_cast<T>(sum_dy_z);
    grads.beta[c] = static_cast<T>(sum_dy);

    const double g = ctx.gamma[c];
    const double inv = ctx.inv_std[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      const T* dy = grad_output.data().data() + off;
      const T* z = ctx.normalized.data().data() + off;
      T* dx = grads.input.data().data() + off;
      if (ctx.mode == BnMode::FrozenStats) {
        const T scale = static_cast<T>(g * inv);
        for (std::size_t i = 0; i < plane; ++i) dx[i] = dy[i] * scale;
      } else {
        // dx = g*inv/M * (M*dy - sum(dy) - zhat*sum(dy*zhat))
        const double mean_dy = sum_dy / count, mean_dy_z = sum_dy_z / count;
        for (std::size_t i = 0; i < plane; ++i) {
          dx[i] = static_cast<T>(g * inv * (dy[i] - mean_dy - z[i] * mean_dy_z));
        }
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output) {
  if (input.shape() != grad_output.shape()) {
    throw DimensionError("relu grad_output " + shape_str(grad_output.shape()) + " vs input " +
                         shape_str(input.shape()));
  }
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? grad_output[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& input) {
  require_rank(input.shape(), 4, "pool input");
  const std::size_t batch = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
  BasicTensor<T> out({batch, channels});
  for (std::size_t nc = 0; nc < batch * channels; ++nc) {
    double sum = 0.0;
    const T* p = input.data().data() + nc * plane;
    for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    out[nc] = static_cast<T>(sum / static_cast<double>(plane));
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_output) {
  require_rank(input_shape, 4, "pool input");
  const std::size_t batch = input_shape[0], channels = input_shape[1], plane = input_shape[2] * input_shape[3];
  if (grad_output.shape() != Shape{batch, channels}) {
    throw DimensionError("pool grad_output " + shape_str(grad_output.shape()) + " vs input " +
                         shape_str(input_shape));
  }
  BasicTensor<T> out(input_shape);
  const T scale = static_cast<T>(1.0 / static_cast<double>(plane));
  for (std::size_t nc = 0; nc < batch * channels; ++nc) {
    T v = grad_output[nc] * scale;
    std::fill_n(out.data().data() + nc * plane, plane, v);
  }
  return out;
}

template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& features, const BasicTensor<T>& weights,
                              std::span<const T> bias) {
  require_rank(features.shape(), 2, "linear features");
  require_rank(weights.shape(), 2, "linear weights");
  if (weights.dim(1) != features.dim(1) || bias.size() != weights.dim(0)) {
    throw DimensionError("linear weights " + shape_str(weights.shape()) + " / bias " + std::to_string(bias.size()) +
                         " incompatible with features " + shape_str(features.shape()));
  }
  const std::size_t batch = features.dim(0), classes = weights.dim(0), width = weights.dim(1);
  BasicTensor<T> logits({batch, classes});
  Eigen::Map<const RowMat<T>> x(features.data().data(), batch, width);
  Eigen::Map<const RowMat<T>> w(weights.data().data(), classes, width);
  Eigen::Map<RowMat<T>> out(logits.data().data(), batch, classes);
  out.noalias() = x * w.transpose();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t j = 0; j < classes; ++j) out(n, j) += bias[j];
  }
  return logits;
}

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& features, const BasicTensor<T>& weights,
                               const BasicTensor<T>& grad_logits) {
  const std::size_t batch = features.dim(0), classes = weights.dim(0), width = weights.dim(1);
  if (grad_logits.shape() != Shape{batch, classes}) {
    throw DimensionError("linear grad_logits " + shape_str(grad_logits.shape()) + " expected [" +
                         std::to_string(batch) + ", " + std::to_string(classes) + "]");
  }
  LinearGrads<T> grads;
  grads.features = BasicTensor<T>({batch, width});
  grads.weights = BasicTensor<T>({classes, width});
  grads.bias.assign(classes, T{0});
  Eigen::Map<const RowMat<T>> x(features.data().data(), batch, width);
  Eigen::Map<const RowMat<T>> w(weights.data().data(), classes, width);
  Eigen::Map<const RowMat<T>> g(grad_logits.data().data(), batch, classes);
  Eigen::Map<RowMat<T>>(grads.features.data().data(), batch, width).noalias() = g * w;
  Eigen::Map<RowMat<T>>(grads.weights.data().data(), classes, width).noalias() = g.transpose() * x;
  for (std::size_t j = 0; j < classes; ++j) {
    double sum = 0.0;
    for (std::size_t n = 0; n < batch; ++n) sum += g(n, j);
    grads.bias[j] = static_cast<T>(sum);
  }
  return grads;
}

template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError(std::to_string(labels.size()) + " labels for a batch of " + std::to_string(batch));
  }
  LossAndGrad<T> result;
  result.grad_logits = BasicTensor<T>(logits.shape());
  double total = 0.0;
  std::vector<double> prob(classes);
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                       " classes");
    }
    const T* row = logits.data().data() + n * classes;
    double peak = row[0];
    for (std::size_t j = 1; j < classes; ++j) peak = std::max(peak, static_cast<double>(row[j]));
    double norm = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      prob[j] = std::exp(row[j] - peak);
      norm += prob[j];
    }
    total += std::log(norm) + peak - row[label];
    T* grad = result.grad_logits.data().data() + n * classes;
    for (std::size_t j = 0; j < classes; ++j) {
      double p = prob[j] / norm - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0);
      grad[j] = static_cast<T>(p / static_cast<double>(batch));
    }
  }
  result.loss = total / static_cast<double>(batch);
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
void sgd_momentum_step(std::span<T> param, std::span<const T> grad, OptimState<T>& state) {
  if (grad.size() != param.size()) {
    throw DimensionError("sgd: gradient length " + std::to_string(grad.size()) + " vs parameter length " +
                         std::to_string(param.size()));
  }
  if (state.velocity.empty()) state.velocity.assign(param.size(), T{0});
  if (state.velocity.size() != param.size()) {
    throw DimensionError("sgd: velocity length " + std::to_string(state.velocity.size()) + " vs parameter length " +
                         std::to_string(param.size()));
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grad[i]))) {
      throw NumericError("sgd: non-finite gradient at index " + std::to_string(i));
    }
  }
  const T momentum = static_cast<T>(state.momentum), decay = static_cast<T>(state.weight_decay),
          lr = static_cast<T>(state.lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.velocity[i] = momentum * state.velocity[i] + grad[i] + decay * param[i];
    param[i] -= lr * state.velocity[i];
  }
}

double soft_threshold(double x, double t) {
  if (!(t >= 0.0)) throw InputError("soft threshold must be non-negative, got " + std::to_string(t));
  if (std::abs(x) <= t) return 0.0;
  return x > 0.0 ? x - t : x + t;
}

template <typename T>
void soft_threshold_inplace(std::span<T> values, double t) {
  if (!(t >= 0.0)) throw InputError("soft threshold must be non-negative, got " + std::to_string(t));
  const T tt = static_cast<T>(t);
  for (T& v : values) {
    if (std::abs(v) <= tt) {
      v = T{0};
    } else {
      v = v > T{0} ? v - tt : v + tt;
    }
  }
}

template <typename T>
BasicTensor<T> soft_threshold(const BasicTensor<T>& x, double t) {
  BasicTensor<T> out = x;
  soft_threshold_inplace<T>(out.data(), t);
  return out;
}

#define GCP_INSTANTIATE_OPS(T)                                                                                     \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, ConvGeometry);              \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                        ConvGeometry, bool, bool);                                                 \
  template struct BnParams<T>;                                                                                     \
  template BnForward<T> batchnorm_forward(const BasicTensor<T>&, std::span<const T>, std::span<const T>,          \
                                          std::span<const T>, std::span<const T>, double, BnMode);                 \
  template BnGrads<T> batchnorm_backward(const BnContext<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>&);                                          \
  template BasicTensor<T> global_avg_pool_backward(const Shape&, const BasicTensor<T>&);                           \
  template BasicTensor<T> linear_forward(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>);        \
  template LinearGrads<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);    \
  template LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);                      \
  template void sgd_momentum_step(std::span<T>, std::span<const T>, OptimState<T>&);                               \
  template void soft_threshold_inplace(std::span<T>, double);                                                      \
  template BasicTensor<T> soft_threshold(const BasicTensor<T>&, double);

GCP_INSTANTIATE_OPS(float)
GCP_INSTANTIATE_OPS(double)

#undef GCP_INSTANTIATE_OPS

}  // namespace gcp
