#include "gcp/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace gcp {

template <typename T>
double channel_l2(const BasicTensor<T>& w, std::size_t input_channel) {
  if (w.rank() != 4) throw DimensionError("channel_l2 expects conv weights, got " + shape_str(w.shape()));
  if (input_channel >= w.dim(1)) {
    throw InputError("input channel " + std::to_string(input_channel) + " out of range for " + shape_str(w.shape()));
  }
  const std::size_t kk = w.dim(2) * w.dim(3);
  double sum = 0.0;
  for (std::size_t j = 0; j < w.dim(0); ++j) {
    const T* slice = &w.at(j, input_channel, 0, 0);
    for (std::size_t k = 0; k < kk; ++k) sum += static_cast<double>(slice[k]) * slice[k];
  }
  return sum;
}

template <typename T>
double head_channel_l2(const BasicTensor<T>& f, std::size_t feature) {
  if (f.rank() != 2 || feature >= f.dim(1)) throw InputError("head feature index out of range");
  double sum = 0.0;
  for (std::size_t j = 0; j < f.dim(0); ++j) {
    const double v = f[j * f.dim(1) + feature];
    sum += v * v;
  }
  return sum;
}

template <typename T>
double consumer_l2(const BasicModel<T>& model, int group, std::size_t channel) {
  double sum = 0.0;
  for (int c : model.groups.at(static_cast<std::size_t>(group)).consumers) {
    if (model.spec().layer(c).kind == LayerKind::Linear) {
      sum += head_channel_l2(model.head_weights, channel);
    } else {
      sum += channel_l2(model.conv_weights.at(c), channel);
    }
  }
  return sum;
}

template <typename T>
bool is_foldable(const BasicModel<T>& model, int group) {
  const ChannelGroup& g = model.groups.at(static_cast<std::size_t>(group));
  return g.members.size() == 1 && g.consumers.size() == 1 &&
         model.spec().layer(g.consumers.front()).kind == LayerKind::Conv;
}

template <typename T>
FoldOutcome fold_unit_norm(BasicModel<T>& model, int bn_id, std::size_t channel) {
  const int group = model.group_index().by_bn.at(bn_id);
  if (!is_foldable(model, group)) return FoldOutcome::NotFoldable;
  BnParams<T>& bn = model.bn.at(bn_id);
  if (channel >= bn.channels()) throw InputError("fold channel out of range");
  BasicTensor<T>& w = model.conv_weights.at(model.groups[static_cast<std::size_t>(group)].consumers.front());
  const double s = std::sqrt(channel_l2(w, channel));
  if (s == 0.0) return FoldOutcome::DeadChannel;
  const std::size_t kk = w.dim(2) * w.dim(3);
  for (std::size_t j = 0; j < w.dim(0); ++j) {
    T* slice = &w.at(j, channel, 0, 0);
    for (std::size_t k = 0; k < kk; ++k) slice[k] = static_cast<T>(slice[k] / s);
  }
  bn.gamma[channel] = static_cast<T>(bn.gamma[channel] * s);
  bn.beta[channel] = static_cast<T>(bn.beta[channel] * s);
  model.mark_modified();
  return FoldOutcome::Folded;
}

template <typename T>
FoldSummary fold_all(BasicModel<T>& model) {
  FoldSummary summary;
  for (const ChannelGroup& g : model.groups) {
    if (!is_foldable(model, g.id)) {
      summary.skipped += g.kept_count();
      continue;
    }
    for (std::size_t c = 0; c < g.channels; ++c) {
      if (!g.kept[c]) continue;
      if (fold_unit_norm(model, g.members.front(), c) == FoldOutcome::DeadChannel) {
        ++summary.dead;
      } else {
        ++summary.folded;
      }
    }
  }
  return summary;
}

template <typename T>
double variance_score(const BasicModel<T>& model, int group, std::size_t channel) {
  const ChannelGroup& g = model.groups.at(static_cast<std::size_t>(group));
  const double gamma = model.bn.at(g.members.front()).gamma.at(channel);
  return std::abs(gamma) * std::sqrt(consumer_l2(model, group, channel));
}

template <typename T>
ImportanceVector importance_scores(const BasicModel<T>& model) {
  ImportanceVector scores;
  for (const ChannelGroup& g : model.groups) {
    const bool foldable = is_foldable(model, g.id);
    for (std::size_t c = 0; c < g.channels; ++c) {
      if (!g.kept[c]) continue;
      double score = 0.0;
      if (g.grouped()) {
        score = std::abs(static_cast<double>(model.group_mask[static_cast<std::size_t>(g.id)][c]));
      } else if (foldable) {
        const bool dead = consumer_l2(model, g.id, c) == 0.0;
        score = dead ? 0.0 : std::abs(static_cast<double>(model.bn.at(g.members.front()).gamma[c]));
      } else {
        score = variance_score(model, g.id, c);
      }
      scores.push_back({score, g.id, c});
    }
  }
  return scores;
}

std::vector<std::size_t> rank_channels(const ImportanceVector& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const ChannelScore& x = scores[a];
    const ChannelScore& y = scores[b];
    return std::tie(x.score, x.group, x.channel) < std::tie(y.score, y.group, y.channel);
  });
  return order;
}

#define GCP_INSTANTIATE_IMPORTANCE(T)                                                  \
  template double channel_l2(const BasicTensor<T>&, std::size_t);                      \
  template double head_channel_l2(const BasicTensor<T>&, std::size_t);                 \
  template double consumer_l2(const BasicModel<T>&, int, std::size_t);                 \
  template bool is_foldable(const BasicModel<T>&, int);                                \
  template FoldOutcome fold_unit_norm(BasicModel<T>&, int, std::size_t);               \
  template FoldSummary fold_all(BasicModel<T>&);                                       \
  template double variance_score(const BasicModel<T>&, int, std::size_t);              \
  template ImportanceVector importance_scores(const BasicModel<T>&);

GCP_INSTANTIATE_IMPORTANCE(float)
GCP_INSTANTIATE_IMPORTANCE(double)

#undef GCP_INSTANTIATE_IMPORTANCE

}  // namespace gcp
