#pragma once

#include <cstddef>
#include <vector>

#include "gcp/network.hpp"

namespace gcp {

// Sum over output filters j of ||W[j, i, :, :]||^2 for a consumer convolution.
template <typename T>
double channel_l2(const BasicTensor<T>& consumer_weights, std::size_t input_channel);

// Same quantity for a head input column: sum_j F[j, i]^2.
template <typename T>
double head_channel_l2(const BasicTensor<T>& head_weights, std::size_t feature);

// Sum of channel_l2 over every consumer (conv or head) of a group channel.
template <typename T>
double consumer_l2(const BasicModel<T>& model, int group, std::size_t channel);

// A site folds when its group is a single BN read by exactly one convolution.
template <typename T>
bool is_foldable(const BasicModel<T>& model, int group);

enum class FoldOutcome { Folded, DeadChannel, NotFoldable };

// Rescales the consumer's input slice to unit squared norm and moves the
// factor into the producer BN's gamma and beta. Leaves logits unchanged.
template <typename T>
FoldOutcome fold_unit_norm(BasicModel<T>& model, int bn_id, std::size_t channel);

struct FoldSummary {
  std::size_t folded = 0;
  std::size_t dead = 0;
  std::size_t skipped = 0;  // grouped or multi-consumer sites
};

// Folds every kept channel of every foldable site.
template <typename T>
FoldSummary fold_all(BasicModel<T>& model);

struct ChannelScore {
  double score = 0.0;
  int group = 0;
  std::size_t channel = 0;

  friend bool operator==(const ChannelScore&, const ChannelScore&) = default;
};

using ImportanceVector = std::vector<ChannelScore>;

// Scores of all kept channels. Foldable singletons: |gamma| (assumes fold_all
// ran; dead slices score 0). Other singletons: |gamma| * sqrt(consumer_l2).
// Grouped channels: |shared mask|.
template <typename T>
ImportanceVector importance_scores(const BasicModel<T>& model);

// |gamma| * sqrt(consumer_l2) for a singleton site regardless of folding.
template <typename T>
double variance_score(const BasicModel<T>& model, int group, std::size_t channel);

// Indices into `scores`, ascending by score, ties by (group, channel).
std::vector<std::size_t> rank_channels(const ImportanceVector& scores);

}  // namespace gcp
