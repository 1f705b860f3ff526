#include <cmath>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "gcp/architectures.hpp"
#include "gcp/importance.hpp"
#include "gcp/network.hpp"

using namespace gcp;

namespace {

int layer_id(const NetworkSpec& spec, const std::string& name) {
  for (const auto& l : spec.layers) {
    if (l.name == name) return l.id;
  }
  FAIL("no layer " << name);
  return -1;
}

int group_of(const ModelD& model, int bn_id) {
  for (const auto& g : model.groups) {
    for (int m : g.members) {
      if (m == bn_id) return g.id;
    }
  }
  return -1;
}

}  // namespace

TEST_CASE("channel_l2") {
  TensorD w({2, 2, 1, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(channel_l2(w, 0) == doctest::Approx(1 + 4 + 25 + 36));
  CHECK(channel_l2(w, 1) == doctest::Approx(9 + 16 + 49 + 64));
  TensorD f({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(head_channel_l2(f, 1) == doctest::Approx(4 + 25));
}

TEST_CASE("fold_unit_norm") {
  std::mt19937_64 rng(13);
  ModelD model(convnet6_spec({3, 12, 12, 10}));
  fixture::randomize(model, 6);
  TensorD x = oracle::random_tensor<double>({3, 3, 12, 12}, rng);
  const TensorD before = forward(model, x, BnMode::FrozenStats).logits;

  SUBCASE("every site of the plain chain folds and logits are unchanged") {
    for (const auto& g : model.groups) {
      const bool conv_consumer = model.spec().layer(g.consumers[0]).kind == LayerKind::Conv;
      CHECK(is_foldable(model, g.id) == (g.consumers.size() == 1 && conv_consumer));
    }
    FoldSummary s = fold_all(model);
    CHECK(s.folded > 0);
    CHECK(s.dead == 0);
    CHECK(fixture::max_abs_diff(forward(model, x, BnMode::FrozenStats).logits, before) < 1e-9);
    for (const auto& g : model.groups) {
      if (!is_foldable(model, g.id)) continue;
      for (std::size_t c = 0; c < g.channels; ++c) CHECK(consumer_l2(model, g.id, c) == doctest::Approx(1.0));
    }
  }
  SUBCASE("folding twice is a no-op") {
    fold_all(model);
    ModelD once = model;
    fold_all(model);
    for (const auto& [id, p] : model.bn) {
      for (std::size_t c = 0; c < p.gamma.size(); ++c) CHECK(p.gamma[c] == doctest::Approx(once.bn.at(id).gamma[c]));
    }
  }
  SUBCASE("zero consumer slice is reported dead") {
    const int conv2 = layer_id(model.spec(), "conv2");
    const int bn1 = layer_id(model.spec(), "conv1.bn");
    TensorD& w = model.conv_weights.at(conv2);
    for (std::size_t o = 0; o < w.dim(0); ++o)
      for (std::size_t k = 0; k < 9; ++k) w[(o * w.dim(1) + 2) * 9 + k] = 0.0;
    model.mark_modified();
    CHECK(fold_unit_norm(model, bn1, 2) == FoldOutcome::DeadChannel);
  }
  SUBCASE("folded score equals the variance score") {
    const int bn1 = layer_id(model.spec(), "conv1.bn");
    const int g = group_of(model, bn1);
    std::vector<double> expected;
    for (std::size_t c = 0; c < model.groups[static_cast<std::size_t>(g)].channels; ++c)
      expected.push_back(variance_score(model, g, c));
    fold_all(model);
    for (const auto& s : importance_scores(model)) {
      if (s.group == g) CHECK(s.score == doctest::Approx(expected[s.channel]));
    }
  }
}

TEST_CASE("fold refuses grouped sites") {
  ModelD model(fixture::residual_net());
  fixture::randomize(model, 3);
  for (const auto& g : model.groups) {
    if (g.grouped()) {
      CHECK_FALSE(is_foldable(model, g.id));
      CHECK(fold_unit_norm(model, g.members[0], 0) == FoldOutcome::NotFoldable);
    }
  }
}

TEST_CASE("importance_scores") {
  ModelD model(fixture::residual_net());
  fixture::randomize(model, 8);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> d(0.1, 2.0);
  for (auto& m : model.group_mask)
    for (auto& v : m) v = d(rng) * (d(rng) < 0.5 ? -1.0 : 1.0);
  model.mark_modified();
  ImportanceVector scores = importance_scores(model);
  std::size_t total = 0;
  for (const auto& g : model.groups) total += g.kept_count();
  CHECK(scores.size() == total);
  for (const auto& s : scores) {
    const ChannelGroup& g = model.groups[static_cast<std::size_t>(s.group)];
    if (g.grouped()) {
      CHECK(s.score == doctest::Approx(std::abs(model.group_mask[static_cast<std::size_t>(s.group)][s.channel])));
    } else if (!is_foldable(model, s.group)) {
      const double gamma = model.bn.at(g.members[0]).gamma[s.channel];
      CHECK(s.score == doctest::Approx(std::abs(gamma) * std::sqrt(consumer_l2(model, s.group, s.channel))));
    } else {
      CHECK(s.score == doctest::Approx(std::abs(model.bn.at(g.members[0]).gamma[s.channel])));
    }
  }
  SUBCASE("pruned channels are not scored") {
    PruneMask mask = PruneMask::all_keep(model.groups);
    mask.keep[1][0] = false;
    apply_mask(model, mask);
    for (const auto& s : importance_scores(model)) CHECK_FALSE((s.group == 1 && s.channel == 0));
  }
}

TEST_CASE("rank_channels") {
  ImportanceVector v = {{0.5, 2, 0}, {0.01, 1, 3}, {0.5, 1, 4}, {0.02, 3, 0}, {0.5, 1, 2}};
  CHECK(rank_channels(v) == std::vector<std::size_t>{1, 3, 4, 2, 0});
  CHECK(rank_channels({}).empty());
}
