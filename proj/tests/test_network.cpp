#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "gcp/architectures.hpp"
#include "gcp/errors.hpp"
#include "gcp/network.hpp"

using namespace gcp;

namespace {

bool has_error(const std::vector<std::string>& errors, const std::string& needle) {
  return std::any_of(errors.begin(), errors.end(),
                     [&](const std::string& e) { return e.find(needle) != std::string::npos; });
}

std::set<std::string> member_names(const NetworkSpec& spec, const ChannelGroup& g) {
  std::set<std::string> out;
  for (int id : g.members) out.insert(spec.layer(id).name);
  return out;
}

const ChannelGroup* group_with(const NetworkSpec& spec, const std::vector<ChannelGroup>& groups,
                               const std::string& bn_name) {
  for (const auto& g : groups) {
    if (member_names(spec, g).count(bn_name)) return &g;
  }
  return nullptr;
}

PruneMask random_mask(const std::vector<ChannelGroup>& groups, std::mt19937_64& rng) {
  PruneMask mask = PruneMask::all_keep(groups);
  std::bernoulli_distribution drop(0.4);
  for (auto& k : mask.keep) {
    for (std::size_t c = 0; c < k.size(); ++c) k[c] = !drop(rng);
    if (std::none_of(k.begin(), k.end(), [](bool b) { return b; })) k[rng() % k.size()] = true;
  }
  return mask;
}

}  // namespace

TEST_CASE("validate") {
  SUBCASE("plain two-conv chain is valid") { CHECK(validate(fixture::two_conv_net()).empty()); }
  SUBCASE("builtin architectures are valid") {
    CHECK(validate(resnet8_spec()).empty());
    CHECK(validate(convnet6_spec()).empty());
  }
  SUBCASE("add joining 8 and 4 channels") {
    SpecBuilder b({3, 8, 8, 3});
    int a = b.batchnorm(b.conv(b.input(), 8, 3, 1, "a"), "a.bn");
    int c = b.batchnorm(b.conv(b.input(), 4, 3, 1, "c"), "c.bn");
    b.pool_and_linear(b.relu(b.add(a, c, "sum"), "sum.relu"));
    CHECK(has_error(validate(b.build()), "channel mismatch"));
    CHECK_THROWS_AS(analyze(b.build()), ConfigError);
  }
  SUBCASE("cycle") {
    NetworkSpec spec = fixture::two_conv_net();
    // conv1 reads the second relu: a loop through the whole chain
    for (auto& l : spec.layers) {
      if (l.name == "conv1") l.inputs = {spec.layers[6].id};
    }
    CHECK(has_error(validate(spec), "cycle"));
  }
  SUBCASE("conv without batchnorm violates the family") {
    SpecBuilder b({3, 8, 8, 3});
    b.pool_and_linear(b.relu(b.conv(b.input(), 4, 3, 1, "c"), "r"));
    CHECK_FALSE(validate(b.build()).empty());
  }
}

TEST_CASE("build_groups") {
  SUBCASE("chain gives singletons") {
    NetworkSpec spec = fixture::two_conv_net();
    auto groups = build_groups(spec);
    REQUIRE(groups.size() == 2);
    CHECK(member_names(spec, groups[0]) == std::set<std::string>{"conv1.bn"});
    CHECK(member_names(spec, groups[1]) == std::set<std::string>{"conv2.bn"});
  }
  SUBCASE("basic residual block") {
    NetworkSpec spec = fixture::residual_net();
    auto groups = build_groups(spec);
    const ChannelGroup* g = group_with(spec, groups, "stem.bn");
    REQUIRE(g);
    CHECK(member_names(spec, *g) == std::set<std::string>{"stem.bn", "b1.conv2.bn"});
    CHECK(group_with(spec, groups, "b1.conv1.bn")->members.size() == 1);
    CHECK(member_names(spec, *group_with(spec, groups, "b2.shortcut.bn")) ==
          std::set<std::string>{"b2.conv2.bn", "b2.shortcut.bn"});
    // ordered by smallest member id
    for (std::size_t i = 1; i < groups.size(); ++i) CHECK(groups[i - 1].members[0] < groups[i].members[0]);
  }
  SUBCASE("stacked identity blocks share one group") {
    SpecBuilder b({3, 8, 8, 3});
    int x = b.conv_bn_relu(b.input(), 4, 3, 1, "stem");
    for (int k = 0; k < 2; ++k) {
      const std::string n = "b" + std::to_string(k);
      int h = b.conv_bn_relu(x, 4, 3, 1, n + ".conv1");
      int bn = b.batchnorm(b.conv(h, 4, 3, 1, n + ".conv2"), n + ".conv2.bn");
      x = b.relu(b.add(bn, x, n + ".add"), n + ".relu");
    }
    b.pool_and_linear(x);
    NetworkSpec spec = b.build();
    auto groups = build_groups(spec);
    CHECK(member_names(spec, *group_with(spec, groups, "stem.bn")) ==
          std::set<std::string>{"stem.bn", "b0.conv2.bn", "b1.conv2.bn"});
    CHECK(groups.size() == 3);
  }
  SUBCASE("resnet8 groups") {
    NetworkSpec spec = resnet8_spec();
    auto groups = build_groups(spec);
    CHECK(groups.size() == 6);  // 3 block-output groups + 3 interior singletons
    CHECK(member_names(spec, *group_with(spec, groups, "stem.bn")) ==
          std::set<std::string>{"stem.bn", "stage1.conv2.bn"});
  }
}

TEST_CASE("forward") {
  std::mt19937_64 rng(3);
  Model model(fixture::residual_net());
  fixture::randomize(model, 5);
  Tensor x = oracle::random_tensor<float>({4, 3, 8, 8}, rng);
  SUBCASE("deterministic") {
    auto a = forward(model, x, BnMode::BatchStats).logits;
    auto b = forward(model, x, BnMode::BatchStats).logits;
    CHECK(a == b);
  }
  SUBCASE("group mask multiplies gamma") {
    std::uniform_real_distribution<float> d(0.2f, 1.8f);
    for (auto& m : model.group_mask)
      for (auto& v : m) v = d(rng);
    auto masked = forward(model, x, BnMode::FrozenStats).logits;
    Model folded = model;
    for (std::size_t g = 0; g < folded.groups.size(); ++g)
      for (int id : folded.groups[g].members)
        for (std::size_t c = 0; c < folded.groups[g].channels; ++c) folded.bn.at(id).gamma[c] *= folded.group_mask[g][c];
    for (auto& m : folded.group_mask) std::fill(m.begin(), m.end(), 1.0f);
    CHECK(fixture::max_abs_diff(masked, forward(folded, x, BnMode::FrozenStats).logits) < 1e-5);
  }
  SUBCASE("wrong input shape") { CHECK_THROWS_AS(forward(model, Tensor({1, 2, 8, 8}), BnMode::BatchStats), DimensionError); }
}

TEST_CASE("backward") {
  std::mt19937_64 rng(9);
  ModelD model(fixture::residual_net());
  fixture::randomize(model, 7);
  TensorD x = oracle::random_tensor<double>({4, 3, 8, 8}, rng);
  auto labels = fixture::random_labels<double>(4, 3, rng);

  SUBCASE("nothing trainable gives no gradients") {
    model.trainable = Trainable::none();
    auto fw = forward(model, x, BnMode::BatchStats, labels);
    CHECK(backward(model, fw.tape, fw.grad_logits).empty());
  }
  SUBCASE("frozen filters: only bn, masks and head") {
    model.trainable = Trainable::frozen_weights();
    auto fw = forward(model, x, BnMode::FrozenStats, labels);
    auto g = backward(model, fw.tape, fw.grad_logits);
    CHECK(g.conv_weights.empty());
    CHECK(g.gamma.size() == model.bn.size());
    CHECK(g.beta.size() == model.bn.size());
    CHECK(g.group_mask.size() == model.groups.size());
    CHECK(g.head_weights.has_value());
    for (const auto& c : fixture::gradient_check(model, x, labels, BnMode::FrozenStats)) {
      INFO(c.name);
      CHECK(c.rel_error < 1e-4);
    }
  }
  SUBCASE("full mode, batch statistics") {
    model.trainable = Trainable::all();
    auto fw = forward(model, x, BnMode::BatchStats, labels);
    auto g = backward(model, fw.tape, fw.grad_logits);
    CHECK(g.conv_weights.size() == model.conv_weights.size());
    CHECK(g.group_mask.empty());
    for (const auto& c : fixture::gradient_check(model, x, labels, BnMode::BatchStats)) {
      INFO(c.name);
      CHECK(c.rel_error < 1e-4);
    }
  }
  SUBCASE("stale tape") {
    auto fw = forward(model, x, BnMode::BatchStats, labels);
    model.mark_modified();
    CHECK_THROWS_AS(backward(model, fw.tape, fw.grad_logits), UsageError);
    ModelD other = model;
    auto fw2 = forward(model, x, BnMode::BatchStats, labels);
    CHECK_THROWS_AS(backward(other, fw2.tape, fw2.grad_logits), UsageError);
  }
}

TEST_CASE("apply_mask") {
  Model model(fixture::residual_net());
  fixture::randomize(model, 2);
  SUBCASE("all-keep mask leaves the model unchanged") {
    Model copy = model;
    apply_mask(copy, PruneMask::all_keep(copy.groups));
    CHECK(copy.bn == model.bn);
    CHECK(copy.group_mask == model.group_mask);
  }
  SUBCASE("singleton channel") {
    const NetworkSpec& spec = model.spec();
    const ChannelGroup* g = group_with(spec, model.groups, "b1.conv1.bn");
    PruneMask mask = PruneMask::all_keep(model.groups);
    mask.keep[static_cast<std::size_t>(g->id)][3] = false;
    Model before = model;
    apply_mask(model, mask);
    const int id = g->members[0];
    CHECK(model.bn.at(id).gamma[3] == 0.0f);
    CHECK(model.bn.at(id).beta[3] == 0.0f);
    CHECK_FALSE(model.groups[static_cast<std::size_t>(g->id)].kept[3]);
    for (const auto& [other, p] : model.bn) {
      if (other != id) CHECK(p == before.bn.at(other));
    }
  }
  SUBCASE("residual group channel 0 in both members") {
    const ChannelGroup* g = group_with(model.spec(), model.groups, "stem.bn");
    PruneMask mask = PruneMask::all_keep(model.groups);
    mask.keep[static_cast<std::size_t>(g->id)][0] = false;
    apply_mask(model, mask);
    for (int id : g->members) {
      CHECK(model.bn.at(id).gamma[0] == 0.0f);
      CHECK(model.bn.at(id).beta[0] == 0.0f);
    }
    CHECK(model.group_mask[static_cast<std::size_t>(g->id)][0] == 0.0f);
  }
  SUBCASE("pruning a whole group is a budget error") {
    PruneMask mask = PruneMask::all_keep(model.groups);
    std::fill(mask.keep[0].begin(), mask.keep[0].end(), false);
    CHECK_THROWS_AS(apply_mask(model, mask), BudgetError);
    CHECK_THROWS_AS(materialize(model, mask), BudgetError);
  }
  SUBCASE("masks accumulate and keep groups consistent") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 3; ++i) {
      PruneMask mask = PruneMask::all_keep(model.groups);
      for (std::size_t g = 0; g < mask.keep.size(); ++g) {
        if (model.groups[g].kept_count() > 1) {
          for (std::size_t c = 0; c < model.groups[g].channels; ++c) {
            if (model.groups[g].kept[c]) {
              mask.keep[g][c] = false;
              break;
            }
          }
        }
      }
      apply_mask(model, mask);
    }
    for (const auto& g : model.groups) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        for (int id : g.members) {
          CHECK((model.bn.at(id).gamma[c] == 0.0f) == !g.kept[c]);
          CHECK((model.bn.at(id).beta[c] == 0.0f || g.kept[c]));
        }
      }
    }
  }
}

TEST_CASE("materialize") {
  std::mt19937_64 rng(21);
  SUBCASE("all-keep is structurally identical and bit-identical") {
    Model model(resnet8_spec({3, 16, 16, 10}));
    fixture::randomize(model, 3);
    Model m = materialize(model, PruneMask::all_keep(model.groups));
    CHECK(m.spec() == model.spec());
    Tensor x = oracle::random_tensor<float>({2, 3, 16, 16}, rng);
    CHECK(forward(m, x, BnMode::FrozenStats).logits == forward(model, x, BnMode::FrozenStats).logits);
  }
  SUBCASE("one of eight channels mid-chain") {
    Model model(fixture::two_conv_net(8, 5));
    fixture::randomize(model, 8);
    PruneMask mask = PruneMask::all_keep(model.groups);
    mask.keep[0][5] = false;
    Model m = materialize(model, mask);
    Model masked = model;
    apply_mask(masked, mask);
    int conv2 = 0;
    for (const auto& l : model.spec().layers) {
      if (l.name == "conv2") conv2 = l.id;
    }
    CHECK(m.conv_weights.at(conv2).shape() == Shape{5, 7, 3, 3});
    Tensor x = oracle::random_tensor<float>({3, 3, 8, 8}, rng);
    CHECK(fixture::max_abs_diff(forward(m, x, BnMode::FrozenStats).logits,
                                forward(masked, x, BnMode::FrozenStats).logits) < 1e-5);
  }
  SUBCASE("residual group shrinks every member and the add") {
    Model model(fixture::residual_net());
    fixture::randomize(model, 9);
    const ChannelGroup* g = group_with(model.spec(), model.groups, "b2.shortcut.bn");
    PruneMask mask = PruneMask::all_keep(model.groups);
    mask.keep[static_cast<std::size_t>(g->id)][1] = false;
    mask.keep[static_cast<std::size_t>(g->id)][4] = false;
    Model m = materialize(model, mask);
    for (int id : g->members) CHECK(m.bn.at(id).channels() == 4);
    const Topology& topo = m.topology();
    for (const auto& l : m.spec().layers) {
      if (l.name == "b2.add") CHECK(topo.shapes[topo.at(l.id)].channels == 4);
    }
    CHECK(m.head_weights.dim(1) == 4);
    CHECK(validate(m.spec()).empty());
  }
  SUBCASE("random masks on resnet8 agree with the masked model") {
    Model model(resnet8_spec({3, 16, 16, 10}));
    fixture::randomize(model, 12);
    Tensor x = oracle::random_tensor<float>({2, 3, 16, 16}, rng);
    for (int trial = 0; trial < 5; ++trial) {
      PruneMask mask = random_mask(model.groups, rng);
      Model masked = model;
      apply_mask(masked, mask);
      Model m = materialize(model, mask);
      CHECK(fixture::max_abs_diff(forward(m, x, BnMode::FrozenStats).logits,
                                  forward(masked, x, BnMode::FrozenStats).logits) < 1e-5);
    }
  }
}

TEST_CASE("rescale_tau") {
  std::mt19937_64 rng(31);
  Model model(resnet8_spec({3, 16, 16, 10}));
  fixture::randomize(model, 4);
  Tensor x = oracle::random_tensor<float>({2, 3, 16, 16}, rng);
  SUBCASE("tau = 1 leaves the model unchanged") {
    Model m = model;
    rescale_tau(m, 1.0);
    CHECK(m.bn == model.bn);
    CHECK(m.head_weights == model.head_weights);
  }
  SUBCASE("tau = 2 with eps = 0 is exact") {
    for (auto& [id, p] : model.bn) p.eps = 0.0;
    Model m = model;
    rescale_tau(m, 2.0);
    CHECK(fixture::max_abs_diff(forward(m, x, BnMode::FrozenStats).logits,
                                forward(model, x, BnMode::FrozenStats).logits) < 1e-5);
  }
  SUBCASE("tau = 10 with eps = 1e-5 is close") {
    Model m = model;
    rescale_tau(m, 10.0);
    CHECK(fixture::max_abs_diff(forward(m, x, BnMode::FrozenStats).logits,
                                forward(model, x, BnMode::FrozenStats).logits) < 1e-3);
  }
  SUBCASE("non-positive tau") {
    CHECK_THROWS_AS(rescale_tau(model, 0.0), InputError);
    CHECK_THROWS_AS(rescale_tau(model, -1.0), InputError);
  }
}
