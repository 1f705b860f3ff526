#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcp/ops.hpp"
#include "gcp/tensor.hpp"

namespace gcp {

// ---------------------------------------------------------------------------
// Architecture description

enum class LayerKind { Input, Conv, BatchNorm, ReLU, Add, GlobalAvgPool, Linear };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  ConvGeometry geometry() const { return {stride, pad}; }
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct LayerSpec {
  int id = 0;
  LayerKind kind = LayerKind::Input;
  std::vector<int> inputs;
  ConvSpec conv;            // Conv only
  std::size_t classes = 0;  // Linear only
  std::string name;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::size_t input_channels = 0;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;

  const LayerSpec& layer(int id) const;
  LayerSpec& layer(int id);
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct ActivationShape {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;
};

// Everything derived from a valid spec: evaluation order, shapes, fan-out.
struct Topology {
  std::vector<std::size_t> order;  // indices into spec.layers
  std::map<int, std::size_t> index;
  std::vector<ActivationShape> shapes;
  std::vector<std::vector<int>> consumers;
  int input_id = 0;
  int output_id = 0;

  std::size_t at(int id) const { return index.at(id); }
};

// Empty result means the spec is valid. Checks ids and arity, acyclicity,
// shape propagation, the Conv-BN-(Add)-ReLU family rules and Add widths.
// With family_rules=false only graph structure and shapes are checked; the cost
// model uses that to price head-less fragments.
std::vector<std::string> validate(const NetworkSpec& spec, bool family_rules = true);

// Throws ConfigError listing every violated rule.
Topology analyze(const NetworkSpec& spec, bool family_rules = true);

// ---------------------------------------------------------------------------
// Channel groups

// BN layers whose channels must be pruned identically because their outputs
// meet at residual adds. Channel i of the group is channel i of every member.
struct ChannelGroup {
  int id = 0;
  std::vector<int> members;    // BatchNorm ids, ascending
  std::vector<int> producers;  // Conv ids that feed the members
  std::vector<int> consumers;  // Conv ids reading these channels, or the Linear id
  std::size_t channels = 0;
  std::vector<bool> kept;

  std::size_t kept_count() const;
  bool grouped() const { return members.size() > 1; }
};

std::vector<ChannelGroup> build_groups(const NetworkSpec& spec);

// Reverse lookups over a group list.
struct GroupIndex {
  std::map<int, int> by_bn;        // BN id -> group
  std::map<int, int> by_producer;  // Conv id -> group of its output channels
  std::map<int, int> by_consumer;  // Conv/Linear id -> group of its input channels

  explicit GroupIndex(const std::vector<ChannelGroup>& groups);
  std::optional<int> input_group(int layer_id) const;
};

struct PruneMask {
  std::vector<std::vector<bool>> keep;

  static PruneMask all_keep(const std::vector<ChannelGroup>& groups);
  std::size_t pruned_count() const;
};

// ---------------------------------------------------------------------------
// Model

// Which parameter sets backward produces gradients for.
struct Trainable {
  bool conv_weights = true;
  bool gamma = true;
  bool beta = true;
  bool group_mask = false;
  bool head = true;

  static Trainable all() { return {true, true, true, false, true}; }
  static Trainable none() { return {false, false, false, false, false}; }
  // Filters frozen; BN affine, shared group masks and head trainable.
  static Trainable frozen_weights() { return {false, true, true, true, true}; }
  bool any() const { return conv_weights || gamma || beta || group_mask || head; }
};

template <typename T>
class BasicModel {
 public:
  BasicModel() = default;
  explicit BasicModel(NetworkSpec spec, double bn_eps = 1e-5);

  const NetworkSpec& spec() const { return spec_; }
  const Topology& topology() const { return topology_; }
  const GroupIndex& group_index() const { return group_index_; }

  std::map<int, BasicTensor<T>> conv_weights;  // by Conv id
  std::map<int, BnParams<T>> bn;               // by BatchNorm id
  BasicTensor<T> head_weights;                 // (classes, features)
  std::vector<T> head_bias;
  std::vector<ChannelGroup> groups;
  std::vector<std::vector<T>> group_mask;  // shared scale per group channel
  Trainable trainable;
  // Set once the BN running statistics describe real data (training or a
  // calibration sweep); the frozen-statistics phases require it.
  bool statistics_calibrated = false;

  // Bumped by every mutation routed through the library; tapes record it.
  std::uint64_t version() const { return version_; }
  void mark_modified() { ++version_; }

  std::size_t classes() const { return head_weights.dim(0); }
  std::size_t conv_count() const { return conv_weights.size(); }

  // gamma * shared mask for one BN layer, the scale the forward pass applies.
  std::vector<T> effective_gamma(int bn_id) const;

  // Structural and shape consistency of the parameter store with the spec.
  void check() const;

  template <typename U>
  BasicModel<U> cast() const;

 private:
  template <typename U>
  friend class BasicModel;

  NetworkSpec spec_;
  Topology topology_;
  GroupIndex group_index_{std::vector<ChannelGroup>{}};
  std::uint64_t version_ = 0;
};

using Model = BasicModel<float>;
using ModelD = BasicModel<double>;

// He-uniform filters, unit gamma, zero beta, unit running variance, uniform head.
template <typename T>
void initialize_parameters(BasicModel<T>& model, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct Tape {
  const BasicModel<T>* model = nullptr;
  std::uint64_t version = 0;
  BnMode mode = BnMode::FrozenStats;
  std::vector<BasicTensor<T>> outputs;  // per layer index
  std::map<int, BnContext<T>> bn;       // per BatchNorm id
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;
  std::optional<double> loss;     // when labels were given
  BasicTensor<T> grad_logits;     // d loss / d logits when labels were given
  Tape<T> tape;                   // empty unless keep_tape
};

template <typename T>
ForwardResult<T> forward(const BasicModel<T>& model, const BasicTensor<T>& input, BnMode mode,
                         std::span<const int> labels = {}, bool keep_tape = true);

// Gradients only for parameter sets flagged in model.trainable.
template <typename T>
struct Gradients {
  std::map<int, BasicTensor<T>> conv_weights;
  std::map<int, std::vector<T>> gamma;
  std::map<int, std::vector<T>> beta;
  std::map<int, std::vector<T>> group_mask;  // by group id
  std::optional<BasicTensor<T>> head_weights;
  std::optional<std::vector<T>> head_bias;

  bool empty() const {
    return conv_weights.empty() && gamma.empty() && beta.empty() && group_mask.empty() && !head_weights &&
           !head_bias;
  }
};

// Throws UsageError when the tape came from another model or the model changed
// since the forward pass.
template <typename T>
Gradients<T> backward(const BasicModel<T>& model, const Tape<T>& tape, const BasicTensor<T>& grad_logits);

// ---------------------------------------------------------------------------
// Pruning surgery

// Prunes every channel whose keep flag is false: gamma, beta and the shared
// mask go to zero at all member sites. Channels already pruned stay pruned.
// Throws BudgetError if a group would lose its last channel.
template <typename T>
void apply_mask(BasicModel<T>& model, const PruneMask& mask);

// Spec with every group narrowed to its kept width. Layer ids are preserved.
NetworkSpec shrink_spec(const NetworkSpec& spec, const std::vector<ChannelGroup>& groups,
                        const std::vector<std::vector<bool>>& keep);

// Physically removes masked channels (after applying the mask to a copy).
template <typename T>
BasicModel<T> materialize(const BasicModel<T>& model, const PruneMask& mask);

// Scales every BN's gamma/beta by tau, the statistics of every BN that sees
// scaled activations by (tau, tau^2), and the head weights by 1/tau. Network
// function in FrozenStats mode is unchanged when eps = 0.
template <typename T>
void rescale_tau(BasicModel<T>& model, double tau);

}  // namespace gcp
