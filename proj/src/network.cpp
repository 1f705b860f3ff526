#include "gcp/network.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace gcp {

// ---------------------------------------------------------------------------
// Spec helpers

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Add: return "add";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::Linear: return "linear";
  }
  return "unknown";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (LayerKind kind : {LayerKind::Input, LayerKind::Conv, LayerKind::BatchNorm, LayerKind::ReLU, LayerKind::Add,
                         LayerKind::GlobalAvgPool, LayerKind::Linear}) {
    if (name == layer_kind_name(kind)) return kind;
  }
  throw ConfigError("unknown layer kind '" + name + "'");
}

const LayerSpec& NetworkSpec::layer(int id) const {
  for (const auto& l : layers) {
    if (l.id == id) return l;
  }
  throw ConfigError("no layer with id " + std::to_string(id));
}

LayerSpec& NetworkSpec::layer(int id) {
  for (auto& l : layers) {
    if (l.id == id) return l;
  }
  throw ConfigError("no layer with id " + std::to_string(id));
}

namespace {

std::size_t expected_arity(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return 0;
    case LayerKind::Add: return 2;
    default: return 1;
  }
}

std::string describe(const LayerSpec& l) {
  std::string out = std::string(layer_kind_name(l.kind)) + " #" + std::to_string(l.id);
  if (!l.name.empty()) out += " (" + l.name + ")";
  return out;
}

// Structure, order and shapes. Family rules are layered on top by validate().
struct Analysis {
  Topology topo;
  std::vector<std::string> errors;
  bool shapes_ok = false;
};

Analysis analyze_structure(const NetworkSpec& spec) {
  Analysis a;
  Topology& t = a.topo;
  const std::size_t count = spec.layers.size();
  if (count == 0) {
    a.errors.push_back("network has no layers");
    return a;
  }
  if (spec.input_channels == 0 || spec.input_height == 0 || spec.input_width == 0) {
    a.errors.push_back("input extents must be positive");
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (!t.index.emplace(spec.layers[i].id, i).second) {
      a.errors.push_back("duplicate layer id " + std::to_string(spec.layers[i].id));
    }
  }
  int inputs_seen = 0;
  for (const auto& l : spec.layers) {
    if (l.inputs.size() != expected_arity(l.kind)) {
      a.errors.push_back(describe(l) + " expects " + std::to_string(expected_arity(l.kind)) + " inputs, has " +
                         std::to_string(l.inputs.size()));
    }
    for (int in : l.inputs) {
      if (!t.index.count(in)) a.errors.push_back(describe(l) + " reads unknown layer " + std::to_string(in));
    }
    if (l.kind == LayerKind::Input) {
      ++inputs_seen;
      t.input_id = l.id;
    }
  }
  if (inputs_seen != 1) a.errors.push_back("network needs exactly one input node, found " + std::to_string(inputs_seen));
  if (!a.errors.empty()) return a;

  t.consumers.assign(count, {});
  std::vector<std::size_t> indegree(count, 0);
  for (std::size_t i = 0; i < count; ++i) {
    for (int in : spec.layers[i].inputs) {
      t.consumers[t.index.at(in)].push_back(spec.layers[i].id);
      ++indegree[i];
    }
  }
  // Kahn's algorithm, smallest id first for a deterministic order.
  std::set<std::pair<int, std::size_t>> ready;
  for (std::size_t i = 0; i < count; ++i) {
    if (indegree[i] == 0) ready.emplace(spec.layers[i].id, i);
  }
  while (!ready.empty()) {
    auto [id, i] = *ready.begin();
    ready.erase(ready.begin());
    t.order.push_back(i);
    for (int consumer : t.consumers[i]) {
      std::size_t ci = t.index.at(consumer);
      if (--indegree[ci] == 0) ready.emplace(consumer, ci);
    }
  }
  if (t.order.size() != count) {
    a.errors.push_back("graph contains a cycle");
    return a;
  }

  t.shapes.assign(count, {});
  bool ok = true;
  for (std::size_t i : t.order) {
    const LayerSpec& l = spec.layers[i];
    auto in_shape = [&](std::size_t k) { return t.shapes[t.index.at(l.inputs[k])]; };
    ActivationShape& out = t.shapes[i];
    switch (l.kind) {
      case LayerKind::Input:
        out = {spec.input_channels, spec.input_height, spec.input_width};
        break;
      case LayerKind::Conv: {
        ActivationShape in = in_shape(0);
        const ConvSpec& c = l.conv;
        if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
          a.errors.push_back(describe(l) + " needs positive out_channels, kernel and stride");
          ok = false;
          break;
        }
        if (c.in_channels != in.channels) {
          a.errors.push_back(describe(l) + " declares " + std::to_string(c.in_channels) + " input channels but receives " +
                             std::to_string(in.channels));
          ok = false;
        }
        if (in.height + 2 * c.pad < c.kernel || in.width + 2 * c.pad < c.kernel) {
          a.errors.push_back(describe(l) + " has a non-positive output size");
          ok = false;
          break;
        }
        out = {c.out_channels, (in.height + 2 * c.pad - c.kernel) / c.stride + 1,
               (in.width + 2 * c.pad - c.kernel) / c.stride + 1};
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
        out = in_shape(0);
        break;
      case LayerKind::Add: {
        ActivationShape lhs = in_shape(0), rhs = in_shape(1);
        if (lhs.channels != rhs.channels) {
          a.errors.push_back(describe(l) + ": channel mismatch between inputs (" + std::to_string(lhs.channels) +
                             " vs " + std::to_string(rhs.channels) + ")");
          ok = false;
        } else if (lhs.height != rhs.height || lhs.width != rhs.width) {
          a.errors.push_back(describe(l) + ": spatial mismatch between inputs");
          ok = false;
        }
        out = lhs;
        break;
      }
      case LayerKind::GlobalAvgPool:
        out = {in_shape(0).channels, 1, 1};
        break;
      case LayerKind::Linear:
        if (l.classes == 0) {
          a.errors.push_back(describe(l) + " needs a positive class count");
          ok = false;
        }
        out = {l.classes, 1, 1};
        break;
    }
  }
  a.shapes_ok = ok;
  return a;
}

void check_family(const NetworkSpec& spec, Analysis& a) {
  const Topology& t = a.topo;
  auto kind_of = [&](int id) { return spec.layers[t.index.at(id)].kind; };
  int linear_count = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const auto& outs = t.consumers[i];
    auto consumer_is = [&](std::initializer_list<LayerKind> kinds) {
      return std::all_of(outs.begin(), outs.end(), [&](int c) {
        return std::find(kinds.begin(), kinds.end(), kind_of(c)) != kinds.end();
      });
    };
    switch (l.kind) {
      case LayerKind::Input:
        if (outs.empty() || !consumer_is({LayerKind::Conv})) {
          a.errors.push_back("input must feed convolutions only");
        }
        break;
      case LayerKind::Conv:
        if (outs.size() != 1 || kind_of(outs[0]) != LayerKind::BatchNorm) {
          a.errors.push_back(describe(l) + " must be followed by exactly one batchnorm");
        }
        if (kind_of(l.inputs[0]) != LayerKind::Input && kind_of(l.inputs[0]) != LayerKind::ReLU) {
          a.errors.push_back(describe(l) + " must read the network input or a relu");
        }
        break;
      case LayerKind::BatchNorm:
        if (kind_of(l.inputs[0]) != LayerKind::Conv) a.errors.push_back(describe(l) + " must follow a convolution");
        if (outs.size() != 1 || !consumer_is({LayerKind::ReLU, LayerKind::Add})) {
          a.errors.push_back(describe(l) + " must feed exactly one relu or add");
        }
        break;
      case LayerKind::Add:
        for (int in : l.inputs) {
          if (kind_of(in) != LayerKind::BatchNorm && kind_of(in) != LayerKind::ReLU) {
            a.errors.push_back(describe(l) + " inputs must be batchnorm or relu outputs");
          }
        }
        if (outs.size() != 1 || kind_of(outs[0]) != LayerKind::ReLU) {
          a.errors.push_back(describe(l) + " must be followed by exactly one relu");
        }
        break;
      case LayerKind::ReLU:
        if (kind_of(l.inputs[0]) != LayerKind::BatchNorm && kind_of(l.inputs[0]) != LayerKind::Add) {
          a.errors.push_back(describe(l) + " must follow a batchnorm or add");
        }
        if (outs.empty() || !consumer_is({LayerKind::Conv, LayerKind::Add, LayerKind::GlobalAvgPool})) {
          a.errors.push_back(describe(l) + " must feed convolutions, adds or the pool");
        }
        break;
      case LayerKind::GlobalAvgPool:
        if (kind_of(l.inputs[0]) != LayerKind::ReLU) a.errors.push_back(describe(l) + " must follow a relu");
        if (outs.size() != 1 || kind_of(outs[0]) != LayerKind::Linear) {
          a.errors.push_back(describe(l) + " must feed exactly one linear layer");
        }
        break;
      case LayerKind::Linear:
        ++linear_count;
        a.topo.output_id = l.id;
        if (kind_of(l.inputs[0]) != LayerKind::GlobalAvgPool) {
          a.errors.push_back(describe(l) + " must follow the global average pool");
        }
        if (!outs.empty()) a.errors.push_back(describe(l) + " must be the network output");
        break;
    }
  }
  if (linear_count != 1) {
    a.errors.push_back("network needs exactly one linear output, found " + std::to_string(linear_count));
  }
}

}  // namespace

std::vector<std::string> validate(const NetworkSpec& spec, bool family_rules) {
  Analysis a = analyze_structure(spec);
  if (a.errors.empty() && family_rules) check_family(spec, a);
  return a.errors;
}

Topology analyze(const NetworkSpec& spec, bool family_rules) {
  Analysis a = analyze_structure(spec);
  if (a.errors.empty() && family_rules) check_family(spec, a);
  if (!a.errors.empty()) {
    std::ostringstream msg;
    msg << "invalid network:";
    for (const auto& e : a.errors) msg << "\n  - " << e;
    throw ConfigError(msg.str());
  }
  if (!family_rules) {
    // Head-less fragments: the last node in order stands in for the output.
    a.topo.output_id = spec.layers[a.topo.order.back()].id;
  }
  return std::move(a.topo);
}

// ---------------------------------------------------------------------------
// Groups

std::size_t ChannelGroup::kept_count() const {
  return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
}

namespace {

// BatchNorm layers whose channels reach `id` through relu/add only.
void trace_sources(const NetworkSpec& spec, int id, std::set<int>& out) {
  const LayerSpec& l = spec.layer(id);
  switch (l.kind) {
    case LayerKind::BatchNorm: out.insert(id); break;
    case LayerKind::ReLU:
    case LayerKind::GlobalAvgPool: trace_sources(spec, l.inputs[0], out); break;
    case LayerKind::Add:
      trace_sources(spec, l.inputs[0], out);
      trace_sources(spec, l.inputs[1], out);
      break;
    default: break;
  }
}

struct UnionFind {
  std::map<int, int> parent;
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

std::vector<ChannelGroup> build_groups(const NetworkSpec& spec) {
  Topology topo = analyze(spec);
  UnionFind uf;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::BatchNorm) uf.parent[l.id] = l.id;
  }
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::Add) continue;
    std::set<int> sources;
    trace_sources(spec, l.id, sources);
    for (int s : sources) uf.unite(*sources.begin(), s);
  }
  std::map<int, std::vector<int>> classes;  // root (smallest id) -> members
  for (auto& [id, _] : uf.parent) classes[uf.find(id)].push_back(id);

  std::vector<ChannelGroup> groups;
  std::map<int, int> group_of;
  for (auto& [root, members] : classes) {
    ChannelGroup g;
    g.id = static_cast<int>(groups.size());
    g.members = members;
    for (int m : members) {
      group_of[m] = g.id;
      g.producers.push_back(spec.layer(m).inputs[0]);
    }
    std::sort(g.producers.begin(), g.producers.end());
    g.channels = topo.shapes[topo.at(members.front())].channels;
    g.kept.assign(g.channels, true);
    groups.push_back(std::move(g));
  }
  for (const auto& l : spec.layers) {
    int source = 0;
    if (l.kind == LayerKind::Conv) {
      source = l.inputs[0];
    } else if (l.kind == LayerKind::Linear) {
      source = l.inputs[0];
    } else {
      continue;
    }
    std::set<int> sources;
    trace_sources(spec, source, sources);
    if (sources.empty()) continue;  // reads the network input
    groups[group_of.at(*sources.begin())].consumers.push_back(l.id);
  }
  for (auto& g : groups) std::sort(g.consumers.begin(), g.consumers.end());
  return groups;
}

GroupIndex::GroupIndex(const std::vector<ChannelGroup>& groups) {
  for (const auto& g : groups) {
    for (int m : g.members) by_bn[m] = g.id;
    for (int p : g.producers) by_producer[p] = g.id;
    for (int c : g.consumers) by_consumer[c] = g.id;
  }
}

std::optional<int> GroupIndex::input_group(int layer_id) const {
  auto it = by_consumer.find(layer_id);
  if (it == by_consumer.end()) return std::nullopt;
  return it->second;
}

PruneMask PruneMask::all_keep(const std::vector<ChannelGroup>& groups) {
  PruneMask mask;
  for (const auto& g : groups) mask.keep.emplace_back(g.channels, true);
  return mask;
}

std::size_t PruneMask::pruned_count() const {
  std::size_t n = 0;
  for (const auto& k : keep) n += static_cast<std::size_t>(std::count(k.begin(), k.end(), false));
  return n;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
BasicModel<T>::BasicModel(NetworkSpec spec, double bn_eps) : spec_(std::move(spec)) {
  topology_ = analyze(spec_);
  groups = build_groups(spec_);
  group_index_ = GroupIndex(groups);
  for (const auto& l : spec_.layers) {
    const std::size_t i = topology_.at(l.id);
    if (l.kind == LayerKind::Conv) {
      conv_weights.emplace(l.id, BasicTensor<T>({l.conv.out_channels, l.conv.in_channels, l.conv.kernel, l.conv.kernel}));
    } else if (l.kind == LayerKind::BatchNorm) {
      bn.emplace(l.id, BnParams<T>(topology_.shapes[i].channels, bn_eps));
    } else if (l.kind == LayerKind::Linear) {
      const std::size_t features = topology_.shapes[topology_.at(l.inputs[0])].channels;
      head_weights = BasicTensor<T>({l.classes, features});
      head_bias.assign(l.classes, T{0});
    }
  }
  for (const auto& g : groups) group_mask.emplace_back(g.channels, T{1});
}

template <typename T>
std::vector<T> BasicModel<T>::effective_gamma(int bn_id) const {
  std::vector<T> g = bn.at(bn_id).gamma;
  const auto& mask = group_mask.at(static_cast<std::size_t>(group_index_.by_bn.at(bn_id)));
  for (std::size_t c = 0; c < g.size(); ++c) g[c] *= mask[c];
  return g;
}

template <typename T>
void BasicModel<T>::check() const {
  for (const auto& l : spec_.layers) {
    const ActivationShape& s = topology_.shapes[topology_.at(l.id)];
    if (l.kind == LayerKind::Conv) {
      const Shape expected{l.conv.out_channels, l.conv.in_channels, l.conv.kernel, l.conv.kernel};
      if (conv_weights.at(l.id).shape() != expected) {
        throw DimensionError("conv #" + std::to_string(l.id) + " weights " +
                             shape_str(conv_weights.at(l.id).shape()) + " expected " + shape_str(expected));
      }
    } else if (l.kind == LayerKind::BatchNorm) {
      const auto& p = bn.at(l.id);
      p.check();
      if (p.channels() != s.channels) throw DimensionError("batchnorm #" + std::to_string(l.id) + " width mismatch");
    }
  }
  if (groups.size() != group_mask.size()) throw DimensionError("group mask count mismatch");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (group_mask[g].size() != groups[g].channels || groups[g].kept.size() != groups[g].channels) {
      throw DimensionError("group " + std::to_string(g) + " state width mismatch");
    }
  }
  if (head_bias.size() != head_weights.dim(0)) throw DimensionError("head bias width mismatch");
}

template <typename T>
template <typename U>
BasicModel<U> BasicModel<T>::cast() const {
  BasicModel<U> out;
  out.spec_ = spec_;
  out.topology_ = topology_;
  out.group_index_ = group_index_;
  for (const auto& [id, w] : conv_weights) out.conv_weights.emplace(id, w.template cast<U>());
  for (const auto& [id, p] : bn) {
    BnParams<U> q;
    q.gamma.assign(p.gamma.begin(), p.gamma.end());
    q.beta.assign(p.beta.begin(), p.beta.end());
    q.running_mean.assign(p.running_mean.begin(), p.running_mean.end());
    q.running_var.assign(p.running_var.begin(), p.running_var.end());
    q.eps = p.eps;
    out.bn.emplace(id, std::move(q));
  }
  out.head_weights = head_weights.template cast<U>();
  out.head_bias.assign(head_bias.begin(), head_bias.end());
  out.groups = groups;
  for (const auto& m : group_mask) out.group_mask.emplace_back(m.begin(), m.end());
  out.trainable = trainable;
  out.statistics_calibrated = statistics_calibrated;
  return out;
}

template <typename T>
void initialize_parameters(BasicModel<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [id, w] : model.conv_weights) {
    const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
    std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  }
  for (auto& [id, p] : model.bn) {
    std::fill(p.gamma.begin(), p.gamma.end(), T{1});
    std::fill(p.beta.begin(), p.beta.end(), T{0});
    std::fill(p.running_mean.begin(), p.running_mean.end(), T{0});
    std::fill(p.running_var.begin(), p.running_var.end(), T{1});
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(model.head_weights.dim(1)));
  std::uniform_real_distribution<double> head(-bound, bound);
  for (auto& v : model.head_weights.data()) v = static_cast<T>(head(rng));
  std::fill(model.head_bias.begin(), model.head_bias.end(), T{0});
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    model.groups[g].kept.assign(model.groups[g].channels, true);
    model.group_mask[g].assign(model.groups[g].channels, T{1});
  }
  model.mark_modified();
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
ForwardResult<T> forward(const BasicModel<T>& model, const BasicTensor<T>& input, BnMode mode,
                         std::span<const int> labels, bool keep_tape) {
  const NetworkSpec& spec = model.spec();
  const Topology& topo = model.topology();
  if (input.rank() != 4 || input.dim(1) != spec.input_channels || input.dim(2) != spec.input_height ||
      input.dim(3) != spec.input_width) {
    throw DimensionError("network input " + shape_str(input.shape()) + " expected [N, " +
                         std::to_string(spec.input_channels) + ", " + std::to_string(spec.input_height) + ", " +
                         std::to_string(spec.input_width) + "]");
  }
  ForwardResult<T> result;
  Tape<T>& tape = result.tape;
  tape.model = &model;
  tape.version = model.version();
  tape.mode = mode;
  tape.outputs.assign(spec.layers.size(), {});
  std::vector<std::size_t> pending(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) pending[i] = topo.consumers[i].size();

  auto release_inputs = [&](const LayerSpec& l) {
    if (keep_tape) return;
    for (int in : l.inputs) {
      std::size_t k = topo.at(in);
      if (--pending[k] == 0) tape.outputs[k] = BasicTensor<T>();
    }
  };

  for (std::size_t i : topo.order) {
    const LayerSpec& l = spec.layers[i];
    auto in = [&](std::size_t k) -> const BasicTensor<T>& { return tape.outputs[topo.at(l.inputs[k])]; };
    BasicTensor<T> out;
    switch (l.kind) {
      case LayerKind::Input: out = input; break;
      case LayerKind::Conv: out = conv2d_forward(in(0), model.conv_weights.at(l.id), l.conv.geometry()); break;
      case LayerKind::BatchNorm: {
        const BnParams<T>& p = model.bn.at(l.id);
        std::vector<T> gamma = model.effective_gamma(l.id);
        BnForward<T> bnf = batchnorm_forward<T>(in(0), gamma, p.beta, p.running_mean, p.running_var, p.eps, mode);
        out = std::move(bnf.output);
        if (keep_tape) {
          tape.bn.emplace(l.id, std::move(bnf.context));
        } else if (mode == BnMode::BatchStats) {
          BnContext<T> stats;
          stats.mode = mode;
          stats.batch_mean = std::move(bnf.context.batch_mean);
          stats.batch_var = std::move(bnf.context.batch_var);
          tape.bn.emplace(l.id, std::move(stats));
        }
        break;
      }
      case LayerKind::ReLU: out = relu_forward(in(0)); break;
      case LayerKind::Add: {
        out = in(0);
        const BasicTensor<T>& rhs = in(1);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += rhs[k];
        break;
      }
      case LayerKind::GlobalAvgPool: out = global_avg_pool_forward(in(0)); break;
      case LayerKind::Linear: out = linear_forward<T>(in(0), model.head_weights, model.head_bias); break;
    }
    tape.outputs[i] = std::move(out);
    release_inputs(l);
  }
  result.logits = tape.outputs[topo.at(topo.output_id)];
  if (!labels.empty()) {
    LossAndGrad<T> ce = softmax_cross_entropy(result.logits, labels);
    result.loss = ce.loss;
    result.grad_logits = std::move(ce.grad_logits);
  }
  if (!keep_tape) tape.outputs.clear();
  return result;
}

template <typename T>
Gradients<T> backward(const BasicModel<T>& model, const Tape<T>& tape, const BasicTensor<T>& grad_logits) {
  if (tape.model != &model || tape.version != model.version()) {
    throw UsageError("stale tape: model changed or tape belongs to another model");
  }
  if (tape.outputs.empty()) throw UsageError("tape was recorded without keep_tape");
  Gradients<T> grads;
  const Trainable& flags = model.trainable;
  if (!flags.any()) return grads;

  const NetworkSpec& spec = model.spec();
  const Topology& topo = model.topology();
  const GroupIndex& gi = model.group_index();
  std::vector<BasicTensor<T>> grad_out(spec.layers.size());
  auto accumulate = [&](int id, BasicTensor<T>&& g) {
    BasicTensor<T>& slot = grad_out[topo.at(id)];
    if (slot.empty()) {
      slot = std::move(g);
    } else {
      for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += g[k];
    }
  };
  grad_out[topo.at(topo.output_id)] = grad_logits;

  // A layer needs an input gradient only if something trainable sits upstream.
  std::vector<bool> upstream_trainable(spec.layers.size(), false);
  for (std::size_t i : topo.order) {
    const LayerSpec& l = spec.layers[i];
    bool here = (l.kind == LayerKind::Conv && flags.conv_weights) ||
                (l.kind == LayerKind::BatchNorm && (flags.gamma || flags.beta || flags.group_mask));
    for (int in : l.inputs) here = here || upstream_trainable[topo.at(in)];
    upstream_trainable[i] = here;
  }

  for (auto it = topo.order.rbegin(); it != topo.order.rend(); ++it) {
    const std::size_t i = *it;
    const LayerSpec& l = spec.layers[i];
    BasicTensor<T>& g = grad_out[i];
    if (g.empty() || l.kind == LayerKind::Input) continue;
    auto input_needs_grad = [&](std::size_t k) { return upstream_trainable[topo.at(l.inputs[k])]; };
    const BasicTensor<T>& in0 = tape.outputs[topo.at(l.inputs[0])];
    switch (l.kind) {
      case LayerKind::Linear: {
        LinearGrads<T> lg = linear_backward(in0, model.head_weights, g);
        if (flags.head) {
          grads.head_weights = std::move(lg.weights);
          grads.head_bias = std::move(lg.bias);
        }
        if (input_needs_grad(0)) accumulate(l.inputs[0], std::move(lg.features));
        break;
      }
      case LayerKind::GlobalAvgPool:
        if (input_needs_grad(0)) accumulate(l.inputs[0], global_avg_pool_backward(in0.shape(), g));
        break;
      case LayerKind::ReLU:
        if (input_needs_grad(0)) accumulate(l.inputs[0], relu_backward(in0, g));
        break;
      case LayerKind::Add:
        if (input_needs_grad(1)) accumulate(l.inputs[1], BasicTensor<T>(g));
        if (input_needs_grad(0)) accumulate(l.inputs[0], std::move(g));
        break;
      case LayerKind::BatchNorm: {
        BnGrads<T> bg = batchnorm_backward(tape.bn.at(l.id), g);
        const int group = gi.by_bn.at(l.id);
        const auto& mask = model.group_mask[static_cast<std::size_t>(group)];
        const auto& gamma = model.bn.at(l.id).gamma;
        if (flags.gamma) {
          std::vector<T> dg(bg.gamma.size());
          for (std::size_t c = 0; c < dg.size(); ++c) dg[c] = bg.gamma[c] * mask[c];
          grads.gamma.emplace(l.id, std::move(dg));
        }
        if (flags.group_mask) {
          auto [slot, fresh] = grads.group_mask.try_emplace(group, std::vector<T>(mask.size(), T{0}));
          for (std::size_t c = 0; c < mask.size(); ++c) slot->second[c] += bg.gamma[c] * gamma[c];
        }
        if (flags.beta) grads.beta.emplace(l.id, std::move(bg.beta));
        if (input_needs_grad(0)) accumulate(l.inputs[0], std::move(bg.input));
        break;
      }
      case LayerKind::Conv: {
        const bool want_input = input_needs_grad(0);
        ConvGrads<T> cg = conv2d_backward(in0, model.conv_weights.at(l.id), g, l.conv.geometry(), want_input,
                                          flags.conv_weights);
        if (flags.conv_weights) grads.conv_weights.emplace(l.id, std::move(cg.weights));
        if (want_input) accumulate(l.inputs[0], std::move(cg.input));
        break;
      }
      case LayerKind::Input: break;
    }
    g = BasicTensor<T>();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Pruning surgery

template <typename T>
void apply_mask(BasicModel<T>& model, const PruneMask& mask) {
  if (mask.keep.size() != model.groups.size()) {
    throw DimensionError("mask has " + std::to_string(mask.keep.size()) + " groups, model has " +
                         std::to_string(model.groups.size()));
  }
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    const ChannelGroup& group = model.groups[g];
    if (mask.keep[g].size() != group.channels) {
      throw DimensionError("mask for group " + std::to_string(g) + " has " + std::to_string(mask.keep[g].size()) +
                           " entries, group has " + std::to_string(group.channels) + " channels");
    }
    std::size_t survivors = 0;
    for (std::size_t c = 0; c < group.channels; ++c) survivors += (group.kept[c] && mask.keep[g][c]) ? 1 : 0;
    if (survivors == 0) {
      throw BudgetError("mask would prune every channel of group " + std::to_string(g));
    }
  }
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    ChannelGroup& group = model.groups[g];
    for (std::size_t c = 0; c < group.channels; ++c) {
      if (mask.keep[g][c] && group.kept[c]) continue;
      group.kept[c] = false;
      model.group_mask[g][c] = T{0};
      for (int m : group.members) {
        model.bn.at(m).gamma[c] = T{0};
        model.bn.at(m).beta[c] = T{0};
      }
    }
  }
  model.mark_modified();
}

NetworkSpec shrink_spec(const NetworkSpec& spec, const std::vector<ChannelGroup>& groups,
                        const std::vector<std::vector<bool>>& keep) {
  GroupIndex gi(groups);
  auto width = [&](int g) {
    const auto& k = keep.at(static_cast<std::size_t>(g));
    return static_cast<std::size_t>(std::count(k.begin(), k.end(), true));
  };
  NetworkSpec out = spec;
  for (auto& l : out.layers) {
    if (l.kind != LayerKind::Conv) continue;
    if (auto it = gi.by_producer.find(l.id); it != gi.by_producer.end()) l.conv.out_channels = width(it->second);
    if (auto g = gi.input_group(l.id)) l.conv.in_channels = width(*g);
  }
  return out;
}

template <typename T>
BasicModel<T> materialize(const BasicModel<T>& model, const PruneMask& mask) {
  BasicModel<T> masked = model;
  apply_mask(masked, mask);
  std::vector<std::vector<bool>> keep;
  for (const auto& g : masked.groups) keep.push_back(g.kept);
  std::vector<std::vector<std::size_t>> kept_idx;
  for (const auto& k : keep) {
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < k.size(); ++c) {
      if (k[c]) idx.push_back(c);
    }
    kept_idx.push_back(std::move(idx));
  }

  BasicModel<T> out(shrink_spec(model.spec(), masked.groups, keep));
  const GroupIndex& gi = masked.group_index();
  auto all_channels = [](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  };

  for (const auto& [id, w] : masked.conv_weights) {
    const auto& outs = kept_idx[static_cast<std::size_t>(gi.by_producer.at(id))];
    auto in_group = gi.input_group(id);
    const std::vector<std::size_t> ins = in_group ? kept_idx[static_cast<std::size_t>(*in_group)] : all_channels(w.dim(1));
    BasicTensor<T>& dst = out.conv_weights.at(id);
    const std::size_t kk = w.dim(2) * w.dim(3);
    for (std::size_t o = 0; o < outs.size(); ++o) {
      for (std::size_t i = 0; i < ins.size(); ++i) {
        const T* src = &w.at(outs[o], ins[i], 0, 0);
        std::copy(src, src + kk, &dst.at(o, i, 0, 0));
      }
    }
  }
  for (const auto& [id, p] : masked.bn) {
    const auto& idx = kept_idx[static_cast<std::size_t>(gi.by_bn.at(id))];
    BnParams<T>& q = out.bn.at(id);
    q.eps = p.eps;
    for (std::size_t c = 0; c < idx.size(); ++c) {
      q.gamma[c] = p.gamma[idx[c]];
      q.beta[c] = p.beta[idx[c]];
      q.running_mean[c] = p.running_mean[idx[c]];
      q.running_var[c] = p.running_var[idx[c]];
    }
  }
  const int linear_id = model.topology().output_id;
  auto head_group = gi.input_group(linear_id);
  const std::vector<std::size_t> features =
      head_group ? kept_idx[static_cast<std::size_t>(*head_group)] : all_channels(masked.head_weights.dim(1));
  for (std::size_t j = 0; j < masked.head_weights.dim(0); ++j) {
    for (std::size_t f = 0; f < features.size(); ++f) {
      out.head_weights[j * features.size() + f] = masked.head_weights[j * masked.head_weights.dim(1) + features[f]];
    }
  }
  out.head_bias = masked.head_bias;
  for (std::size_t g = 0; g < out.groups.size(); ++g) {
    const auto& idx = kept_idx[g];
    for (std::size_t c = 0; c < idx.size(); ++c) out.group_mask[g][c] = masked.group_mask[g][idx[c]];
  }
  out.trainable = model.trainable;
  out.statistics_calibrated = model.statistics_calibrated;
  out.check();
  return out;
}

template <typename T>
void rescale_tau(BasicModel<T>& model, double tau) {
  if (!(tau > 0.0)) throw InputError("tau must be positive, got " + std::to_string(tau));
  const NetworkSpec& spec = model.spec();
  const T t = static_cast<T>(tau);
  for (auto& [id, p] : model.bn) {
    for (auto& v : p.gamma) v *= t;
    for (auto& v : p.beta) v *= t;
    // Activations reaching this BN were produced by scaled BN outputs unless
    // its convolution reads the raw network input.
    const LayerSpec& conv = spec.layer(spec.layer(id).inputs[0]);
    if (spec.layer(conv.inputs[0]).kind == LayerKind::Input) continue;
    for (auto& v : p.running_mean) v *= t;
    for (auto& v : p.running_var) v *= t * t;
  }
  for (auto& v : model.head_weights.data()) v /= t;
  model.mark_modified();
}

#define GCP_INSTANTIATE_NETWORK(T)                                                                                 \
  template class BasicModel<T>;                                                                                    \
  template void initialize_parameters(BasicModel<T>&, std::uint64_t);                                              \
  template ForwardResult<T> forward(const BasicModel<T>&, const BasicTensor<T>&, BnMode, std::span<const int>,     \
                                    bool);                                                                         \
  template Gradients<T> backward(const BasicModel<T>&, const Tape<T>&, const BasicTensor<T>&);                     \
  template void apply_mask(BasicModel<T>&, const PruneMask&);                                                      \
  template BasicModel<T> materialize(const BasicModel<T>&, const PruneMask&);                                      \
  template void rescale_tau(BasicModel<T>&, double);

GCP_INSTANTIATE_NETWORK(float)
GCP_INSTANTIATE_NETWORK(double)
template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;
template BasicModel<float> BasicModel<float>::cast<float>() const;

#undef GCP_INSTANTIATE_NETWORK

}  // namespace gcp
