#include "gcp/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gcp {

// ---------------------------------------------------------------------------
// Latency table

void LatencyTable::set(int layer_id, std::size_t m, std::size_t n, double micros) {
  if (m == 0 || n == 0) throw InputError("latency grid widths must be positive");
  if (!(micros > 0.0) || !std::isfinite(micros)) {
    throw InputError("latency entries must be positive, layer " + std::to_string(layer_id));
  }
  Grid& g = layers_[layer_id];
  if (std::find(g.ms.begin(), g.ms.end(), m) == g.ms.end()) {
    g.ms.insert(std::upper_bound(g.ms.begin(), g.ms.end(), m), m);
  }
  if (std::find(g.ns.begin(), g.ns.end(), n) == g.ns.end()) {
    g.ns.insert(std::upper_bound(g.ns.begin(), g.ns.end(), n), n);
  }
  g.values[{m, n}] = micros;
}

namespace {

// Index i with axis[i] <= x <= axis[i+1] (i+1 clamped for a single node).
std::pair<std::size_t, double> bracket(const std::vector<std::size_t>& axis, double x) {
  if (axis.size() == 1) return {0, 0.0};
  auto hi = std::lower_bound(axis.begin(), axis.end(), x, [](std::size_t a, double v) { return a < v; });
  std::size_t j = static_cast<std::size_t>(hi - axis.begin());
  if (j == 0) return {0, 0.0};
  if (j >= axis.size()) j = axis.size() - 1;
  const double lo = static_cast<double>(axis[j - 1]), up = static_cast<double>(axis[j]);
  return {j - 1, (x - lo) / (up - lo)};
}

}  // namespace

double LatencyTable::lookup(int layer_id, double m, double n) const {
  auto it = layers_.find(layer_id);
  if (it == layers_.end()) throw ConfigError("latency table has no entries for layer " + std::to_string(layer_id));
  const Grid& g = it->second;
  auto outside = [](const std::vector<std::size_t>& axis, double v) {
    return v < static_cast<double>(axis.front()) - 1e-9 || v > static_cast<double>(axis.back()) + 1e-9;
  };
  if (outside(g.ms, m) || outside(g.ns, n)) {
    std::ostringstream msg;
    msg << "latency table for layer " << layer_id << " does not cover (m=" << m << ", n=" << n << ")";
    throw ConfigError(msg.str());
  }
  auto [i, fm] = bracket(g.ms, m);
  auto [j, fn] = bracket(g.ns, n);
  auto value = [&](std::size_t a, std::size_t b) {
    a = std::min(a, g.ms.size() - 1);
    b = std::min(b, g.ns.size() - 1);
    auto v = g.values.find({g.ms[a], g.ns[b]});
    if (v == g.values.end()) {
      throw ConfigError("latency grid for layer " + std::to_string(layer_id) + " is missing (" +
                        std::to_string(g.ms[a]) + ", " + std::to_string(g.ns[b]) + ")");
    }
    return v->second;
  };
  const double v00 = value(i, j);
  if (fm == 0.0 && fn == 0.0) return v00;
  const double v10 = value(i + 1, j), v01 = value(i, j + 1), v11 = value(i + 1, j + 1);
  return (1 - fm) * (1 - fn) * v00 + fm * (1 - fn) * v10 + (1 - fm) * fn * v01 + fm * fn * v11;
}

void LatencyTable::check_covers(const NetworkSpec& spec) const {
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::Conv) continue;
    auto it = layers_.find(l.id);
    if (it == layers_.end()) throw ConfigError("latency table has no entries for conv layer " + std::to_string(l.id));
    const Grid& g = it->second;
    if (g.ms.front() > 1 || g.ns.front() > 1 || g.ms.back() < l.conv.in_channels || g.ns.back() < l.conv.out_channels) {
      throw ConfigError("latency table for layer " + std::to_string(l.id) + " does not cover widths up to (" +
                        std::to_string(l.conv.in_channels) + ", " + std::to_string(l.conv.out_channels) + ")");
    }
    for (std::size_t m : g.ms) {
      for (std::size_t n : g.ns) {
        if (!g.values.count({m, n})) {
          throw ConfigError("latency grid for layer " + std::to_string(l.id) + " is not rectangular");
        }
      }
    }
  }
}

LatencyTable LatencyTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open latency table " + path.string());
  LatencyTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    int id = 0;
    std::size_t m = 0, n = 0;
    double micros = 0.0;
    if (!(fields >> id)) continue;
    if (!(fields >> m >> n >> micros)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 'layer_id m n cost_microseconds'");
    }
    table.set(id, m, n, micros);
  }
  return table;
}

void LatencyTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write latency table " + path.string());
  out << "# layer_id m n cost_microseconds\n" << std::setprecision(9);
  for (const auto& [id, grid] : layers_) {
    for (const auto& [mn, v] : grid.values) out << id << ' ' << mn.first << ' ' << mn.second << ' ' << v << '\n';
  }
}

// ---------------------------------------------------------------------------

const char* objective_name(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::Flops: return "flops";
    case ObjectiveKind::Params: return "params";
    case ObjectiveKind::Latency: return "latency";
  }
  return "unknown";
}

ObjectiveKind parse_objective(const std::string& name) {
  if (name == "flops") return ObjectiveKind::Flops;
  if (name == "params") return ObjectiveKind::Params;
  if (name == "latency") return ObjectiveKind::Latency;
  throw InputError("unknown objective '" + name + "' (expected flops, params or latency)");
}

std::uint64_t layer_flops(const ConvSpec& conv, std::size_t out_h, std::size_t out_w) {
  return 2ULL * conv.out_channels * conv.in_channels * conv.kernel * conv.kernel * out_h * out_w;
}

std::uint64_t linear_flops(std::size_t classes, std::size_t features) { return 2ULL * classes * features; }

std::uint64_t conv_params(const ConvSpec& conv) {
  return static_cast<std::uint64_t>(conv.out_channels) * conv.in_channels * conv.kernel * conv.kernel;
}

std::uint64_t batchnorm_params(std::size_t channels) { return 2ULL * channels; }

std::uint64_t linear_params(std::size_t classes, std::size_t features) {
  return static_cast<std::uint64_t>(classes) * features + classes;
}

double CostReport::sum_of_kind(LayerKind kind) const {
  double s = 0.0;
  for (const auto& l : layers) {
    if (l.kind == kind) s += l.cost;
  }
  return s;
}

namespace {

void require_table(const Objective& objective) {
  if (objective.kind == ObjectiveKind::Latency && !objective.table) {
    throw ConfigError("latency objective requires a latency table");
  }
}

double conv_cost(const Objective& objective, const LayerSpec& l, const ActivationShape& out, double m, double n) {
  if (m <= 0.0 || n <= 0.0) return 0.0;
  switch (objective.kind) {
    case ObjectiveKind::Flops:
      return 2.0 * n * m * static_cast<double>(l.conv.kernel * l.conv.kernel * out.height * out.width);
    case ObjectiveKind::Params: return n * m * static_cast<double>(l.conv.kernel * l.conv.kernel);
    case ObjectiveKind::Latency: return objective.table->lookup(l.id, m, n);
  }
  return 0.0;
}

}  // namespace

CostReport total_cost(const NetworkSpec& spec, const Objective& objective) {
  require_table(objective);
  const bool full = validate(spec, true).empty();
  Topology topo = analyze(spec, full);
  if (objective.kind == ObjectiveKind::Latency) objective.table->check_covers(spec);
  CostReport report;
  report.objective = objective.kind;
  for (std::size_t i : topo.order) {
    const LayerSpec& l = spec.layers[i];
    const ActivationShape& out = topo.shapes[i];
    LayerCost row;
    row.layer_id = l.id;
    row.kind = l.kind;
    row.name = l.name;
    row.out_height = out.height;
    row.out_width = out.width;
    switch (l.kind) {
      case LayerKind::Conv:
        row.in_channels = l.conv.in_channels;
        row.out_channels = l.conv.out_channels;
        row.kernel = l.conv.kernel;
        row.cost = conv_cost(objective, l, out, static_cast<double>(l.conv.in_channels),
                             static_cast<double>(l.conv.out_channels));
        break;
      case LayerKind::BatchNorm:
        row.in_channels = row.out_channels = out.channels;
        row.cost = objective.kind == ObjectiveKind::Params ? static_cast<double>(batchnorm_params(out.channels)) : 0.0;
        break;
      case LayerKind::Linear: {
        const std::size_t features = topo.shapes[topo.at(l.inputs[0])].channels;
        row.in_channels = features;
        row.out_channels = l.classes;
        if (objective.kind == ObjectiveKind::Flops) row.cost = static_cast<double>(linear_flops(l.classes, features));
        if (objective.kind == ObjectiveKind::Params) row.cost = static_cast<double>(linear_params(l.classes, features));
        break;
      }
      default: continue;
    }
    report.total += row.cost;
    report.layers.push_back(std::move(row));
  }
  return report;
}

std::vector<double> group_alpha(const NetworkSpec& spec, const std::vector<ChannelGroup>& groups,
                                const Objective& objective) {
  require_table(objective);
  Topology topo = analyze(spec);
  std::vector<double> alpha;
  alpha.reserve(groups.size());
  for (const auto& g : groups) {
    double a = 0.0;
    for (int p : g.producers) {
      const LayerSpec& l = spec.layer(p);
      const ActivationShape& out = topo.shapes[topo.at(p)];
      const double m = static_cast<double>(l.conv.in_channels), n = static_cast<double>(l.conv.out_channels);
      a += conv_cost(objective, l, out, m, n) - conv_cost(objective, l, out, m, std::max(n - 1.0, 0.0));
    }
    for (int c : g.consumers) {
      const LayerSpec& l = spec.layer(c);
      if (l.kind == LayerKind::Linear) {
        if (objective.kind == ObjectiveKind::Flops) a += 2.0 * static_cast<double>(l.classes);
        if (objective.kind == ObjectiveKind::Params) a += static_cast<double>(l.classes);
        continue;
      }
      const ActivationShape& out = topo.shapes[topo.at(c)];
      const double m = static_cast<double>(l.conv.in_channels), n = static_cast<double>(l.conv.out_channels);
      a += conv_cost(objective, l, out, m, n) - conv_cost(objective, l, out, std::max(m - 1.0, 0.0), n);
    }
    if (objective.kind == ObjectiveKind::Params) a += 2.0 * static_cast<double>(g.members.size());
    alpha.push_back(std::max(a, 0.0));
  }
  return alpha;
}

double step_budget(double original_cost, double eta, int iterations, int step) {
  if (!(eta > 0.0 && eta < 1.0)) throw InputError("eta must lie in (0, 1), got " + std::to_string(eta));
  if (iterations < 1) throw InputError("iterations must be >= 1");
  if (step < 1 || step > iterations) {
    throw InputError("step " + std::to_string(step) + " outside [1, " + std::to_string(iterations) + "]");
  }
  if (!(original_cost >= 0.0)) throw InputError("cost must be non-negative");
  return eta / static_cast<double>(iterations) * original_cost;
}

}  // namespace gcp
