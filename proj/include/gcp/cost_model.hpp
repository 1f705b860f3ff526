#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gcp/network.hpp"

namespace gcp {

// Measured per-layer latency as a function of (in-channels m, out-channels n)
// on a grid, bilinearly interpolated in between.
class LatencyTable {
 public:
  void set(int layer_id, std::size_t m, std::size_t n, double micros);

  // Throws ConfigError when the layer is missing or (m, n) lies outside its grid.
  double lookup(int layer_id, double m, double n) const;
  bool has_layer(int layer_id) const { return layers_.count(layer_id) > 0; }
  // Every conv layer covered over [1, m] x [1, n] of the given spec.
  void check_covers(const NetworkSpec& spec) const;

  // Text lines "layer_id m n cost_microseconds"; '#' starts a comment.
  static LatencyTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  struct Grid {
    std::vector<std::size_t> ms;
    std::vector<std::size_t> ns;
    std::map<std::pair<std::size_t, std::size_t>, double> values;
  };
  const std::map<int, Grid>& layers() const { return layers_; }

 private:
  std::map<int, Grid> layers_;
};

enum class ObjectiveKind { Flops, Params, Latency };

const char* objective_name(ObjectiveKind kind);
ObjectiveKind parse_objective(const std::string& name);

struct Objective {
  ObjectiveKind kind = ObjectiveKind::Flops;
  std::shared_ptr<const LatencyTable> table;  // Latency only

  static Objective flops() { return {ObjectiveKind::Flops, nullptr}; }
  static Objective params() { return {ObjectiveKind::Params, nullptr}; }
  static Objective latency(std::shared_ptr<const LatencyTable> t) { return {ObjectiveKind::Latency, std::move(t)}; }
};

struct LayerCost {
  int layer_id = 0;
  LayerKind kind = LayerKind::Conv;
  std::string name;
  std::size_t in_channels = 0;   // m (features for Linear)
  std::size_t out_channels = 0;  // n (classes for Linear)
  std::size_t kernel = 0;
  std::size_t out_height = 0;
  std::size_t out_width = 0;
  double cost = 0.0;
};

struct CostReport {
  ObjectiveKind objective = ObjectiveKind::Flops;
  double total = 0.0;
  std::vector<LayerCost> layers;  // Conv, BatchNorm and Linear rows in topological order
  std::vector<double> alpha;      // per group, filled by group_alpha when requested

  double sum_of_kind(LayerKind kind) const;
};

// 2 * n * m * k^2 * out_h * out_w: one multiply and one add per MAC.
std::uint64_t layer_flops(const ConvSpec& conv, std::size_t out_h, std::size_t out_w);
std::uint64_t linear_flops(std::size_t classes, std::size_t features);

std::uint64_t conv_params(const ConvSpec& conv);
std::uint64_t batchnorm_params(std::size_t channels);  // gamma and beta
std::uint64_t linear_params(std::size_t classes, std::size_t features);

// Sum of Conv/BN/Linear costs. BN/ReLU/pool FLOPs are not counted; BN gamma
// and beta are counted as parameters. Latency sums conv table entries.
// Accepts head-less fragments (shape rules only).
CostReport total_cost(const NetworkSpec& spec, const Objective& objective);

// Cost of removing one channel of each group at the current widths: producer
// convs lose an output filter, consumer convs/head lose an input slice, member
// BNs lose gamma and beta (Params only).
std::vector<double> group_alpha(const NetworkSpec& spec, const std::vector<ChannelGroup>& groups,
                                const Objective& objective);

// (eta / T) * C_original; throws InputError outside 0<eta<1, T>=1, 1<=t<=T.
double step_budget(double original_cost, double eta, int iterations, int step);

}  // namespace gcp
