#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gcp/cost_model.hpp"
#include "gcp/network.hpp"
#include "gcp/pipeline.hpp"

// On-disk formats: the model container (JSON manifest plus one little-endian
// float32 blob per tensor), spec and run-config files, history, metrics,
// cost reports and the pruning-pattern CSV/SVG.
namespace gcp {

using Json = nlohmann::json;

inline constexpr int kContainerVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

struct SavedModel {
  Model model;
  std::uint64_t seed = 0;
  std::vector<float> norm_mean;  // dataset normalization, pixel/255 units
  std::vector<float> norm_std;
  Json history = Json::object();  // prune history summary, empty for baselines
};

// Writes `dir/manifest.json` and `dir/<tensor>.bin`, creating `dir`.
void save_model(const std::filesystem::path& dir, const SavedModel& saved);

// Throws VersionError, MissingBlobError, TruncatedError or ChecksumError (the
// last two name the tensor), FormatError for anything else malformed.
SavedModel load_model(const std::filesystem::path& dir);

std::uint32_t crc32_of(const void* data, std::size_t bytes);

// Network spec <-> JSON: {"input": {channels, height, width}, "layers": [...]}.
Json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const Json& j);
NetworkSpec load_spec_file(const std::filesystem::path& path);

Json history_to_json(const PruneHistory& history);
void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

// Shortest round-trip decimal, locale independent.
std::string format_number(double value);

// epoch,train_loss,eval_top1
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows);

// Human-readable per-layer table, total and (with a reference) the
// reference/current reduction factor.
std::string cost_text(const CostReport& report, const CostReport* reference = nullptr);
void write_cost_csv(const std::filesystem::path& path, const CostReport& report, const CostReport* reference = nullptr);
double reduction_factor(const CostReport& report, const CostReport& reference);

// One row per convolution in id order.
struct PatternRow {
  std::size_t index = 0;
  int layer_id = 0;
  std::size_t kernel = 0;
  std::size_t original = 0;
  std::size_t kept = 0;
};

std::vector<PatternRow> pattern_rows(const Model& model);
// Rows for a pruned model read against the unpruned widths of `original`.
std::vector<PatternRow> pattern_rows(const NetworkSpec& original, const NetworkSpec& pruned);
void write_pattern_csv(const std::filesystem::path& path, const std::vector<PatternRow>& rows);
std::string pattern_svg(const std::vector<PatternRow>& rows, const std::string& title = "");

// Settings a command reads from --config; flags override individual fields.
struct RunConfig {
  std::string dataset_kind = "cifar10";
  std::filesystem::path dataset_dir;
  std::size_t subset_size = 10000;
  std::size_t test_size = 0;
  std::string architecture = "resnet8";
  std::filesystem::path spec_file;
  std::filesystem::path latency_table;
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 1;
  TrainConfig train;
  GcpConfig gcp;
  std::string objective = "flops";
};

// Unknown keys and missing referenced paths are ConfigErrors.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const Json& j);

}  // namespace gcp
