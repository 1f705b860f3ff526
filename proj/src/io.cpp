#include "gcp/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "gcp/errors.hpp"

namespace gcp {

namespace fs = std::filesystem;

std::uint32_t crc32_of(const void* data, std::size_t bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (bytes > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    bytes -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string format_number(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Spec

Json spec_to_json(const NetworkSpec& spec) {
  Json layers = Json::array();
  for (const auto& l : spec.layers) {
    Json j = {{"id", l.id}, {"kind", layer_kind_name(l.kind)}, {"inputs", l.inputs}};
    if (!l.name.empty()) j["name"] = l.name;
    if (l.kind == LayerKind::Conv) {
      j["out_channels"] = l.conv.out_channels;
      j["in_channels"] = l.conv.in_channels;
      j["kernel"] = l.conv.kernel;
      j["stride"] = l.conv.stride;
      j["pad"] = l.conv.pad;
    }
    if (l.kind == LayerKind::Linear) j["classes"] = l.classes;
    layers.push_back(std::move(j));
  }
  return {{"input", {{"channels", spec.input_channels}, {"height", spec.input_height}, {"width", spec.input_width}}},
          {"layers", std::move(layers)}};
}

NetworkSpec spec_from_json(const Json& j) {
  try {
    NetworkSpec spec;
    const Json& in = j.at("input");
    spec.input_channels = in.at("channels").get<std::size_t>();
    spec.input_height = in.at("height").get<std::size_t>();
    spec.input_width = in.at("width").get<std::size_t>();
    for (const Json& lj : j.at("layers")) {
      LayerSpec l;
      l.id = lj.at("id").get<int>();
      l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
      l.inputs = lj.value("inputs", std::vector<int>{});
      l.name = lj.value("name", std::string{});
      if (l.kind == LayerKind::Conv) {
        l.conv.out_channels = lj.at("out_channels").get<std::size_t>();
        l.conv.in_channels = lj.at("in_channels").get<std::size_t>();
        l.conv.kernel = lj.at("kernel").get<std::size_t>();
        l.conv.stride = lj.value("stride", std::size_t{1});
        l.conv.pad = lj.value("pad", l.conv.kernel / 2);
      }
      if (l.kind == LayerKind::Linear) l.classes = lj.at("classes").get<std::size_t>();
      spec.layers.push_back(std::move(l));
    }
    return spec;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed network spec: ") + e.what());
  }
}

NetworkSpec load_spec_file(const fs::path& path) {
  NetworkSpec spec = spec_from_json(read_json(path));
  analyze(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Model container

namespace {

void for_each_tensor(Model& model, const std::function<void(const std::string&, const Shape&, std::span<float>)>& fn) {
  for (auto& [id, w] : model.conv_weights) fn("conv." + std::to_string(id) + ".weight", w.shape(), w.data());
  for (auto& [id, p] : model.bn) {
    const std::string base = "bn." + std::to_string(id) + ".";
    const Shape s{p.channels()};
    fn(base + "gamma", s, p.gamma);
    fn(base + "beta", s, p.beta);
    fn(base + "running_mean", s, p.running_mean);
    fn(base + "running_var", s, p.running_var);
  }
  fn("head.weight", model.head_weights.shape(), model.head_weights.data());
  fn("head.bias", Shape{model.head_bias.size()}, model.head_bias);
  for (std::size_t g = 0; g < model.group_mask.size(); ++g) {
    fn("group." + std::to_string(g) + ".mask", Shape{model.group_mask[g].size()}, model.group_mask[g]);
  }
}

std::vector<unsigned char> to_le_bytes(std::span<const float> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xFF);
  }
  return bytes;
}

std::string blob_name(const std::string& tensor) { return tensor + ".bin"; }

}  // namespace

void save_model(const fs::path& dir, const SavedModel& saved) {
  saved.model.check();
  fs::create_directories(dir);
  Model model = saved.model;
  Json tensors = Json::array();
  for_each_tensor(model, [&](const std::string& name, const Shape& shape, std::span<float> values) {
    const std::vector<unsigned char> bytes = to_le_bytes(values);
    std::ofstream out(dir / blob_name(name), std::ios::binary);
    if (!out) throw InputError("cannot write " + (dir / blob_name(name)).string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + (dir / blob_name(name)).string());
    tensors.push_back({{"name", name},
                       {"file", blob_name(name)},
                       {"shape", shape},
                       {"dtype", "float32"},
                       {"bytes", bytes.size()},
                       {"crc32", crc32_of(bytes.data(), bytes.size())}});
  });
  Json groups = Json::array();
  for (const auto& g : model.groups) {
    std::vector<int> kept(g.kept.begin(), g.kept.end());
    groups.push_back({{"id", g.id}, {"members", g.members}, {"kept", kept}});
  }
  Json eps = Json::object();
  for (const auto& [id, p] : model.bn) eps[std::to_string(id)] = p.eps;
  Json manifest = {{"format", "gcp-model"},
                   {"version", kContainerVersion},
                   {"seed", saved.seed},
                   {"spec", spec_to_json(model.spec())},
                   {"bn_eps", eps},
                   {"statistics_calibrated", model.statistics_calibrated},
                   {"normalization", {{"mean", saved.norm_mean}, {"std", saved.norm_std}}},
                   {"groups", groups},
                   {"tensors", tensors},
                   {"history", saved.history}};
  write_json(dir / kManifestName, manifest);
}

SavedModel load_model(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw MissingBlobError("no manifest at " + manifest_path.string());
  const Json manifest = read_json(manifest_path);
  SavedModel saved;
  try {
    if (manifest.value("format", std::string{}) != "gcp-model") throw FormatError("not a model container manifest");
    const int version = manifest.at("version").get<int>();
    if (version != kContainerVersion) {
      throw VersionError("container version " + std::to_string(version) + " unsupported (expected " +
                         std::to_string(kContainerVersion) + ")");
    }
    NetworkSpec spec = spec_from_json(manifest.at("spec"));
    saved.model = Model(spec);
    saved.seed = manifest.at("seed").get<std::uint64_t>();
    saved.norm_mean = manifest.at("normalization").at("mean").get<std::vector<float>>();
    saved.norm_std = manifest.at("normalization").at("std").get<std::vector<float>>();
    saved.history = manifest.value("history", Json::object());
    saved.model.statistics_calibrated = manifest.value("statistics_calibrated", false);
    for (const auto& [key, value] : manifest.at("bn_eps").items()) {
      saved.model.bn.at(std::stoi(key)).eps = value.get<double>();
    }
    const Json& groups = manifest.at("groups");
    if (groups.size() != saved.model.groups.size()) throw FormatError("group count does not match the spec");
    for (std::size_t g = 0; g < groups.size(); ++g) {
      auto kept = groups[g].at("kept").get<std::vector<int>>();
      if (kept.size() != saved.model.groups[g].channels) throw FormatError("group " + std::to_string(g) + " width");
      for (std::size_t c = 0; c < kept.size(); ++c) saved.model.groups[g].kept[c] = kept[c] != 0;
    }

    std::map<std::string, const Json*> index;
    for (const Json& t : manifest.at("tensors")) index[t.at("name").get<std::string>()] = &t;
    std::size_t used = 0;
    for_each_tensor(saved.model, [&](const std::string& name, const Shape& shape, std::span<float> values) {
      auto it = index.find(name);
      if (it == index.end()) throw MissingBlobError("manifest has no entry for tensor " + name);
      ++used;
      const Json& t = *it->second;
      if (t.at("dtype").get<std::string>() != "float32") throw FormatError("tensor " + name + " is not float32");
      if (t.at("shape").get<Shape>() != shape) {
        throw FormatError("tensor " + name + " has shape " + shape_str(t.at("shape").get<Shape>()) + ", spec implies " +
                          shape_str(shape));
      }
      const std::size_t expected = 4 * shape_numel(shape);
      if (t.at("bytes").get<std::size_t>() != expected) throw FormatError("tensor " + name + " byte length mismatch");
      const fs::path blob = dir / t.at("file").get<std::string>();
      if (!fs::exists(blob)) throw MissingBlobError("missing blob " + blob.string() + " for tensor " + name);
      const auto size = fs::file_size(blob);
      if (size < expected) {
        throw TruncatedError("tensor " + name + ": blob has " + std::to_string(size) + " bytes, expected " +
                             std::to_string(expected));
      }
      if (size > expected) throw FormatError("tensor " + name + ": blob longer than its shape");
      std::vector<unsigned char> bytes(expected);
      std::ifstream in(blob, std::ios::binary);
      in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
      if (static_cast<std::size_t>(in.gcount()) != expected) throw TruncatedError("tensor " + name + ": short read");
      if (crc32_of(bytes.data(), bytes.size()) != t.at("crc32").get<std::uint32_t>()) {
        throw ChecksumError("checksum mismatch in tensor " + name);
      }
      for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        values[i] = std::bit_cast<float>(u);
      }
    });
    if (used != index.size()) throw FormatError("manifest lists tensors the spec does not define");
  } catch (const Json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  saved.model.check();
  saved.model.mark_modified();
  return saved;
}

// ---------------------------------------------------------------------------
// History and reports

Json history_to_json(const PruneHistory& h) {
  Json steps = Json::array();
  for (const auto& r : h.steps) {
    steps.push_back({{"iteration", r.iteration},
                     {"cost_before", r.cost_before},
                     {"cost_after", r.cost_after},
                     {"budget", r.budget},
                     {"achieved", r.achieved},
                     {"max_alpha", r.max_alpha},
                     {"lambda", r.lambda},
                     {"lambda_doublings", r.lambda_doublings},
                     {"prunable_mass", r.prunable_mass},
                     {"exact_zeros", r.exact_zeros},
                     {"reg_objective", r.reg_objective},
                     {"reg_loss", r.reg_loss},
                     {"rec_loss", r.rec_loss},
                     {"post_prune_loss", r.post_prune_loss},
                     {"post_recovery_loss", r.post_recovery_loss},
                     {"pruned_per_group", r.pruned_per_group},
                     {"channels_pruned", r.channels_pruned}});
  }
  Json keep = Json::array();
  for (const auto& k : h.final_keep) keep.push_back(std::vector<int>(k.begin(), k.end()));
  return {{"objective", h.objective},  {"original_cost", h.original_cost}, {"eta", h.eta},
          {"iterations", h.iterations}, {"seed", h.seed},                   {"steps", steps},
          {"finetune_loss", h.finetune_loss}, {"final_cost", h.final_cost}, {"final_keep", keep}};
}

void write_metrics_csv(const fs::path& path, const std::vector<EpochMetrics>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "epoch,train_loss,eval_top1\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.eval_top1) << '\n';
  }
}

double reduction_factor(const CostReport& report, const CostReport& reference) {
  if (!(report.total > 0.0)) throw NumericError("cost of the model is not positive");
  return reference.total / report.total;
}

namespace {

const LayerCost* find_row(const CostReport* r, int id) {
  if (!r) return nullptr;
  for (const auto& row : r->layers) {
    if (row.layer_id == id) return &row;
  }
  return nullptr;
}

}  // namespace

std::string cost_text(const CostReport& report, const CostReport* reference) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << "objective: " << objective_name(report.objective) << '\n';
  out << std::left << std::setw(6) << "id" << std::setw(11) << "kind" << std::setw(20) << "name" << std::right
      << std::setw(6) << "m" << std::setw(6) << "n" << std::setw(4) << "k" << std::setw(9) << "out" << std::setw(16)
      << "cost";
  if (reference) out << std::setw(16) << "reference";
  out << '\n';
  for (const auto& row : report.layers) {
    out << std::left << std::setw(6) << row.layer_id << std::setw(11) << layer_kind_name(row.kind) << std::setw(20)
        << row.name << std::right << std::setw(6) << row.in_channels << std::setw(6) << row.out_channels
        << std::setw(4) << row.kernel << std::setw(9)
        << (std::to_string(row.out_height) + "x" + std::to_string(row.out_width)) << std::setw(16)
        << format_number(row.cost);
    if (reference) {
      const LayerCost* ref = find_row(reference, row.layer_id);
      out << std::setw(16) << (ref ? format_number(ref->cost) : std::string("-"));
    }
    out << '\n';
  }
  out << "total: " << format_number(report.total) << '\n';
  if (reference) {
    std::ostringstream f;
    f.imbue(std::locale::classic());
    f << std::fixed << std::setprecision(2) << reduction_factor(report, *reference);
    out << "reference total: " << format_number(reference->total) << '\n';
    out << "reduction: " << f.str() << "x\n";
  }
  return out.str();
}

void write_cost_csv(const fs::path& path, const CostReport& report, const CostReport* reference) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "layer_id,kind,name,in_channels,out_channels,kernel,out_height,out_width,cost,reference_cost\n";
  for (const auto& row : report.layers) {
    const LayerCost* ref = find_row(reference, row.layer_id);
    out << row.layer_id << ',' << layer_kind_name(row.kind) << ',' << row.name << ',' << row.in_channels << ','
        << row.out_channels << ',' << row.kernel << ',' << row.out_height << ',' << row.out_width << ','
        << format_number(row.cost) << ',' << (ref ? format_number(ref->cost) : std::string()) << '\n';
  }
  out << "total,,,,,,,," << format_number(report.total) << ','
      << (reference ? format_number(reference->total) : std::string()) << '\n';
}

// ---------------------------------------------------------------------------
// Pruning pattern

std::vector<PatternRow> pattern_rows(const NetworkSpec& original, const NetworkSpec& pruned) {
  std::vector<PatternRow> rows;
  std::vector<const LayerSpec*> convs;
  for (const auto& l : original.layers) {
    if (l.kind == LayerKind::Conv) convs.push_back(&l);
  }
  std::sort(convs.begin(), convs.end(), [](const LayerSpec* a, const LayerSpec* b) { return a->id < b->id; });
  for (const LayerSpec* l : convs) {
    const LayerSpec& p = pruned.layer(l->id);
    if (p.kind != LayerKind::Conv) throw ConfigError("layer " + std::to_string(l->id) + " is not a conv in both specs");
    rows.push_back({rows.size(), l->id, l->conv.kernel, l->conv.out_channels, p.conv.out_channels});
  }
  return rows;
}

std::vector<PatternRow> pattern_rows(const Model& model) {
  std::vector<std::vector<bool>> keep;
  for (const auto& g : model.groups) keep.push_back(g.kept);
  return pattern_rows(model.spec(), shrink_spec(model.spec(), model.groups, keep));
}

void write_pattern_csv(const fs::path& path, const std::vector<PatternRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "layer_index,layer_id,kernel,original_channels,kept_channels\n";
  for (const auto& r : rows) {
    out << r.index << ',' << r.layer_id << ',' << r.kernel << 'x' << r.kernel << ',' << r.original << ',' << r.kept
        << '\n';
  }
}

std::string pattern_svg(const std::vector<PatternRow>& rows, const std::string& title) {
  std::size_t widest = 1;
  for (const auto& r : rows) widest = std::max(widest, r.original);
  const double left = 70, top = title.empty() ? 20 : 40, bar_h = 16, gap = 6, plot_w = 480;
  const double scale = plot_w / static_cast<double>(widest);
  const double plot_h = static_cast<double>(rows.size()) * (bar_h + gap);
  const double width = left + plot_w + 30, height = top + plot_h + 60;

  std::ostringstream s;
  s.imbue(std::locale::classic());
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) s << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\">" << title << "</text>\n";
  for (const auto& r : rows) {
    const double y = top + static_cast<double>(r.index) * (bar_h + gap);
    const char* fill = r.kernel == 1 ? "green" : (r.kernel == 3 ? "black" : "gray");
    s << "<rect x=\"" << left << "\" y=\"" << y << "\" width=\"" << static_cast<double>(r.original) * scale
      << "\" height=\"" << bar_h << "\" fill=\"white\" stroke=\"black\"/>\n";
    s << "<rect x=\"" << left << "\" y=\"" << y << "\" width=\"" << static_cast<double>(r.kept) * scale
      << "\" height=\"" << bar_h << "\" fill=\"" << fill << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << y + bar_h - 4 << "\" text-anchor=\"end\">" << r.index + 1
      << "</text>\n";
  }
  const double axis_y = top + plot_h;
  s << "<line x1=\"" << left << "\" y1=\"" << axis_y << "\" x2=\"" << left + plot_w << "\" y2=\"" << axis_y
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = static_cast<double>(widest) * t / 4.0;
    const double x = left + v * scale;
    s << "<text x=\"" << x << "\" y=\"" << axis_y + 14 << "\" text-anchor=\"middle\">" << std::llround(v)
      << "</text>\n";
  }
  s << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << axis_y + 36
    << "\" text-anchor=\"middle\">size of output channels</text>\n";
  s << "<text transform=\"translate(16," << top + plot_h / 2
    << ") rotate(-90)\" text-anchor=\"middle\">index of convolution layer</text>\n";
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Run configuration

namespace {

template <typename T>
void take(const Json& obj, const char* key, T& field, std::set<std::string>& seen) {
  if (!obj.contains(key)) return;
  seen.insert(key);
  field = obj.at(key).get<T>();
}

void reject_unknown(const Json& obj, const std::set<std::string>& seen, const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!seen.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  try {
    std::set<std::string> seen;
    std::string dataset_dir, spec_file, latency_table, out_dir = c.out_dir.string();
    if (j.contains("dataset")) {
      seen.insert("dataset");
      const Json& d = j.at("dataset");
      std::set<std::string> ds;
      take(d, "kind", c.dataset_kind, ds);
      take(d, "path", dataset_dir, ds);
      take(d, "subset_size", c.subset_size, ds);
      take(d, "test_size", c.test_size, ds);
      reject_unknown(d, ds, "dataset");
      parse_dataset_kind(c.dataset_kind);
    }
    take(j, "architecture", c.architecture, seen);
    take(j, "spec_file", spec_file, seen);
    take(j, "latency_table", latency_table, seen);
    take(j, "out", out_dir, seen);
    take(j, "seed", c.seed, seen);
    take(j, "objective", c.objective, seen);
    if (j.contains("train")) {
      seen.insert("train");
      const Json& t = j.at("train");
      std::set<std::string> ts;
      take(t, "epochs", c.train.epochs, ts);
      take(t, "lr", c.train.lr, ts);
      take(t, "momentum", c.train.momentum, ts);
      take(t, "weight_decay", c.train.weight_decay, ts);
      take(t, "batch_size", c.train.batch_size, ts);
      take(t, "bn_ema_momentum", c.train.bn_ema_momentum, ts);
      reject_unknown(t, ts, "train");
    }
    if (j.contains("gcp")) {
      seen.insert("gcp");
      const Json& g = j.at("gcp");
      std::set<std::string> gs;
      take(g, "eta", c.gcp.eta, gs);
      take(g, "iterations", c.gcp.iterations, gs);
      take(g, "lambda", c.gcp.lambda, gs);
      take(g, "epochs_reg", c.gcp.epochs_reg, gs);
      take(g, "epochs_rec", c.gcp.epochs_rec, gs);
      take(g, "epochs_finetune", c.gcp.epochs_finetune, gs);
      take(g, "lr_reg", c.gcp.lr_reg, gs);
      take(g, "lr_rec", c.gcp.lr_rec, gs);
      take(g, "lr_finetune", c.gcp.lr_finetune, gs);
      take(g, "momentum", c.gcp.momentum, gs);
      take(g, "weight_decay", c.gcp.weight_decay, gs);
      take(g, "batch_size", c.gcp.batch_size, gs);
      take(g, "calibration_batches", c.gcp.calibration_batches, gs);
      take(g, "bn_ema_momentum", c.gcp.bn_ema_momentum, gs);
      take(g, "max_lambda_doublings", c.gcp.max_lambda_doublings, gs);
      reject_unknown(g, gs, "gcp");
    }
    reject_unknown(j, seen, "config");
    c.dataset_dir = dataset_dir;
    c.spec_file = spec_file;
    c.latency_table = latency_table;
    c.out_dir = out_dir;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  parse_objective(c.objective);
  c.train.seed = c.seed;
  c.gcp.seed = c.seed;
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  RunConfig c = run_config_from_json(read_json(path));
  // Relative paths in the file are relative to the file.
  const fs::path base = path.parent_path();
  for (fs::path* p : {&c.dataset_dir, &c.spec_file, &c.latency_table}) {
    if (p->empty()) continue;
    if (p->is_relative()) *p = base / *p;
    if (!fs::exists(*p)) throw ConfigError("referenced path " + p->string() + " does not exist");
  }
  if (c.out_dir.is_relative()) c.out_dir = base / c.out_dir;
  return c;
}

}  // namespace gcp
