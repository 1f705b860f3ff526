#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "gcp/architectures.hpp"
#include "gcp/cost_model.hpp"
#include "gcp/data.hpp"
#include "gcp/errors.hpp"
#include "gcp/io.hpp"
#include "gcp/latency_bench.hpp"
#include "gcp/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gcp;

namespace {

// Flags shared by every subcommand; unset ones fall back to --config.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> dataset_kind;
  std::optional<std::size_t> subset;
  std::optional<std::size_t> test_size;
  std::optional<std::string> arch;
  std::optional<std::string> spec_file;
  std::optional<std::string> objective;
  std::optional<std::string> latency_table;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--data", c.data, "dataset directory");
  cmd->add_option("--dataset", c.dataset_kind, "mnist | cifar10");
  cmd->add_option("--subset", c.subset, "training subset size (0 = all)");
  cmd->add_option("--test-size", c.test_size, "evaluation subset size (0 = all)");
  cmd->add_option("--arch", c.arch, "resnet8 | convnet6");
  cmd->add_option("--spec", c.spec_file, "network spec JSON (overrides --arch)");
  cmd->add_option("--objective", c.objective, "flops | params | latency");
  cmd->add_option("--latency-table", c.latency_table, "latency table for the latency objective");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) {
    rc.seed = *c.seed;
    rc.train.seed = *c.seed;
    rc.gcp.seed = *c.seed;
  }
  if (c.out) rc.out_dir = *c.out;
  if (c.data) rc.dataset_dir = *c.data;
  if (c.dataset_kind) rc.dataset_kind = *c.dataset_kind;
  if (c.subset) rc.subset_size = *c.subset;
  if (c.test_size) rc.test_size = *c.test_size;
  if (c.arch) rc.architecture = *c.arch;
  if (c.spec_file) rc.spec_file = *c.spec_file;
  if (c.objective) rc.objective = *c.objective;
  if (c.latency_table) rc.latency_table = *c.latency_table;
  return rc;
}

Objective make_objective(const RunConfig& rc) {
  const ObjectiveKind kind = parse_objective(rc.objective);
  if (kind == ObjectiveKind::Flops) return Objective::flops();
  if (kind == ObjectiveKind::Params) return Objective::params();
  if (rc.latency_table.empty()) throw ConfigError("objective latency needs --latency-table");
  if (!fs::exists(rc.latency_table)) throw ConfigError("latency table " + rc.latency_table.string() + " not found");
  return Objective::latency(std::make_shared<LatencyTable>(LatencyTable::load(rc.latency_table)));
}

DatasetSplit load_data(const RunConfig& rc, std::vector<float> mean = {}, std::vector<float> stddev = {}) {
  if (rc.dataset_dir.empty()) throw ConfigError("no dataset directory (set dataset.path or --data)");
  if (!fs::exists(rc.dataset_dir)) throw ConfigError("dataset directory " + rc.dataset_dir.string() + " not found");
  return load_dataset(parse_dataset_kind(rc.dataset_kind), rc.dataset_dir, rc.subset_size, rc.seed, rc.test_size,
                      std::move(mean), std::move(stddev));
}

void check_classes(const Model& model, const Dataset& data) {
  if (model.classes() != data.classes) {
    throw InputError("model has " + std::to_string(model.classes()) + " classes, dataset has " +
                     std::to_string(data.classes));
  }
  if (model.spec().input_channels != data.channels()) {
    throw InputError("model reads " + std::to_string(model.spec().input_channels) + " channels, dataset has " +
                     std::to_string(data.channels()));
  }
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

PruneMask kept_mask(const Model& model) {
  PruneMask m;
  for (const auto& g : model.groups) m.keep.push_back(g.kept);
  return m;
}

Json history_summary(const PruneHistory& h) {
  return {{"objective", h.objective},   {"eta", h.eta},
          {"iterations", h.iterations}, {"original_cost", h.original_cost},
          {"final_cost", h.final_cost}, {"steps_completed", h.steps.size()}};
}

int cmd_train(const Common& c, std::optional<int> epochs, std::optional<double> lr) {
  RunConfig rc = resolve(c);
  if (epochs) rc.train.epochs = *epochs;
  if (lr) rc.train.lr = *lr;
  DatasetSplit data = load_data(rc);
  InputGeometry geo{data.train.channels(), data.train.images.dim(2), data.train.images.dim(3), data.train.classes};
  NetworkSpec spec = rc.spec_file.empty() ? builtin_spec(rc.architecture, geo) : load_spec_file(rc.spec_file);
  Model model(spec);
  initialize_parameters(model, rc.seed);
  check_classes(model, data.train);
  auto metrics = train_model(model, data.train, data.test, rc.train, log_line);
  write_metrics_csv(rc.out_dir / "metrics.csv", metrics);
  save_model(rc.out_dir / "model", {model, rc.seed, data.train.mean, data.train.stddev, Json::object()});
  std::cout << "saved " << (rc.out_dir / "model").string() << '\n';
  return 0;
}

struct PruneFlags {
  std::string model;
  std::optional<double> eta;
  std::optional<int> iterations;
  std::optional<double> lambda;
  std::optional<int> finetune_epochs;
};

int cmd_prune(const Common& c, const PruneFlags& f) {
  RunConfig rc = resolve(c);
  if (f.eta) rc.gcp.eta = *f.eta;
  if (f.iterations) rc.gcp.iterations = *f.iterations;
  if (f.lambda) rc.gcp.lambda = *f.lambda;
  if (f.finetune_epochs) rc.gcp.epochs_finetune = *f.finetune_epochs;
  rc.gcp.objective = make_objective(rc);
  rc.gcp.check();
  SavedModel saved = load_model(f.model);
  DatasetSplit data = load_data(rc, saved.norm_mean, saved.norm_std);
  check_classes(saved.model, data.train);

  PruneHistory history;
  Model pruned;
  try {
    pruned = run_gcp(saved.model, data.train, rc.gcp, history, log_line);
  } catch (...) {
    write_json(rc.out_dir / "history.json", history_to_json(history));
    throw;
  }
  write_json(rc.out_dir / "history.json", history_to_json(history));
  const Json summary = history_summary(history);
  save_model(rc.out_dir / "masked", {pruned, rc.seed, saved.norm_mean, saved.norm_std, summary});
  save_model(rc.out_dir / "materialized",
             {materialize(pruned, kept_mask(pruned)), rc.seed, saved.norm_mean, saved.norm_std, summary});
  const EvalResult r = evaluate(pruned, data.test);
  std::cout << "cost " << format_number(history.original_cost) << " -> " << format_number(history.final_cost)
            << ", eval top-1 " << format_number(r.top1) << '\n';
  return 0;
}

int cmd_finetune(const Common& c, const std::string& model_dir, std::optional<int> epochs, std::optional<double> lr) {
  RunConfig rc = resolve(c);
  if (epochs) rc.gcp.epochs_finetune = *epochs;
  if (lr) rc.gcp.lr_finetune = *lr;
  SavedModel saved = load_model(model_dir);
  DatasetSplit data = load_data(rc, saved.norm_mean, saved.norm_std);
  check_classes(saved.model, data.train);
  const auto losses = finetune(saved.model, data.train, rc.gcp);
  std::ofstream csv;
  fs::create_directories(rc.out_dir);
  csv.open(rc.out_dir / "finetune.csv");
  csv << "epoch,train_loss\n";
  for (std::size_t e = 0; e < losses.size(); ++e) csv << e + 1 << ',' << format_number(losses[e]) << '\n';
  saved.seed = rc.seed;
  save_model(rc.out_dir / "model", saved);
  std::cout << "eval top-1 " << format_number(evaluate(saved.model, data.test).top1) << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& model_dir, bool train_split) {
  RunConfig rc = resolve(c);
  SavedModel saved = load_model(model_dir);
  DatasetSplit data = load_data(rc, saved.norm_mean, saved.norm_std);
  const Dataset& d = train_split ? data.train : data.test;
  check_classes(saved.model, d);
  const EvalResult r = evaluate(saved.model, d);
  std::cout << "samples " << r.samples << '\n' << "loss " << format_number(r.loss) << '\n'
            << "top1 " << format_number(r.top1) << '\n';
  if (saved.model.classes() >= 5) std::cout << "top5 " << format_number(r.top5) << '\n';
  return 0;
}

CostReport report_for(const Model& model, const Objective& objective) {
  std::vector<std::vector<bool>> keep;
  for (const auto& g : model.groups) keep.push_back(g.kept);
  return total_cost(shrink_spec(model.spec(), model.groups, keep), objective);
}

int cmd_cost(const Common& c, const std::string& model_dir, const std::string& reference) {
  RunConfig rc = resolve(c);
  const Objective objective = make_objective(rc);
  SavedModel saved = load_model(model_dir);
  const CostReport report = report_for(saved.model, objective);
  std::optional<CostReport> ref;
  if (!reference.empty()) ref = report_for(load_model(reference).model, objective);
  std::cout << cost_text(report, ref ? &*ref : nullptr);
  write_cost_csv(rc.out_dir / "cost.csv", report, ref ? &*ref : nullptr);
  return 0;
}

int cmd_plot(const Common& c, const std::string& model_dir, const std::string& reference, const std::string& title) {
  RunConfig rc = resolve(c);
  SavedModel saved = load_model(model_dir);
  std::vector<PatternRow> rows;
  if (reference.empty()) {
    rows = pattern_rows(saved.model);
  } else {
    rows = pattern_rows(load_model(reference).model.spec(), saved.model.spec());
  }
  write_pattern_csv(rc.out_dir / "pattern.csv", rows);
  std::ofstream svg(rc.out_dir / "pattern.svg");
  svg << pattern_svg(rows, title);
  std::cout << "wrote " << (rc.out_dir / "pattern.csv").string() << " and " << (rc.out_dir / "pattern.svg").string()
            << '\n';
  return 0;
}

int cmd_bench(const Common& c, const std::string& model_dir, const BenchOptions& options) {
  RunConfig rc = resolve(c);
  SavedModel saved = load_model(model_dir);
  BenchOptions opt = options;
  opt.seed = rc.seed;
  BenchResult result = bench_latency(saved.model.spec(), opt);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
  fs::create_directories(rc.out_dir);
  result.table.save(rc.out_dir / "latency.txt");
  std::cout << "wrote " << (rc.out_dir / "latency.txt").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Global channel pruning toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "train a baseline from random initialization");
  add_common(train, common);
  std::optional<int> train_epochs;
  std::optional<double> train_lr;
  train->add_option("--epochs", train_epochs, "training epochs");
  train->add_option("--lr", train_lr, "peak learning rate");

  auto* prune = app.add_subcommand("prune", "run the iterative pruning algorithm");
  add_common(prune, common);
  PruneFlags pf;
  prune->add_option("--model", pf.model, "pretrained model directory")->required();
  prune->add_option("--eta", pf.eta, "target fractional cost reduction");
  prune->add_option("--iterations", pf.iterations, "number of prune iterations T");
  prune->add_option("--lambda", pf.lambda, "L1 penalty strength");
  prune->add_option("--finetune-epochs", pf.finetune_epochs, "fine-tune epochs after the last iteration");

  auto* ft = app.add_subcommand("finetune", "fine-tune a (pruned) model");
  add_common(ft, common);
  std::string ft_model;
  std::optional<int> ft_epochs;
  std::optional<double> ft_lr;
  ft->add_option("--model", ft_model, "model directory")->required();
  ft->add_option("--epochs", ft_epochs, "fine-tune epochs");
  ft->add_option("--lr", ft_lr, "peak learning rate");

  auto* ev = app.add_subcommand("eval", "top-1 / top-5 accuracy");
  add_common(ev, common);
  std::string ev_model;
  bool ev_train = false;
  ev->add_option("--model", ev_model, "model directory")->required();
  ev->add_flag("--train-split", ev_train, "evaluate on the training subset");

  auto* cost = app.add_subcommand("cost", "per-layer cost report");
  add_common(cost, common);
  std::string cost_model, cost_ref;
  cost->add_option("--model", cost_model, "model directory")->required();
  cost->add_option("--reference", cost_ref, "reference model for reduction factors");

  auto* plot = app.add_subcommand("plot", "pruning pattern CSV and SVG");
  add_common(plot, common);
  std::string plot_model, plot_ref, plot_title;
  plot->add_option("--model", plot_model, "masked model, or materialized model with --reference")->required();
  plot->add_option("--reference", plot_ref, "unpruned model");
  plot->add_option("--title", plot_title, "chart title");

  auto* bench = app.add_subcommand("bench-latency", "measure a conv latency table");
  add_common(bench, common);
  std::string bench_model;
  BenchOptions bo;
  bench->add_option("--model", bench_model, "model directory")->required();
  bench->add_option("--batch", bo.batch, "batch size");
  bench->add_option("--repeats", bo.repeats, "timed repeats per grid point");
  bench->add_option("--grid", bo.grid, "width fractions in (0, 1]")->delimiter(',');

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(common, train_epochs, train_lr);
    if (*prune) return cmd_prune(common, pf);
    if (*ft) return cmd_finetune(common, ft_model, ft_epochs, ft_lr);
    if (*ev) return cmd_eval(common, ev_model, ev_train);
    if (*cost) return cmd_cost(common, cost_model, cost_ref);
    if (*plot) return cmd_plot(common, plot_model, plot_ref, plot_title);
    if (*bench) return cmd_bench(common, bench_model, bo);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
