#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "gcp/architectures.hpp"
#include "gcp/data.hpp"
#include "gcp/errors.hpp"
#include "gcp/io.hpp"
#include "gcp/latency_bench.hpp"

using namespace gcp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("gcp_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

SavedModel sample_model() {
  SavedModel s{Model(fixture::residual_net()), 42, {0.4f, 0.5f, 0.6f}, {0.2f, 0.25f, 0.3f}, Json::object()};
  fixture::randomize(s.model, 3);
  s.model.group_mask[0][1] = 0.25f;
  PruneMask mask = PruneMask::all_keep(s.model.groups);
  mask.keep[1][2] = false;
  apply_mask(s.model, mask);
  s.model.statistics_calibrated = true;
  return s;
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

TEST_CASE("model container") {
  TempDir dir("container");
  const fs::path path = dir.path / "m";
  SavedModel saved = sample_model();
  save_model(path, saved);

  SUBCASE("round trip is bit-identical") {
    SavedModel back = load_model(path);
    CHECK(back.model.spec() == saved.model.spec());
    CHECK(back.model.conv_weights == saved.model.conv_weights);
    CHECK(back.model.bn == saved.model.bn);
    CHECK(back.model.group_mask == saved.model.group_mask);
    CHECK(back.model.head_weights == saved.model.head_weights);
    CHECK(back.model.head_bias == saved.model.head_bias);
    for (std::size_t g = 0; g < back.model.groups.size(); ++g) CHECK(back.model.groups[g].kept == saved.model.groups[g].kept);
    CHECK(back.seed == 42);
    CHECK(back.norm_mean == saved.norm_mean);
    CHECK(back.norm_std == saved.norm_std);
    CHECK(back.model.statistics_calibrated);
  }
  SUBCASE("manifest byte lengths") {
    Json m = read_json(path / kManifestName);
    for (const auto& t : m["tensors"]) {
      std::size_t n = 1;
      for (auto d : t["shape"]) n *= d.get<std::size_t>();
      CHECK(t["bytes"].get<std::size_t>() == 4 * n);
      CHECK(fs::file_size(path / t["file"].get<std::string>()) == 4 * n);
    }
  }
  SUBCASE("one flipped byte is a checksum error naming the tensor") {
    Json m = read_json(path / kManifestName);
    const std::string name = m["tensors"][3]["name"];
    const fs::path blob = path / m["tensors"][3]["file"].get<std::string>();
    std::string bytes = slurp(blob);
    bytes[1] = static_cast<char>(bytes[1] ^ 0x40);
    spit(blob, bytes);
    try {
      load_model(path);
      FAIL("expected a checksum error");
    } catch (const ChecksumError& e) {
      CHECK(std::string(e.what()).find(name) != std::string::npos);
    }
  }
  SUBCASE("missing blob") {
    Json m = read_json(path / kManifestName);
    fs::remove(path / m["tensors"][0]["file"].get<std::string>());
    CHECK_THROWS_AS(load_model(path), MissingBlobError);
  }
  SUBCASE("missing manifest") {
    fs::remove(path / kManifestName);
    CHECK_THROWS_AS(load_model(path), MissingBlobError);
  }
  SUBCASE("version mismatch") {
    Json m = read_json(path / kManifestName);
    m["version"] = kContainerVersion + 1;
    write_json(path / kManifestName, m);
    CHECK_THROWS_AS(load_model(path), VersionError);
  }
  SUBCASE("truncated blob") {
    Json m = read_json(path / kManifestName);
    const fs::path blob = path / m["tensors"][2]["file"].get<std::string>();
    fs::resize_file(blob, fs::file_size(blob) - 4);
    CHECK_THROWS_AS(load_model(path), TruncatedError);
  }
  SUBCASE("the distinct errors are all format errors") {
    fs::remove(path / kManifestName);
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
}

TEST_CASE("spec json") {
  NetworkSpec spec = resnet8_spec();
  CHECK(spec_from_json(spec_to_json(spec)) == spec);
  Json bad = spec_to_json(spec);
  bad["layers"][1]["kind"] = "pool3d";
  CHECK_THROWS_AS(spec_from_json(bad), ConfigError);
}

TEST_CASE("run config") {
  TempDir dir("config");
  fs::create_directories(dir.path / "data");
  SUBCASE("relative paths and fields") {
    spit(dir.path / "run.json", R"({"dataset": {"kind": "cifar10", "path": "data", "subset_size": 500},
      "architecture": "convnet6", "seed": 7, "objective": "params",
      "gcp": {"eta": 0.3, "iterations": 3}, "train": {"epochs": 4}})");
    RunConfig c = load_run_config(dir.path / "run.json");
    CHECK(fs::equivalent(c.dataset_dir, dir.path / "data"));
    CHECK(c.subset_size == 500);
    CHECK(c.architecture == "convnet6");
    CHECK(c.seed == 7);
    CHECK(c.objective == "params");
    CHECK(c.gcp.eta == doctest::Approx(0.3));
    CHECK(c.gcp.iterations == 3);
    CHECK(c.train.epochs == 4);
  }
  SUBCASE("unknown key") {
    spit(dir.path / "run.json", R"({"dataset": {"kind": "cifar10", "path": "data"}, "learning_rate": 1})");
    CHECK_THROWS_AS(load_run_config(dir.path / "run.json"), ConfigError);
  }
  SUBCASE("missing referenced path") {
    spit(dir.path / "run.json", R"({"dataset": {"kind": "cifar10", "path": "nowhere"}})");
    CHECK_THROWS_AS(load_run_config(dir.path / "run.json"), ConfigError);
  }
}

TEST_CASE("reports") {
  TempDir dir("reports");
  SUBCASE("cost text against itself") {
    CostReport r = total_cost(resnet8_spec(), Objective::flops());
    CHECK(cost_text(r, &r).find("reduction: 1.00x") != std::string::npos);
    CHECK(reduction_factor(r, r) == doctest::Approx(1.0));
    write_cost_csv(dir.path / "cost.csv", r, &r);
    CHECK(slurp(dir.path / "cost.csv").find(',') != std::string::npos);
  }
  SUBCASE("metrics csv") {
    write_metrics_csv(dir.path / "m.csv", {{1, 2.5, 0.25}, {2, 1.25, 0.5}});
    CHECK(slurp(dir.path / "m.csv") == "epoch,train_loss,eval_top1\n1,2.5,0.25\n2,1.25,0.5\n");
  }
  SUBCASE("pattern rows follow the materialized widths") {
    Model model(resnet8_spec());
    PruneMask mask = PruneMask::all_keep(model.groups);
    for (std::size_t g = 0; g < mask.keep.size(); ++g) mask.keep[g][0] = mask.keep[g][3] = false;
    Model small = materialize(model, mask);
    auto rows = pattern_rows(model.spec(), small.spec());
    std::size_t convs = 0;
    for (const auto& l : small.spec().layers) {
      if (l.kind != LayerKind::Conv) continue;
      REQUIRE(convs < rows.size());
      CHECK(rows[convs].kept == l.conv.out_channels);
      CHECK(rows[convs].original == model.spec().layer(l.id).conv.out_channels);
      CHECK(rows[convs].kernel == l.conv.kernel);
      ++convs;
    }
    CHECK(rows.size() == convs);
    write_pattern_csv(dir.path / "p.csv", rows);
    const std::string csv = slurp(dir.path / "p.csv");
    CHECK(csv.rfind("layer_index,layer_id,kernel,original_channels,kept_channels\n", 0) == 0);
    CHECK(csv.find("1x1") != std::string::npos);
  }
  SUBCASE("svg") {
    Model model(resnet8_spec());
    auto rows = pattern_rows(model);
    for (const auto& r : rows) CHECK(r.kept == r.original);
    const std::string svg = pattern_svg(rows, "unpruned");
    CHECK(svg.find("size of output channels") != std::string::npos);
    CHECK(svg.find("index of convolution layer") != std::string::npos);
    CHECK(svg.find("<svg") != std::string::npos);
  }
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(258048) == "258048");
}

TEST_CASE("datasets") {
  TempDir dir("data");
  SUBCASE("synthetic cifar round trip") {
    write_synthetic_cifar10(dir.path, 200, 50, 1);
    DatasetSplit s = load_dataset(DatasetKind::Cifar10Binary, dir.path, 100, 3);
    CHECK(s.train.size() == 100);
    CHECK(s.test.size() == 50);
    CHECK(s.train.images.shape() == Shape{100, 3, 32, 32});
    std::map<int, int> per_class;
    for (int l : s.train.labels) ++per_class[l];
    for (const auto& [l, n] : per_class) CHECK(n == 10);
    // normalized with the subset's own statistics
    double mean = 0.0;
    for (std::size_t i = 0; i < 32 * 32; ++i)
      for (std::size_t n = 0; n < 100; ++n) mean += s.train.images[(n * 3) * 1024 + i];
    CHECK(std::abs(mean / (100.0 * 1024.0)) < 1e-3);
  }
  SUBCASE("short cifar file") {
    write_synthetic_cifar10(dir.path, 20, 10, 1);
    fs::resize_file(dir.path / "test_batch.bin", 3073 * 10 - 5);
    CHECK_THROWS_AS(read_cifar10({dir.path / "test_batch.bin"}), FormatError);
  }
  SUBCASE("idx images") {
    {
      std::ofstream img(dir.path / "img", std::ios::binary);
      write_be32(img, 0x803);
      write_be32(img, 2);
      write_be32(img, 2);
      write_be32(img, 2);
      const char px[8] = {1, 2, 3, 4, 5, 6, 7, 8};
      img.write(px, 8);
      std::ofstream lab(dir.path / "lab", std::ios::binary);
      write_be32(lab, 0x801);
      write_be32(lab, 2);
      const char l[2] = {3, 7};
      lab.write(l, 2);
    }
    RawImages r = read_idx(dir.path / "img", dir.path / "lab");
    CHECK(r.count() == 2);
    CHECK(r.channels == 1);
    CHECK(r.pixels[5] == 6);
    CHECK(r.labels == std::vector<int>{3, 7});
    CHECK_THROWS_AS(read_idx(dir.path / "lab", dir.path / "lab"), FormatError);
  }
  SUBCASE("stratified subset") {
    std::vector<int> labels;
    for (int i = 0; i < 5000; ++i) labels.push_back(i % 10);
    auto idx = stratified_subset(labels, 10, 1000, 4);
    std::map<int, int> per_class;
    for (auto i : idx) ++per_class[labels[i]];
    for (int c = 0; c < 10; ++c) CHECK(per_class[c] == 100);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
  }
  SUBCASE("batch order depends on seed and epoch only") {
    Dataset d;
    d.images = Tensor({10, 1, 1, 1});
    d.labels.assign(10, 0);
    BatchStream a(d, 4, 9), b(d, 4, 9);
    CHECK(a.epoch(3) == b.epoch(3));
    CHECK(a.epoch(0) != a.epoch(1));
    std::size_t seen = 0;
    for (const auto& batch : a.epoch(0)) {
      CHECK(batch.size() >= 2);
      seen += batch.size();
    }
    CHECK(seen == 10);
  }
}

TEST_CASE("latency benchmark") {
  SUBCASE("grid widths") {
    CHECK(bench_widths(16, {0.25, 0.5}) == std::vector<std::size_t>{1, 4, 8, 16});
    CHECK_THROWS_AS(bench_widths(16, {1.5}), InputError);
    CHECK_THROWS_AS(bench_widths(16, {0.0}), InputError);
  }
  SUBCASE("table covers the spec and reproduces measured nodes") {
    NetworkSpec spec = fixture::two_conv_net(4, 6, 8);
    BenchOptions opt;
    opt.batch = 2;
    opt.repeats = 1;
    opt.warmup = 1;
    opt.grid = {0.5};
    BenchResult r = bench_latency(spec, opt);
    r.table.check_covers(spec);
    for (const auto& [id, grid] : r.table.layers()) {
      for (const auto& [mn, v] : grid.values) {
        CHECK(r.table.lookup(id, static_cast<double>(mn.first), static_cast<double>(mn.second)) == v);
      }
    }
  }
  SUBCASE("monotonicity warnings") {
    LatencyTable t;
    t.set(1, 1, 1, 5.0);
    t.set(1, 2, 1, 3.0);
    CHECK(monotonicity_warnings(t).size() == 1);
  }
}
