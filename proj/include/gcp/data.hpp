#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gcp/tensor.hpp"

namespace gcp {

enum class DatasetKind { MnistIdx, Cifar10Binary };

DatasetKind parse_dataset_kind(const std::string& name);
const char* dataset_kind_name(DatasetKind kind);

// 8-bit images as stored on disk.
struct RawImages {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // (N, C, H, W)
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
};

// IDX pair; image magic 0x00000803, label magic 0x00000801 (big-endian header).
RawImages read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
RawImages read_cifar10(const std::vector<std::filesystem::path>& batches);

struct Dataset {
  Tensor images;  // normalized, (N, C, H, W)
  std::vector<int> labels;
  std::size_t classes = 10;
  std::vector<float> mean;    // per channel, in [0,1] pixel units
  std::vector<float> stddev;  // per channel

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

// `subset_size` images per class-stratified sample of the training split
// (0 = everything). Normalization statistics come from that subset and are
// applied to both splits unless `mean`/`stddev` are given (a saved model's
// statistics). `test_size` 0 keeps the full test split.
DatasetSplit load_dataset(DatasetKind kind, const std::filesystem::path& dir, std::size_t subset_size,
                          std::uint64_t seed, std::size_t test_size = 0, std::vector<float> mean = {},
                          std::vector<float> stddev = {});

// Indices of a per-class sample: subset_size / classes of each class, the
// remainder spread over the lowest class ids. Sorted ascending.
std::vector<std::size_t> stratified_subset(const std::vector<int>& labels, std::size_t classes,
                                           std::size_t subset_size, std::uint64_t seed);

// Converts raw pixels with given per-channel statistics (pixel/255 units).
Dataset normalize(const RawImages& raw, std::size_t classes, const std::vector<std::size_t>& indices,
                  std::vector<float> mean, std::vector<float> stddev);

// Per-channel mean/std over the selected images, in pixel/255 units.
void channel_statistics(const RawImages& raw, const std::vector<std::size_t>& indices, std::vector<float>& mean,
                        std::vector<float>& stddev);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

// Deterministic shuffled mini-batches; the order of epoch e depends only on
// (seed, e). The last batch may be short but never below 2 images.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle = true);

  std::vector<std::vector<std::size_t>> epoch(std::size_t epoch_index) const;
  Batch gather(const std::vector<std::size_t>& indices) const;
  std::size_t batches_per_epoch() const;
  const Dataset& data() const { return *data_; }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

// Writes data_batch_1..5.bin and test_batch.bin in CIFAR-10 binary layout,
// filled with a procedurally generated 10-class texture task.
void write_synthetic_cifar10(const std::filesystem::path& dir, std::size_t train_count, std::size_t test_count,
                             std::uint64_t seed);

}  // namespace gcp
