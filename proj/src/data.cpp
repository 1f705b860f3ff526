#include "gcp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "gcp/errors.hpp"

namespace gcp {

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "mnist" || name == "mnist-idx") return DatasetKind::MnistIdx;
  if (name == "cifar10" || name == "cifar10-binary") return DatasetKind::Cifar10Binary;
  throw InputError("unknown dataset kind '" + name + "' (expected mnist or cifar10)");
}

const char* dataset_kind_name(DatasetKind kind) {
  return kind == DatasetKind::MnistIdx ? "mnist" : "cifar10";
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::uint32_t big_endian_u32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

}  // namespace

RawImages read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  if (images.size() < 16) throw FormatError(images_path.string() + ": short IDX header");
  if (labels.size() < 8) throw FormatError(labels_path.string() + ": short IDX header");
  if (big_endian_u32(images, 0) != kIdxImageMagic) throw FormatError(images_path.string() + ": bad IDX image magic");
  if (big_endian_u32(labels, 0) != kIdxLabelMagic) throw FormatError(labels_path.string() + ": bad IDX label magic");
  const std::size_t count = big_endian_u32(images, 4);
  const std::size_t rows = big_endian_u32(images, 8), cols = big_endian_u32(images, 12);
  if (big_endian_u32(labels, 4) != count) throw FormatError("IDX image and label counts differ");
  if (images.size() < 16 + count * rows * cols) throw FormatError(images_path.string() + ": short file");
  if (labels.size() < 8 + count) throw FormatError(labels_path.string() + ": short file");
  RawImages raw;
  raw.channels = 1;
  raw.height = rows;
  raw.width = cols;
  raw.pixels.assign(images.begin() + 16, images.begin() + 16 + static_cast<std::ptrdiff_t>(count * rows * cols));
  raw.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) raw.labels.push_back(labels[8 + i]);
  return raw;
}

RawImages read_cifar10(const std::vector<std::filesystem::path>& batches) {
  RawImages raw;
  raw.channels = 3;
  raw.height = 32;
  raw.width = 32;
  for (const auto& path : batches) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
      throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                        std::to_string(kCifarRecord) + "-byte CIFAR-10 record");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      if (bytes[off] > 9) throw FormatError(path.string() + ": label byte out of range");
      raw.labels.push_back(bytes[off]);
      raw.pixels.insert(raw.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                        bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecord));
    }
  }
  return raw;
}

std::vector<std::size_t> stratified_subset(const std::vector<int>& labels, std::size_t classes,
                                           std::size_t subset_size, std::uint64_t seed) {
  if (subset_size == 0 || subset_size >= labels.size()) {
    std::vector<std::size_t> all(labels.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t want = subset_size / classes + (c < subset_size % classes ? 1 : 0);
    auto& pool = by_class[c];
    if (pool.size() < want) {
      throw InputError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) + " images, " +
                       std::to_string(want) + " requested");
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

void channel_statistics(const RawImages& raw, const std::vector<std::size_t>& indices, std::vector<float>& mean,
                        std::vector<float>& stddev) {
  const std::size_t plane = raw.height * raw.width;
  mean.assign(raw.channels, 0.0f);
  stddev.assign(raw.channels, 1.0f);
  for (std::size_t c = 0; c < raw.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t idx : indices) {
      const std::uint8_t* p = raw.pixels.data() + idx * raw.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(indices.size() * plane);
    const double mu = sum / n;
    const double var = std::max(sq / n - mu * mu, 1e-12);
    mean[c] = static_cast<float>(mu);
    stddev[c] = static_cast<float>(std::sqrt(var));
  }
}

Dataset normalize(const RawImages& raw, std::size_t classes, const std::vector<std::size_t>& indices,
                  std::vector<float> mean, std::vector<float> stddev) {
  if (indices.empty()) throw InputError("dataset selection is empty");
  Dataset out;
  out.classes = classes;
  out.images = Tensor({indices.size(), raw.channels, raw.height, raw.width});
  const std::size_t plane = raw.height * raw.width;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::uint8_t* src = raw.pixels.data() + indices[i] * raw.image_size();
    float* dst = out.images.data().data() + i * raw.image_size();
    for (std::size_t c = 0; c < raw.channels; ++c) {
      for (std::size_t k = 0; k < plane; ++k) {
        dst[c * plane + k] = (static_cast<float>(src[c * plane + k]) / 255.0f - mean[c]) / stddev[c];
      }
    }
    out.labels.push_back(raw.labels[indices[i]]);
  }
  out.mean = std::move(mean);
  out.stddev = std::move(stddev);
  return out;
}

DatasetSplit load_dataset(DatasetKind kind, const std::filesystem::path& dir, std::size_t subset_size,
                          std::uint64_t seed, std::size_t test_size, std::vector<float> mean,
                          std::vector<float> stddev) {
  RawImages train, test;
  if (kind == DatasetKind::MnistIdx) {
    train = read_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    test = read_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  } else {
    std::vector<std::filesystem::path> batches;
    for (int b = 1; b <= 5; ++b) {
      auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
      if (std::filesystem::exists(p)) batches.push_back(p);
    }
    if (batches.empty()) throw FormatError(dir.string() + ": no data_batch_*.bin files");
    train = read_cifar10(batches);
    test = read_cifar10({dir / "test_batch.bin"});
  }
  const std::size_t classes = 10;
  auto train_idx = stratified_subset(train.labels, classes, subset_size, seed);
  auto test_idx = stratified_subset(test.labels, classes, test_size, seed + 1);
  if (mean.empty() || stddev.empty()) {
    channel_statistics(train, train_idx, mean, stddev);
  } else if (mean.size() != train.channels || stddev.size() != train.channels) {
    throw InputError("normalization statistics have " + std::to_string(mean.size()) + " channels, images have " +
                     std::to_string(train.channels));
  }
  DatasetSplit split;
  split.train = normalize(train, classes, train_idx, mean, stddev);
  split.test = normalize(test, classes, test_idx, mean, stddev);
  return split;
}

// ---------------------------------------------------------------------------

BatchStream::BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : data_(&data), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 2) throw InputError("batch size must be at least 2");
  if (data.size() < 2) throw InputError("dataset needs at least 2 images");
}

std::size_t BatchStream::batches_per_epoch() const {
  const std::size_t n = data_->size();
  std::size_t full = n / batch_size_;
  std::size_t rest = n % batch_size_;
  if (rest >= 2 || full == 0) return full + 1;
  return full;
}

std::vector<std::vector<std::size_t>> BatchStream::epoch(std::size_t epoch_index) const {
  std::vector<std::size_t> order(data_->size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle_) {
    std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + epoch_index);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size_) {
    std::size_t end = std::min(order.size(), start + batch_size_);
    if (end - start < 2 && !batches.empty()) {
      // A single trailing image would break batch statistics; fold it in.
      batches.back().insert(batches.back().end(), order.begin() + static_cast<std::ptrdiff_t>(start), order.end());
      break;
    }
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Batch BatchStream::gather(const std::vector<std::size_t>& indices) const {
  const Tensor& src = data_->images;
  const std::size_t image = src.dim(1) * src.dim(2) * src.dim(3);
  Batch batch;
  batch.images = Tensor({indices.size(), src.dim(1), src.dim(2), src.dim(3)});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data().data() + indices[i] * image, image, batch.images.data().data() + i * image);
    batch.labels.push_back(data_->labels[indices[i]]);
  }
  return batch;
}

// ---------------------------------------------------------------------------

namespace {

// Class c: grating orientation (c % 5) * 36 deg, frequency from (c / 5), over a
// random colour, with a weaker random-orientation distractor and pixel noise.
void synth_image(int label, std::mt19937_64& rng, std::uint8_t* out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.22);
  const double pi = std::numbers::pi;
  const double theta = (label % 5) * pi / 5.0 + (unit(rng) - 0.5) * 0.25;
  const double freq = (label < 5 ? 3.0 : 5.0) * (0.9 + 0.2 * unit(rng));
  const double phase = unit(rng) * 2.0 * pi;
  const double amp = 0.25 + 0.2 * unit(rng);
  const double d_theta = unit(rng) * pi, d_freq = 2.0 + 4.0 * unit(rng), d_phase = unit(rng) * 2.0 * pi;
  const double d_amp = 0.5 * amp * unit(rng);
  const double cx = 8.0 + 16.0 * unit(rng), cy = 8.0 + 16.0 * unit(rng), radius = 9.0 + 8.0 * unit(rng);
  double colour[3];
  for (double& c : colour) c = 0.4 + 0.6 * unit(rng);
  const double base = (unit(rng) - 0.5) * 0.3;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const double u = x / 32.0, v = y / 32.0;
      const double r2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (radius * radius);
      const double envelope = std::exp(-r2);
      const double g = std::sin(2.0 * pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
      const double d = std::sin(2.0 * pi * d_freq * (u * std::cos(d_theta) + v * std::sin(d_theta)) + d_phase);
      for (int c = 0; c < 3; ++c) {
        double value = base + envelope * amp * g * colour[c] + d_amp * d + noise(rng);
        double px = 128.0 + 127.0 * std::clamp(value, -1.0, 1.0);
        out[c * 1024 + y * 32 + x] = static_cast<std::uint8_t>(std::lround(px));
      }
    }
  }
}

void write_synthetic_batch(const std::filesystem::path& path, std::size_t count, std::mt19937_64& rng,
                           std::size_t& next_label) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  std::vector<std::uint8_t> record(kCifarRecord);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(next_label++ % 10);
    record[0] = static_cast<std::uint8_t>(label);
    synth_image(label, rng, record.data() + 1);
    out.write(reinterpret_cast<const char*>(record.data()), static_cast<std::streamsize>(record.size()));
  }
}

}  // namespace

void write_synthetic_cifar10(const std::filesystem::path& dir, std::size_t train_count, std::size_t test_count,
                             std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::size_t label = 0;
  for (int b = 1; b <= 5; ++b) {
    std::size_t count = train_count / 5 + (static_cast<std::size_t>(b) <= train_count % 5 ? 1 : 0);
    write_synthetic_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), count, rng, label);
  }
  label = 0;
  write_synthetic_batch(dir / "test_batch.bin", test_count, rng, label);
}

}  // namespace gcp
