#include "icd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "icd/rng.hpp"
#include "icd/tensor_io.hpp"

namespace icd {

namespace {

// Stream tags for deriving independent random sequences from one seed.
constexpr std::uint64_t kStreamPrototypes = 101;
constexpr std::uint64_t kStreamTrain = 102;
constexpr std::uint64_t kStreamTest = 103;
constexpr std::uint64_t kStreamShuffle = 104;
constexpr std::uint64_t kStreamAugment = 105;

constexpr std::size_t kPadPixels = 4;

}  // namespace

const char* dataset_kind_str(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kSynthetic: return "synthetic";
    case DatasetKind::kCifar10: return "cifar10";
    case DatasetKind::kCifar100: return "cifar100";
  }
  return "?";
}

DatasetKind parse_dataset_kind(const std::string& text) {
  if (text == "synthetic") return DatasetKind::kSynthetic;
  if (text == "cifar10") return DatasetKind::kCifar10;
  if (text == "cifar100") return DatasetKind::kCifar100;
  throw ConfigError("unknown dataset kind '" + text + "'");
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("DatasetSpec: need at least 2 classes");
  if (image_size == 0) throw ConfigError("DatasetSpec: image size must be positive");
  if (train_size == 0 || test_size == 0) throw ConfigError("DatasetSpec: split sizes must be positive");
  if (kind != DatasetKind::kSynthetic && path.empty()) {
    throw ConfigError("DatasetSpec: cifar datasets need a path");
  }
  if (noise_sigma < 0.0) throw ConfigError("DatasetSpec: noise sigma must be non-negative");
}

ChannelStats compute_channel_stats(const Dataset& ds) {
  ChannelStats stats;
  const std::size_t plane = ds.image_size * ds.image_size;
  const std::size_t n = ds.train_count();
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.train_images.data() + i * ds.image_elems() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) sum += p[j];
    }
    const double mean = sum / static_cast<double>(n * plane);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.train_images.data() + i * ds.image_elems() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
    }
    stats.mean[c] = mean;
    const double var = sq / static_cast<double>(n * plane);
    stats.stddev[c] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

namespace {

/// Fixed multi-patch color pattern for one class.
std::vector<double> make_prototype(std::uint64_t seed, std::size_t k, std::size_t s) {
  Rng rng = Rng::derive(seed, kStreamPrototypes, k);
  const std::size_t plane = s * s;
  std::vector<double> img(3 * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.05, 0.35);
    std::fill(img.begin() + c * plane, img.begin() + (c + 1) * plane, base);
  }
  const std::size_t patches = 3 + rng.below(2);
  for (std::size_t pi = 0; pi < patches; ++pi) {
    const std::size_t side = s / 4 + rng.below(std::max<std::size_t>(s / 4, 1));
    const std::size_t y0 = rng.below(s - side + 1);
    const std::size_t x0 = rng.below(s - side + 1);
    double color[3];
    for (double& c : color) c = rng.uniform(0.3, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = y0; y < y0 + side; ++y) {
        for (std::size_t x = x0; x < x0 + side; ++x) {
          img[c * plane + y * s + x] = color[c];
        }
      }
    }
  }
  return img;
}

void fill_split(const DatasetSpec& spec, const std::vector<std::vector<double>>& prototypes,
                std::uint64_t stream, std::size_t count, std::vector<double>& images,
                std::vector<std::size_t>& labels) {
  Rng rng = Rng::derive(spec.seed, stream);
  const std::size_t s = spec.image_size;
  const std::size_t plane = s * s;
  images.resize(count * 3 * plane);
  labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % spec.num_classes;
    labels[i] = label;
    const std::vector<double>& proto = prototypes[label];
    const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(rng.below(5)) - 2;
    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(rng.below(5)) - 2;
    double* dst = images.data() + i * 3 * plane;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < s; ++y) {
        const std::size_t sy = static_cast<std::size_t>(
            std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) + dy, 0,
                                       static_cast<std::ptrdiff_t>(s) - 1));
        for (std::size_t x = 0; x < s; ++x) {
          const std::size_t sx = static_cast<std::size_t>(
              std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + dx, 0,
                                         static_cast<std::ptrdiff_t>(s) - 1));
          double v = proto[c * plane + sy * s + sx];
          if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
          dst[c * plane + y * s + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
}

}  // namespace

Dataset synth_generate(const DatasetSpec& spec) {
  spec.validate();
  if (spec.kind != DatasetKind::kSynthetic) {
    throw ConfigError("synth_generate: dataset kind is not synthetic");
  }
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.image_size = spec.image_size;
  std::vector<std::vector<double>> prototypes;
  prototypes.reserve(spec.num_classes);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    prototypes.push_back(make_prototype(spec.seed, k, spec.image_size));
  }
  fill_split(spec, prototypes, kStreamTrain, spec.train_size, ds.train_images, ds.train_labels);
  fill_split(spec, prototypes, kStreamTest, spec.test_size, ds.test_images, ds.test_labels);
  return ds;
}

CifarRecords cifar_read(const std::filesystem::path& path, DatasetKind variant) {
  if (variant == DatasetKind::kSynthetic) throw ConfigError("cifar_read: variant must be a CIFAR kind");
  const std::size_t label_bytes = variant == DatasetKind::kCifar10 ? 1 : 2;
  const std::size_t pixel_bytes = 3072;
  const std::size_t record = label_bytes + pixel_bytes;
  const std::size_t num_classes = variant == DatasetKind::kCifar10 ? 10 : 100;

  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw FormatError("cifar_read: cannot open " + path.string());
  const std::size_t size = static_cast<std::size_t>(is.tellg());
  if (size == 0 || size % record != 0) {
    throw FormatError("cifar_read: file size " + std::to_string(size) +
                      " is not a multiple of the record length " + std::to_string(record) +
                      " (stray bytes start at offset " + std::to_string(size - size % record) +
                      ")");
  }
  is.seekg(0);
  const std::size_t count = size / record;

  CifarRecords out;
  out.num_classes = num_classes;
  out.images.resize(count * pixel_bytes);
  out.labels.resize(count);
  std::vector<unsigned char> buf(record);
  for (std::size_t i = 0; i < count; ++i) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(record));
    if (!is) throw FormatError("cifar_read: truncated record at offset " + std::to_string(i * record));
    const std::size_t label = buf[label_bytes - 1];  // fine label for cifar100
    if (label >= num_classes) {
      throw FormatError("cifar_read: label " + std::to_string(label) + " out of range at offset " +
                        std::to_string(i * record));
    }
    out.labels[i] = label;
    double* dst = out.images.data() + i * pixel_bytes;
    for (std::size_t j = 0; j < pixel_bytes; ++j) {
      dst[j] = static_cast<double>(buf[label_bytes + j]) / 255.0;
    }
  }
  return out;
}

Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.kind == DatasetKind::kSynthetic) return synth_generate(spec);

  const CifarRecords records = cifar_read(spec.path, spec.kind);
  if (records.labels.size() < spec.train_size + spec.test_size) {
    throw ConfigError("load_dataset: file holds " + std::to_string(records.labels.size()) +
                      " records, need " + std::to_string(spec.train_size + spec.test_size));
  }
  Dataset ds;
  ds.num_classes = records.num_classes;
  ds.image_size = 32;
  const std::size_t elems = ds.image_elems();
  ds.train_images.assign(records.images.begin(),
                         records.images.begin() + static_cast<std::ptrdiff_t>(spec.train_size * elems));
  ds.train_labels.assign(records.labels.begin(),
                         records.labels.begin() + static_cast<std::ptrdiff_t>(spec.train_size));
  ds.test_images.assign(
      records.images.begin() + static_cast<std::ptrdiff_t>(spec.train_size * elems),
      records.images.begin() + static_cast<std::ptrdiff_t>((spec.train_size + spec.test_size) * elems));
  ds.test_labels.assign(
      records.labels.begin() + static_cast<std::ptrdiff_t>(spec.train_size),
      records.labels.begin() + static_cast<std::ptrdiff_t>(spec.train_size + spec.test_size));
  return ds;
}

BatchIterator::BatchIterator(const Dataset& ds, Split split, std::size_t batch_size,
                             const ChannelStats& stats, std::uint64_t seed, std::size_t epoch,
                             bool shuffle, bool augment)
    : ds_(ds),
      split_(split),
      batch_size_(batch_size),
      stats_(stats),
      seed_(seed),
      epoch_(epoch),
      augment_(augment && split == Split::kTrain) {
  if (batch_size_ == 0) throw ConfigError("BatchIterator: batch size must be positive");
  const std::size_t n = split_ == Split::kTrain ? ds_.train_count() : ds_.test_count();
  order_.resize(n);
  for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  if (shuffle && split_ == Split::kTrain) {
    Rng rng = Rng::derive(seed_, kStreamShuffle, epoch_);
    rng.shuffle(order_);
  }
}

std::size_t BatchIterator::batch_count() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

void BatchIterator::reset() { cursor_ = 0; }

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t begin = cursor_;
  const std::size_t end = std::min(order_.size(), begin + batch_size_);
  cursor_ = end;
  const std::size_t b = end - begin;
  const std::size_t s = ds_.image_size;
  const std::size_t plane = s * s;
  const std::size_t elems = ds_.image_elems();
  const std::vector<double>& src_images =
      split_ == Split::kTrain ? ds_.train_images : ds_.test_images;
  const std::vector<std::size_t>& src_labels =
      split_ == Split::kTrain ? ds_.train_labels : ds_.test_labels;

  // Augmentation draws come from a (seed, epoch)-derived stream advanced per
  // sample in batch order, so the stream does not depend on batch size.
  Rng aug = Rng::derive(seed_, kStreamAugment, epoch_ * 1000003 + begin);

  Batch batch;
  batch.labels.resize(b);
  batch.indices.resize(b);
  std::vector<double> data(b * elems);

  std::vector<double> scratch;
  if (augment_) scratch.resize(elems);

  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t idx = order_[begin + i];
    batch.indices[i] = idx;
    batch.labels[i] = src_labels[idx];
    const double* src = src_images.data() + idx * elems;
    double* dst = data.data() + i * elems;

    if (augment_) {
      const bool flip = aug.uniform() < 0.5;
      const std::size_t oy = aug.below(2 * kPadPixels + 1);
      const std::size_t ox = aug.below(2 * kPadPixels + 1);
      // Reflect-pad by kPadPixels, crop an s x s window at (oy, ox),
      // flipping horizontally first when drawn.
      auto reflect = [s](std::ptrdiff_t v) {
        if (v < 0) v = -v;
        const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(s) - 1;
        if (v > last) v = 2 * last - v;
        return static_cast<std::size_t>(v);
      };
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < s; ++y) {
          const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y + oy) -
                                         static_cast<std::ptrdiff_t>(kPadPixels));
          for (std::size_t x = 0; x < s; ++x) {
            std::size_t sx = reflect(static_cast<std::ptrdiff_t>(x + ox) -
                                     static_cast<std::ptrdiff_t>(kPadPixels));
            if (flip) sx = s - 1 - sx;
            scratch[c * plane + y * s + x] = src[c * plane + sy * s + sx];
          }
        }
      }
      src = scratch.data();
    }

    for (std::size_t c = 0; c < 3; ++c) {
      const double mean = stats_.mean[c];
      const double inv_std = 1.0 / stats_.stddev[c];
      for (std::size_t j = 0; j < plane; ++j) {
        dst[c * plane + j] = (src[c * plane + j] - mean) * inv_std;
      }
    }
  }
  batch.images = Tensor::from_data({b, 3, s, s}, std::move(data));
  return batch;
}

void export_dataset_fixture(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("export_dataset_fixture: cannot open " + path.string());
  const std::size_t s = ds.image_size;
  auto labels_tensor = [](const std::vector<std::size_t>& labels) {
    std::vector<double> d(labels.begin(), labels.end());
    return Tensor::from_data({labels.size()}, std::move(d));
  };
  write_tensor(os, Tensor::from_data({ds.train_count(), 3, s, s}, ds.train_images));
  write_tensor(os, labels_tensor(ds.train_labels));
  write_tensor(os, Tensor::from_data({ds.test_count(), 3, s, s}, ds.test_images));
  write_tensor(os, labels_tensor(ds.test_labels));
}

Dataset import_dataset_fixture(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("import_dataset_fixture: cannot open " + path.string());
  const Tensor train_images = read_tensor(is);
  const Tensor train_labels = read_tensor(is);
  const Tensor test_images = read_tensor(is);
  const Tensor test_labels = read_tensor(is);
  if (train_images.rank() != 4 || train_images.shape()[1] != 3) {
    throw FormatError("dataset fixture: bad train image tensor shape " +
                      shape_str(train_images.shape()));
  }
  Dataset ds;
  ds.num_classes = num_classes;
  ds.image_size = train_images.shape()[2];
  ds.train_images.assign(train_images.data().begin(), train_images.data().end());
  ds.test_images.assign(test_images.data().begin(), test_images.data().end());
  auto to_labels = [num_classes](const Tensor& t) {
    std::vector<std::size_t> labels(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double v = t.data()[i];
      if (v < 0.0 || v >= static_cast<double>(num_classes) || v != std::floor(v)) {
        throw FormatError("dataset fixture: bad label value");
      }
      labels[i] = static_cast<std::size_t>(v);
    }
    return labels;
  };
  ds.train_labels = to_labels(train_labels);
  ds.test_labels = to_labels(test_labels);
  return ds;
}

}  // namespace icd
