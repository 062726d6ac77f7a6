#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "icd/tensor.hpp"

namespace icd {

enum class DatasetKind { kSynthetic, kCifar10, kCifar100 };

const char* dataset_kind_str(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& text);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kSynthetic;
  std::size_t num_classes = 8;
  std::size_t image_size = 32;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t seed = 1;
  double noise_sigma = 0.25;  // synthetic only
  std::string path;           // cifar only

  void validate() const;
};

/// Immutable in-memory dataset; raw pixel values in [0,1], channel-planar
/// row-major [N,3,S,S].
struct Dataset {
  std::size_t num_classes = 0;
  std::size_t image_size = 0;
  std::vector<double> train_images;
  std::vector<std::size_t> train_labels;
  std::vector<double> test_images;
  std::vector<std::size_t> test_labels;

  std::size_t train_count() const { return train_labels.size(); }
  std::size_t test_count() const { return test_labels.size(); }
  std::size_t image_elems() const { return 3 * image_size * image_size; }
};

struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

/// Per-channel mean and standard deviation over the training images.
ChannelStats compute_channel_stats(const Dataset& ds);

struct Batch {
  Tensor images;  // [b,3,S,S], normalized
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // positions in the source split
};

/// Prototype-plus-noise classification set, fully determined by the seed.
Dataset synth_generate(const DatasetSpec& spec);

/// Raw records of one CIFAR binary file. cifar10 records are 1 label byte +
/// 3072 pixel bytes; cifar100 records carry coarse then fine label bytes and
/// the fine label is kept. Pixels are row-major R,G,B planes mapped to [0,1].
struct CifarRecords {
  std::size_t num_classes = 0;
  std::vector<double> images;  // [N,3,32,32]
  std::vector<std::size_t> labels;
};
CifarRecords cifar_read(const std::filesystem::path& path, DatasetKind variant);

/// Builds the train/test splits of `spec` (synthetic generation or the first
/// train_size + test_size records of the CIFAR file).
Dataset load_dataset(const DatasetSpec& spec);

enum class Split { kTrain, kTest };

/// One epoch of batches. Train epochs shuffle with a seed derived from
/// (seed, epoch); augmentation (train only) is a horizontal flip with
/// probability 0.5 and a random crop from 4-pixel reflect padding.
/// Evaluation epochs are unshuffled and unaugmented.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, Split split, std::size_t batch_size, const ChannelStats& stats,
                std::uint64_t seed, std::size_t epoch, bool shuffle, bool augment);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  void reset();

 private:
  const Dataset& ds_;
  Split split_;
  std::size_t batch_size_;
  ChannelStats stats_;
  std::uint64_t seed_;
  std::size_t epoch_;
  bool augment_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Writes the dataset as four ICDT blobs (train images, train labels, test
/// images, test labels) for cross-implementation fixtures.
void export_dataset_fixture(const Dataset& ds, const std::filesystem::path& path);
Dataset import_dataset_fixture(const std::filesystem::path& path, std::size_t num_classes);

}  // namespace icd
