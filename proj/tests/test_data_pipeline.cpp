#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "icd/data.hpp"

using namespace icd;

namespace {

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.image_size = 16;
  spec.train_size = 64;
  spec.test_size = 32;
  spec.seed = 9;
  return spec;
}

}  // namespace

TEST_CASE("synthetic generation is byte-identical for equal seeds") {
  const Dataset a = synth_generate(small_spec());
  const Dataset b = synth_generate(small_spec());
  CHECK(a.train_images == b.train_images);
  CHECK(a.train_labels == b.train_labels);
  CHECK(a.test_images == b.test_images);
  CHECK(a.test_labels == b.test_labels);

  DatasetSpec other = small_spec();
  other.seed = 10;
  const Dataset c = synth_generate(other);
  CHECK(c.train_images != a.train_images);
}

TEST_CASE("sigma=0 samples are translations of their class prototype") {
  DatasetSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  const Dataset ds = synth_generate(spec);
  const std::size_t s = spec.image_size;
  const std::size_t elems = 3 * s * s;

  // Group train samples by class; every pair within a class must agree up to
  // a +-2px translation, which we verify against the 25 translated variants
  // of the first sample of that class.
  for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
    std::size_t first = 0;
    while (ds.train_labels[first] != cls) ++first;
    const double* ref = ds.train_images.data() + first * elems;
    for (std::size_t i = first; i < ds.train_count(); ++i) {
      if (ds.train_labels[i] != cls) continue;
      const double* img = ds.train_images.data() + i * elems;
      bool matched = false;
      for (int dy = -4; dy <= 4 && !matched; ++dy) {
        for (int dx = -4; dx <= 4 && !matched; ++dx) {
          bool all_equal = true;
          for (std::size_t c = 0; c < 3 && all_equal; ++c) {
            for (std::size_t y = 2; y < s - 2 && all_equal; ++y) {
              for (std::size_t x = 2; x < s - 2; ++x) {
                const long sy = static_cast<long>(y) + dy;
                const long sx = static_cast<long>(x) + dx;
                if (sy < 0 || sy >= static_cast<long>(s) || sx < 0 || sx >= static_cast<long>(s)) {
                  continue;
                }
                if (std::abs(img[(c * s + y) * s + x] - ref[(c * s + sy) * s + sx]) > 1e-12) {
                  all_equal = false;
                  break;
                }
              }
            }
          }
          matched = all_equal;
        }
      }
      CHECK(matched);
    }
  }
}

TEST_CASE("a nearest-centroid classifier clears 90% on the default noise level") {
  DatasetSpec spec;
  spec.num_classes = 8;
  spec.image_size = 32;
  spec.train_size = 400;
  spec.test_size = 200;
  spec.seed = 1;
  spec.noise_sigma = 0.25;
  const Dataset ds = synth_generate(spec);
  const std::size_t elems = ds.image_elems();

  std::vector<std::vector<double>> centroid(spec.num_classes, std::vector<double>(elems, 0.0));
  std::vector<std::size_t> count(spec.num_classes, 0);
  for (std::size_t i = 0; i < ds.train_count(); ++i) {
    const std::size_t cls = ds.train_labels[i];
    for (std::size_t j = 0; j < elems; ++j) centroid[cls][j] += ds.train_images[i * elems + j];
    ++count[cls];
  }
  for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
    for (double& v : centroid[cls]) v /= static_cast<double>(count[cls]);
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.test_count(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
      double dist = 0.0;
      for (std::size_t j = 0; j < elems; ++j) {
        const double d = ds.test_images[i * elems + j] - centroid[cls][j];
        dist += d * d;
      }
      if (dist < best) {
        best = dist;
        arg = cls;
      }
    }
    if (arg == ds.test_labels[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(ds.test_count()) > 0.9);
}

TEST_CASE("cifar reader parses records and rejects malformed files") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "icd_test_cifar100.bin";

  // Three cifar100 records with known bytes.
  {
    std::ofstream os(path, std::ios::binary);
    for (int rec = 0; rec < 3; ++rec) {
      os.put(static_cast<char>(7));             // coarse label (ignored)
      os.put(static_cast<char>(10 + rec));      // fine label
      for (int j = 0; j < 3072; ++j) os.put(static_cast<char>((rec * 31 + j) % 256));
    }
  }
  const CifarRecords records = cifar_read(path, DatasetKind::kCifar100);
  REQUIRE(records.labels.size() == 3);
  CHECK(records.num_classes == 100);
  CHECK(records.labels[0] == 10);
  CHECK(records.labels[2] == 12);
  for (int rec = 0; rec < 3; ++rec) {
    for (int j = 0; j < 3072; ++j) {
      const double expected = static_cast<double>((rec * 31 + j) % 256) / 255.0;
      CHECK(std::abs(records.images[rec * 3072 + j] - expected) <= 1.0 / 255.0);
    }
  }

  // Truncated file: size no longer a record multiple.
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    for (int j = 0; j < 3074 + 100; ++j) os.put(static_cast<char>(j % 256));
  }
  CHECK_THROWS_AS(cifar_read(path, DatasetKind::kCifar100), FormatError);

  // A cifar10 record with label out of range.
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.put(static_cast<char>(11));  // label 11 >= 10
    for (int j = 0; j < 3072; ++j) os.put(static_cast<char>(0));
  }
  CHECK_THROWS_WITH_AS(cifar_read(path, DatasetKind::kCifar10), doctest::Contains("label 11"),
                       FormatError);
  fs::remove(path);
}

TEST_CASE("one-record cifar100 file yields a single sample with the fine label") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "icd_test_cifar_one.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os.put(static_cast<char>(3));
    os.put(static_cast<char>(42));
    for (int j = 0; j < 3072; ++j) os.put(static_cast<char>(255));
  }
  const CifarRecords records = cifar_read(path, DatasetKind::kCifar100);
  REQUIRE(records.labels.size() == 1);
  CHECK(records.labels[0] == 42);
  CHECK(records.images[0] == doctest::Approx(1.0));
  fs::remove(path);
}

TEST_CASE("batch streams are reproducible and partition the dataset") {
  const Dataset ds = synth_generate(small_spec());
  const ChannelStats stats = compute_channel_stats(ds);

  auto run_epoch = [&](std::size_t epoch, bool augment) {
    BatchIterator it(ds, Split::kTrain, 10, stats, 5, epoch, true, augment);
    std::vector<std::size_t> indices;
    std::vector<double> pixels;
    while (auto batch = it.next()) {
      indices.insert(indices.end(), batch->indices.begin(), batch->indices.end());
      pixels.insert(pixels.end(), batch->images.data().begin(), batch->images.data().end());
    }
    return std::pair(indices, pixels);
  };

  const auto [i1, p1] = run_epoch(0, true);
  const auto [i2, p2] = run_epoch(0, true);
  CHECK(i1 == i2);
  CHECK(p1 == p2);  // bit-identical augmentation draws

  const auto [i3, p3] = run_epoch(1, true);
  CHECK(i1 != i3);  // a different epoch reshuffles

  // Partition: every sample exactly once, last batch short.
  std::set<std::size_t> unique(i1.begin(), i1.end());
  CHECK(unique.size() == ds.train_count());
  CHECK(i1.size() == ds.train_count());
}

TEST_CASE("augment off leaves images bit-equal to the source") {
  const Dataset ds = synth_generate(small_spec());
  ChannelStats identity;  // mean 0, std 1: normalization is the identity
  BatchIterator it(ds, Split::kTrain, 7, identity, 5, 0, false, false);
  std::size_t offset = 0;
  const std::size_t elems = ds.image_elems();
  while (auto batch = it.next()) {
    for (std::size_t i = 0; i < batch->indices.size(); ++i) {
      CHECK(batch->indices[i] == offset + i);
      for (std::size_t j = 0; j < elems; ++j) {
        CHECK(batch->images.data()[i * elems + j] ==
              ds.train_images[batch->indices[i] * elems + j]);
      }
    }
    offset += batch->indices.size();
  }
  CHECK(offset == ds.train_count());
}

TEST_CASE("normalization uses the provided channel statistics") {
  const Dataset ds = synth_generate(small_spec());
  const ChannelStats stats = compute_channel_stats(ds);
  BatchIterator it(ds, Split::kTest, 4, stats, 0, 0, false, false);
  const auto batch = it.next();
  REQUIRE(batch.has_value());
  const std::size_t plane = ds.image_size * ds.image_size;
  for (std::size_t c = 0; c < 3; ++c) {
    const double expected =
        (ds.test_images[c * plane] - stats.mean[c]) / stats.stddev[c];
    CHECK(batch->images.data()[c * plane] == doctest::Approx(expected).epsilon(1e-15));
  }
}

TEST_CASE("dataset fixtures round-trip through the tensor container") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "icd_test_fixture.bin";
  const Dataset ds = synth_generate(small_spec());
  export_dataset_fixture(ds, path);
  const Dataset back = import_dataset_fixture(path, ds.num_classes);
  CHECK(back.train_images == ds.train_images);
  CHECK(back.train_labels == ds.train_labels);
  CHECK(back.test_images == ds.test_images);
  CHECK(back.test_labels == ds.test_labels);
  fs::remove(path);
}
