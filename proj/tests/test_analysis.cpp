#include <doctest.h>

#include <cmath>

#include "icd/analysis.hpp"
#include "support/oracles.hpp"

using namespace icd;

namespace {

DatasetSpec tiny_data() {
  DatasetSpec spec;
  spec.num_classes = 3;
  spec.image_size = 16;
  spec.train_size = 24;
  spec.test_size = 30;
  spec.seed = 8;
  return spec;
}

ConvNet tiny_net(std::uint64_t seed, std::size_t classes = 3) {
  Rng rng(seed);
  return ConvNet(ConvNetSpec::make({{4, 2}, {6, 2}}, 16, classes), rng);
}

}  // namespace

TEST_CASE("logit_correlation: unit diagonal, symmetry, oracle agreement") {
  const Dataset ds = synth_generate(tiny_data());
  const ChannelStats stats = compute_channel_stats(ds);
  const ConvNet net = tiny_net(42);

  bool warn = true;
  const Tensor corr = logit_correlation(net, ds, stats, 8, &warn);
  CHECK_FALSE(warn);
  const std::size_t k = 3;
  for (std::size_t a = 0; a < k; ++a) {
    CHECK(std::abs(corr.data()[a * k + a] - 1.0) <= 1e-10);
    for (std::size_t b = 0; b < k; ++b) {
      CHECK(std::abs(corr.data()[a * k + b] - corr.data()[b * k + a]) <= 1e-12);
      CHECK(corr.data()[a * k + b] <= 1.0 + 1e-10);
      CHECK(corr.data()[a * k + b] >= -1.0 - 1e-10);
    }
  }

  // Two-pass scalar oracle over the same logit rows.
  const ConvNet frozen = tiny_net(42);
  std::vector<double> rows(ds.test_count() * k);
  BatchIterator it(ds, Split::kTest, 8, stats, 0, 0, false, false);
  std::size_t row = 0;
  while (auto batch = it.next()) {
    const Tensor logits = global_logits(frozen.logit_map(batch->images));
    std::copy(logits.data().begin(), logits.data().end(),
              rows.begin() + static_cast<std::ptrdiff_t>(row * k));
    row += batch->labels.size();
  }
  const auto expected = oracle::pearson(rows, ds.test_count(), k);
  for (std::size_t i = 0; i < k * k; ++i) {
    CHECK(std::abs(corr.data()[i] - expected[i]) <= 1e-10);
  }
}

TEST_CASE("a constant logit column zeroes its row and column and warns") {
  const Dataset ds = synth_generate(tiny_data());
  const ChannelStats stats = compute_channel_stats(ds);
  ConvNet net = tiny_net(43);

  // Zero the classifier column of class 1 so its logit is constant 0.
  const Tensor w = net.params().back().value;
  std::vector<double> wd(w.data().begin(), w.data().end());
  const std::size_t k = 3;
  for (std::size_t c = 0; c < net.spec().feature_channels; ++c) wd[c * k + 1] = 0.0;
  net.params().back().value = Tensor::from_data(w.shape(), std::move(wd), true);

  bool warn = false;
  const Tensor corr = logit_correlation(net, ds, stats, 8, &warn);
  CHECK(warn);
  for (std::size_t i = 0; i < k; ++i) {
    CHECK(corr.data()[1 * k + i] == 0.0);
    CHECK(corr.data()[i * k + 1] == 0.0);
  }
  CHECK(std::abs(corr.data()[0] - 1.0) <= 1e-10);  // other classes unaffected
}

TEST_CASE("discrepancy of a model with itself is exactly zero") {
  const Dataset ds = synth_generate(tiny_data());
  const ChannelStats stats = compute_channel_stats(ds);
  const ConvNet net = tiny_net(44);

  DistillConfig cfg;
  cfg.scales = {1, 2, 4};
  const DiscrepancyReport report = discrepancy(net, net, ds, stats, 8, cfg);
  CHECK(report.mean_discrepancy == 0.0);
  for (double v : report.discrepancy.data()) CHECK(v == 0.0);
  REQUIRE(report.per_scale.size() == 3);
  for (const auto& [m, value] : report.per_scale) {
    CHECK(value <= 1e-12);
  }
}

TEST_CASE("discrepancy matrix is symmetric, non-negative, with oracle mean") {
  const Dataset ds = synth_generate(tiny_data());
  const ChannelStats stats = compute_channel_stats(ds);
  const ConvNet teacher = tiny_net(45);
  const ConvNet student = tiny_net(46);

  DistillConfig cfg;
  const DiscrepancyReport report = discrepancy(teacher, student, ds, stats, 8, cfg);
  const std::size_t k = 3;
  double mean = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      const double v = report.discrepancy.data()[a * k + b];
      CHECK(v >= 0.0);
      CHECK(std::abs(v - report.discrepancy.data()[b * k + a]) <= 1e-12);
      mean += v;
    }
  }
  mean /= static_cast<double>(k * k);
  CHECK(std::abs(mean - report.mean_discrepancy) <= 1e-12);

  // Symmetric in exchanging teacher and student.
  const DiscrepancyReport swapped = discrepancy(student, teacher, ds, stats, 8, cfg);
  for (std::size_t i = 0; i < k * k; ++i) {
    CHECK(report.discrepancy.data()[i] == swapped.discrepancy.data()[i]);
  }

  // Reproducible bit-for-bit.
  const DiscrepancyReport again = discrepancy(teacher, student, ds, stats, 8, cfg);
  CHECK(again.mean_discrepancy == report.mean_discrepancy);
  for (std::size_t si = 0; si < report.per_scale.size(); ++si) {
    CHECK(again.per_scale[si].second == report.per_scale[si].second);
  }
}

TEST_CASE("discrepancy rejects mismatched class counts") {
  const Dataset ds = synth_generate(tiny_data());
  const ChannelStats stats = compute_channel_stats(ds);
  const ConvNet teacher = tiny_net(47, 3);
  Rng rng(48);
  const ConvNet student(ConvNetSpec::make({{4, 2}, {6, 2}}, 16, 4), rng);
  DistillConfig cfg;
  CHECK_THROWS_AS(discrepancy(teacher, student, ds, stats, 8, cfg), ConfigError);
}
