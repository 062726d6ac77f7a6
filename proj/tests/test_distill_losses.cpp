#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "icd/losses.hpp"
#include "icd/rng.hpp"
#include "support/oracles.hpp"

using namespace icd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data));
}

CellLogits cells_of(const Tensor& map, const std::vector<std::size_t>& scales) {
  return pool_cells(LogitMap{map}, ScaleSpec(scales, map.shape()[2]));
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("kd_loss is zero for identical maps and decays with temperature") {
  Rng rng(31);
  const Tensor map = random_tensor({2, 4, 4, 4}, rng);
  CHECK(kd_loss(LogitMap{map}, LogitMap{map}, 4.0).item() <= 1e-12);

  const Tensor t_map = random_tensor({2, 4, 4, 4}, rng);
  const Tensor s_map = random_tensor({2, 4, 4, 4}, rng);
  // The bare KL (no tau^2 rescale) falls to zero monotonically as tau grows.
  double prev = std::numeric_limits<double>::infinity();
  for (double tau : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0}) {
    const double v = kd_loss(LogitMap{t_map}, LogitMap{s_map}, tau, /*tau_squared=*/false).item();
    CHECK(v < prev);
    CHECK(v >= 0.0);
    prev = v;
  }
  CHECK(prev < 1e-4);
  // With the tau^2 rescale the loss stays bounded instead.
  const double rescaled =
      kd_loss(LogitMap{t_map}, LogitMap{s_map}, 256.0, /*tau_squared=*/true).item();
  CHECK(rescaled < 10.0);
}

TEST_CASE("kd_loss matches the scalar oracle and sdd with M={1}") {
  Rng rng(32);
  DistillConfig cfg;
  cfg.scales = {1};
  for (int rep = 0; rep < 25; ++rep) {
    const Tensor t_map = random_tensor({3, 4, 4, 4}, rng);
    const Tensor s_map = random_tensor({3, 4, 4, 4}, rng);
    const double tau = rng.uniform(0.5, 8.0);
    cfg.temperature = tau;
    const double kd = kd_loss(LogitMap{t_map}, LogitMap{s_map}, tau).item();
    const double expected = oracle::kd_loss(to_vec(t_map), to_vec(s_map), 3, 4, 4, tau, true);
    CHECK(std::abs(kd - expected) <= 1e-10);
    const double sdd =
        sdd_loss(cells_of(t_map, {1}), cells_of(s_map, {1}), cfg).item();
    CHECK(std::abs(kd - sdd) <= 1e-12);
  }
}

TEST_CASE("kd_loss gradients reach only the student map") {
  Rng rng(33);
  const Tensor t_map = random_tensor({2, 3, 4, 4}, rng).leaf_with_grad();
  const Tensor s_map = random_tensor({2, 3, 4, 4}, rng).leaf_with_grad();
  kd_loss(LogitMap{t_map}, LogitMap{s_map}, 4.0).backward();
  CHECK_FALSE(t_map.has_grad());
  CHECK(s_map.has_grad());
}

TEST_CASE("sdd_loss: zero at equality, loop-oracle match on random instances") {
  Rng rng(34);
  DistillConfig cfg;
  cfg.scales = {1, 2};
  cfg.temperature = 4.0;
  const Tensor same = random_tensor({2, 3, 4, 4}, rng);
  CHECK(sdd_loss(cells_of(same, {1, 2}), cells_of(same, {1, 2}), cfg).item() <= 1e-12);

  for (int rep = 0; rep < 25; ++rep) {
    const Tensor t_map = random_tensor({2, 3, 4, 4}, rng);
    const Tensor s_map = random_tensor({2, 3, 4, 4}, rng);
    const double v = sdd_loss(cells_of(t_map, {1, 2}), cells_of(s_map, {1, 2}), cfg).item();
    const double expected =
        oracle::sdd_loss(to_vec(t_map), to_vec(s_map), 2, 3, 4, {1, 2}, 4.0, true);
    CHECK(std::abs(v - expected) <= 1e-10);
  }
}

TEST_CASE("sdd_loss rejects mismatched scale sets") {
  Rng rng(35);
  const Tensor map = random_tensor({2, 3, 4, 4}, rng);
  DistillConfig cfg;
  CHECK_THROWS_AS(sdd_loss(cells_of(map, {1, 2}), cells_of(map, {1, 4}), cfg), ConfigError);
}

TEST_CASE("gram: orthonormal rows give the identity in sample_similarity mode") {
  const Tensor cells = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor g = gram(cells, GramMode::kSampleSimilarity, 1e-12);
  CHECK(g.shape() == Shape{2, 2});
  CHECK(g.data()[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(g.data()[1] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(g.data()[3] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("gram: hand oracle for X=[[3,4],[0,2]] in class_correlation mode") {
  const Tensor cells = Tensor::from_data({2, 2}, {3.0, 4.0, 0.0, 2.0});
  const Tensor g = gram(cells, GramMode::kClassCorrelation, 1e-12);
  CHECK(g.data()[0] == doctest::Approx(0.36).epsilon(1e-12));
  CHECK(g.data()[1] == doctest::Approx(0.48).epsilon(1e-12));
  CHECK(g.data()[2] == doctest::Approx(0.48).epsilon(1e-12));
  CHECK(g.data()[3] == doctest::Approx(1.64).epsilon(1e-12));
}

TEST_CASE("gram absorbs positive per-sample scaling") {
  Rng rng(36);
  for (GramMode mode : {GramMode::kClassCorrelation, GramMode::kSampleSimilarity}) {
    const Tensor cells = random_tensor({3, 4}, rng);
    std::vector<double> scaled = to_vec(cells);
    for (std::size_t k = 0; k < 4; ++k) scaled[1 * 4 + k] *= 5.0;
    const Tensor g1 = gram(cells, mode, 1e-12);
    const Tensor g2 = gram(Tensor::from_data({3, 4}, std::move(scaled)), mode, 1e-12);
    for (std::size_t i = 0; i < g1.size(); ++i) {
      CHECK(std::abs(g1.data()[i] - g2.data()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("GramPair invariants hold on 1000 random inputs per mode") {
  Rng rng(37);
  for (GramMode mode : {GramMode::kClassCorrelation, GramMode::kSampleSimilarity}) {
    for (int rep = 0; rep < 1000; ++rep) {
      const std::size_t batch = 2 + rng.below(4);
      const std::size_t k = 2 + rng.below(4);
      const Tensor cells = random_tensor({batch, k}, rng);
      const Tensor g = gram(cells, mode, 1e-12);
      const std::size_t d = g.shape()[0];

      double max_asym = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) {
          max_asym = std::max(max_asym, std::abs(g.data()[a * d + b] - g.data()[b * d + a]));
        }
      }
      CHECK(max_asym <= 1e-10);

      const auto eig = oracle::symmetric_eigenvalues(to_vec(g), d);
      for (double e : eig) CHECK(e >= -1e-8);

      if (mode == GramMode::kClassCorrelation) {
        double trace = 0.0;
        for (std::size_t a = 0; a < d; ++a) trace += g.data()[a * d + a];
        CHECK(std::abs(trace - static_cast<double>(batch)) <= 1e-8);
      } else {
        for (std::size_t a = 0; a < d; ++a) {
          CHECK(std::abs(g.data()[a * d + a] - 1.0) <= 1e-10);
        }
      }
    }
  }
}

TEST_CASE("icd_cell_loss: zero at equality, symmetric growth in the off-diagonal") {
  const Tensor zero = Tensor::zeros({2, 2});
  CHECK(icd_cell_loss(zero, zero).item() <= 1e-12);

  double prev = 0.0;
  for (double c : {0.5, 1.0, 2.0, 4.0}) {
    const Tensor g_s = Tensor::from_data({2, 2}, {0.0, c, c, 0.0});
    const Tensor g_s_neg = Tensor::from_data({2, 2}, {0.0, -c, -c, 0.0});
    const double v = icd_cell_loss(zero, g_s).item();
    const double v_neg = icd_cell_loss(zero, g_s_neg).item();
    CHECK(v > prev);
    CHECK(std::abs(v - v_neg) <= 1e-12);  // symmetric in the sign of c
    prev = v;
  }
}

TEST_CASE("icd_cell_loss matches the per-row KL loop oracle") {
  Rng rng(38);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t d = 2 + rng.below(5);
    Tensor g_t = random_tensor({d, d}, rng);
    Tensor g_s = random_tensor({d, d}, rng);
    const double v = icd_cell_loss(g_t, g_s).item();
    const double expected = oracle::icd_cell_loss(to_vec(g_t), to_vec(g_s), d);
    CHECK(std::abs(v - expected) <= 1e-12);
  }
}

TEST_CASE("icd_cell_loss gradients reach only the student Gram") {
  Rng rng(39);
  const Tensor g_t = random_tensor({3, 3}, rng).leaf_with_grad();
  const Tensor g_s = random_tensor({3, 3}, rng).leaf_with_grad();
  icd_cell_loss(g_t, g_s).backward();
  CHECK_FALSE(g_t.has_grad());
  CHECK(g_s.has_grad());
}

TEST_CASE("scale_weights: exact values and the unit-sum property") {
  const auto w124 = scale_weights({1, 2, 4});
  REQUIRE(w124.size() == 3);
  CHECK(w124[0] == 1.0 / 6.0);
  CHECK(w124[1] == 1.0 / 3.0);
  CHECK(w124[2] == 0.5);

  CHECK(scale_weights({1}) == std::vector<double>{1.0});

  const auto w24 = scale_weights({2, 4});
  CHECK(w24[0] == 1.0 / 3.0);
  CHECK(w24[1] == 2.0 / 3.0);

  Rng rng(40);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::size_t> scales;
    std::size_t v = 1 + rng.below(3);
    const std::size_t count = 1 + rng.below(6);
    for (std::size_t i = 0; i < count; ++i) {
      scales.push_back(v);
      v += 1 + rng.below(4);
    }
    const auto w = scale_weights(scales);
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    CHECK(std::abs(sum - 1.0) <= 1e-15);
  }
  CHECK_THROWS_AS(scale_weights({}), ConfigError);
}

TEST_CASE("icd_loss: zero at equality and loop-oracle match on random instances") {
  Rng rng(41);
  DistillConfig cfg;
  cfg.scales = {1, 2, 4};
  const Tensor same = random_tensor({3, 4, 4, 4}, rng);
  CHECK(icd_loss(cells_of(same, cfg.scales), cells_of(same, cfg.scales), cfg).item() <= 1e-12);

  for (GramMode mode : {GramMode::kClassCorrelation, GramMode::kSampleSimilarity}) {
    cfg.gram_mode = mode;
    for (int rep = 0; rep < 10; ++rep) {
      const Tensor t_map = random_tensor({3, 4, 4, 4}, rng);
      const Tensor s_map = random_tensor({3, 4, 4, 4}, rng);
      const double v =
          icd_loss(cells_of(t_map, cfg.scales), cells_of(s_map, cfg.scales), cfg).item();
      const double expected =
          oracle::icd_loss(to_vec(t_map), to_vec(s_map), 3, 4, 4, cfg.scales,
                           mode == GramMode::kClassCorrelation, cfg.eps, false);
      CHECK(std::abs(v - expected) <= 1e-10);
      CHECK(v >= -1e-12);
    }
  }
}

TEST_CASE("icd_loss is invariant to positive per-sample scaling at one cell") {
  Rng rng(42);
  DistillConfig cfg;
  cfg.scales = {2};
  const std::size_t batch = 3, k = 4;
  for (GramMode mode : {GramMode::kClassCorrelation, GramMode::kSampleSimilarity}) {
    cfg.gram_mode = mode;
    const Tensor t_cells = random_tensor({batch, 4, k}, rng);
    const Tensor s_cells = random_tensor({batch, 4, k}, rng);
    CellLogits teacher{{2}, {t_cells}};
    CellLogits student{{2}, {s_cells}};
    const double base = icd_loss(teacher, student, cfg).item();

    std::vector<double> scaled = to_vec(s_cells);
    for (std::size_t c = 0; c < k; ++c) scaled[(1 * 4 + 2) * k + c] *= 3.0;  // sample 1, cell 2
    CellLogits student_scaled{{2}, {Tensor::from_data({batch, 4, k}, std::move(scaled))}};
    const double v = icd_loss(teacher, student_scaled, cfg).item();
    CHECK(std::abs(base - v) <= 1e-12);
  }
}

TEST_CASE("icd_loss is invariant to batch permutation in both modes") {
  Rng rng(43);
  DistillConfig cfg;
  cfg.scales = {1, 2};
  const std::size_t batch = 4;
  const Tensor t_map = random_tensor({batch, 3, 4, 4}, rng);
  const Tensor s_map = random_tensor({batch, 3, 4, 4}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const std::size_t per = 3 * 16;
  auto permute = [&](const Tensor& t) {
    std::vector<double> out(t.size());
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(perm[b] * per),
                t.data().begin() + static_cast<std::ptrdiff_t>((perm[b] + 1) * per),
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return Tensor::from_data({batch, 3, 4, 4}, std::move(out));
  };
  for (GramMode mode : {GramMode::kClassCorrelation, GramMode::kSampleSimilarity}) {
    cfg.gram_mode = mode;
    const double base =
        icd_loss(cells_of(t_map, cfg.scales), cells_of(s_map, cfg.scales), cfg).item();
    const double permuted = icd_loss(cells_of(permute(t_map), cfg.scales),
                                     cells_of(permute(s_map), cfg.scales), cfg)
                                .item();
    CHECK(std::abs(base - permuted) <= 1e-10);
  }

  // sample_similarity mode: the Gram is conjugated by the permutation.
  const Tensor cells = random_tensor({batch, 3}, rng);
  std::vector<double> permuted_cells(batch * 3);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(cells.data().begin() + static_cast<std::ptrdiff_t>(perm[b] * 3),
              cells.data().begin() + static_cast<std::ptrdiff_t>((perm[b] + 1) * 3),
              permuted_cells.begin() + static_cast<std::ptrdiff_t>(b * 3));
  }
  const Tensor g = gram(cells, GramMode::kSampleSimilarity, 1e-12);
  const Tensor gp =
      gram(Tensor::from_data({batch, 3}, std::move(permuted_cells)), GramMode::kSampleSimilarity,
           1e-12);
  for (std::size_t a = 0; a < batch; ++a) {
    for (std::size_t b = 0; b < batch; ++b) {
      CHECK(std::abs(gp.data()[a * batch + b] - g.data()[perm[a] * batch + perm[b]]) <= 1e-12);
    }
  }
}

TEST_CASE("warmup_factor ramps linearly") {
  CHECK(warmup_factor(0, 30) == 0.0);
  CHECK(warmup_factor(15, 30) == 0.5);
  CHECK(warmup_factor(30, 30) == 1.0);
  CHECK(warmup_factor(100, 30) == 1.0);
  CHECK(warmup_factor(0, 0) == 1.0);
}

TEST_CASE("total_loss combines components per the objective") {
  DistillConfig cfg;
  cfg.alpha = 1.0;
  cfg.gamma = 2.0;
  cfg.warmup_epochs = 30;
  const Tensor ce = Tensor::scalar(1.25);
  const Tensor sdd = Tensor::scalar(0.5);
  const Tensor icd = Tensor::scalar(0.75);

  CHECK(total_loss(ce, sdd, icd, cfg, 0).item() == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(total_loss(ce, sdd, icd, cfg, 30).item() ==
        doctest::Approx(1.25 + 0.5 + 2.0 * 0.75).epsilon(1e-15));
  CHECK(total_loss(ce, sdd, icd, cfg, 15).item() ==
        doctest::Approx(1.25 + 0.5 * (0.5 + 1.5)).epsilon(1e-15));

  DistillConfig off = cfg;
  off.alpha = 0.0;
  off.gamma = 0.0;
  CHECK(total_loss(ce, sdd, icd, off, 100).item() == 1.25);

  const Tensor bad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(total_loss(ce, bad, icd, cfg, 10), DivergenceError);
}

TEST_CASE("gram dump records round-trip through the documented format") {
  Rng rng(44);
  DistillConfig cfg;
  cfg.scales = {1, 2};
  const Tensor t_map = random_tensor({2, 3, 4, 4}, rng);
  const Tensor s_map = random_tensor({2, 3, 4, 4}, rng);
  const auto pairs = gram_pairs(cells_of(t_map, cfg.scales), cells_of(s_map, cfg.scales), cfg);
  REQUIRE(pairs.size() == 5);  // 1 + 4 cells
  CHECK(pairs.front().scale == 1);
  CHECK(pairs.back().scale == 2);
  CHECK(pairs.back().cell == 3);

  std::stringstream buffer;
  write_gram_dump(buffer, pairs, cfg.gram_mode);

  // First line is the documented "m n d mode" header.
  std::string header;
  std::getline(buffer, header);
  CHECK(header == "1 0 3 class_correlation");
  buffer.seekg(0);

  const auto back = read_gram_dump(buffer);
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].scale == pairs[i].scale);
    CHECK(back[i].cell == pairs[i].cell);
    for (std::size_t j = 0; j < pairs[i].teacher.size(); ++j) {
      CHECK(back[i].teacher.data()[j] == pairs[i].teacher.data()[j]);
      CHECK(back[i].student.data()[j] == pairs[i].student.data()[j]);
    }
  }
}
