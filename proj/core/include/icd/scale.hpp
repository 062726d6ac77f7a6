#pragma once

#include <vector>

#include "icd/nn.hpp"
#include "icd/tensor.hpp"

namespace icd {

/// The scale set M and the map width it partitions. Every scale must divide
/// the width; scales are kept strictly increasing.
struct ScaleSpec {
  std::vector<std::size_t> scales;
  std::size_t map_width = 0;

  ScaleSpec(std::vector<std::size_t> scales, std::size_t map_width);
};

/// One cell of the scale-m grid: a (w/m) x (w/m) axis-aligned rectangle.
struct CellRect {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t extent = 0;  // square side length
};

/// The m*m non-overlapping cells covering the map, enumerated row-major.
/// The enumeration order is part of the serialized gram-dump interface.
std::vector<CellRect> cell_grid(const ScaleSpec& spec, std::size_t m);

/// Aggregated cell logits pi(m,n): one [batch, m*m, K] tensor per scale.
struct CellLogits {
  std::vector<std::size_t> scales;
  std::vector<Tensor> per_scale;

  std::size_t batch() const { return per_scale.front().shape()[0]; }
  std::size_t classes() const { return per_scale.front().shape()[2]; }
  const Tensor& at_scale(std::size_t index) const { return per_scale.at(index); }
};

/// pi(m,n) = mean of L(j,k) over the cell, i.e. normalized by the cell's
/// element count, so the m=1 cell equals the global average logits exactly.
CellLogits pool_cells(const LogitMap& map, const ScaleSpec& spec);

}  // namespace icd
