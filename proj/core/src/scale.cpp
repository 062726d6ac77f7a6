#include "icd/scale.hpp"

#include <algorithm>
#include <string>

namespace icd {

ScaleSpec::ScaleSpec(std::vector<std::size_t> scales_in, std::size_t width)
    : scales(std::move(scales_in)), map_width(width) {
  if (scales.empty()) throw ConfigError("ScaleSpec: empty scale set");
  if (map_width == 0) throw ConfigError("ScaleSpec: map width must be positive");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] == 0) throw ConfigError("ScaleSpec: scales must be positive");
    if (i > 0 && scales[i] <= scales[i - 1]) {
      throw ConfigError("ScaleSpec: scales must be strictly increasing");
    }
    if (map_width % scales[i] != 0) {
      throw ConfigError("ScaleSpec: scale " + std::to_string(scales[i]) +
                        " does not divide map width " + std::to_string(map_width));
    }
  }
}

std::vector<CellRect> cell_grid(const ScaleSpec& spec, std::size_t m) {
  if (std::find(spec.scales.begin(), spec.scales.end(), m) == spec.scales.end()) {
    throw ConfigError("cell_grid: scale " + std::to_string(m) + " not in the scale set");
  }
  const std::size_t cell = spec.map_width / m;
  std::vector<CellRect> cells;
  cells.reserve(m * m);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) {
      cells.push_back({r * cell, c * cell, cell});
    }
  }
  return cells;
}

CellLogits pool_cells(const LogitMap& map, const ScaleSpec& spec) {
  if (map.width() != spec.map_width) {
    throw ShapeError("pool_cells: map width " + std::to_string(map.width()) +
                     " != spec width " + std::to_string(spec.map_width));
  }
  CellLogits out;
  out.scales = spec.scales;
  out.per_scale.reserve(spec.scales.size());
  for (std::size_t m : spec.scales) {
    out.per_scale.push_back(pool_cells_scale(map.values, m));
  }
  return out;
}

}  // namespace icd
