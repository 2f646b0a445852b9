#pragma once

#include "maglens/grid.hpp"

#include <string>
#include <vector>

namespace maglens {

// Named per-node components on a chart, e.g. {"c"} or {"omega01", "omega02", "omega12"}.
struct GridDump {
    Chart chart;
    std::vector<std::string> components;
    std::vector<std::vector<double>> values;  // values[k][node]
};

enum class GridFormat { Csv, Binary };

// Writes `path` and the sidecar `path + ".json"`.
//
// CSV: header i0..i{n-1}, z0..z{n-1}, then one column per component; one row
// per node in linear order (axis 0 fastest).
//
// Binary: 8 bytes "MLGRID01", then node_count * components little-endian
// IEEE-754 doubles, node-major (all components of node 0, then node 1, ...),
// nodes in linear order. Chart and component names live in the sidecar only.
//
// Sidecar keys: format, dim, lo, hi, nodes, spacing, components, layout.
void write_grid(const GridDump& dump, const std::string& path, GridFormat format = GridFormat::Csv);
GridDump read_grid(const std::string& path);

}  // namespace maglens
