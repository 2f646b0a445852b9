#pragma once

#include <vector>

namespace maglens {

struct QuadratureRule {
    std::vector<double> nodes;    // in [0, 1]
    std::vector<double> weights;  // sum to 1
};

// m-point Gauss-Legendre rule mapped to [0, 1]. Cached per m.
const QuadratureRule& gauss_legendre(int m);

// Composite rule on [a, b] with `panels` equal panels of an m-point rule,
// appended to (t, w).
void composite_gauss(double a, double b, int panels, int m, std::vector<double>& t, std::vector<double>& w);

}  // namespace maglens
