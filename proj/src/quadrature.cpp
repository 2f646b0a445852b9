#include "maglens/quadrature.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

namespace maglens {

namespace {

QuadratureRule build_rule(int m) {
    QuadratureRule r;
    r.nodes.resize(m);
    r.weights.resize(m);
    for (int i = 0; i < m; ++i) {
        // Newton on P_m from the Chebyshev-like initial guess.
        double x = std::cos(M_PI * (i + 0.75) / (m + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= m; ++k) {
                double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = m * (x * p1 - p0) / (x * x - 1.0);
            double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        double w = 2.0 / ((1.0 - x * x) * dp * dp);
        r.nodes[m - 1 - i] = 0.5 * (x + 1.0);
        r.weights[m - 1 - i] = 0.5 * w;
    }
    return r;
}

}  // namespace

const QuadratureRule& gauss_legendre(int m) {
    if (m < 1) throw std::invalid_argument("gauss_legendre: m must be positive");
    static std::mutex mu;
    static std::map<int, QuadratureRule> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(m);
    if (it == cache.end()) it = cache.emplace(m, build_rule(m)).first;
    return it->second;
}

void composite_gauss(double a, double b, int panels, int m, std::vector<double>& t, std::vector<double>& w) {
    const QuadratureRule& r = gauss_legendre(m);
    double h = (b - a) / panels;
    for (int p = 0; p < panels; ++p) {
        double t0 = a + p * h;
        for (int k = 0; k < m; ++k) {
            t.push_back(t0 + h * r.nodes[k]);
            w.push_back(h * r.weights[k]);
        }
    }
}

}  // namespace maglens
