#include "maglens/expressions.hpp"

#include <cmath>

namespace maglens::expr {

ScalarJet jet_sum(const ScalarJet& a, const ScalarJet& b, int order) {
    ScalarJet j;
    j.value = a.value + b.value;
    if (order >= 1) j.grad = a.grad + b.grad;
    if (order >= 2) j.hess = a.hess + b.hess;
    return j;
}

ScalarJet jet_product(const ScalarJet& a, const ScalarJet& b, int order) {
    ScalarJet j;
    j.value = a.value * b.value;
    if (order >= 1) j.grad = a.value * b.grad + b.value * a.grad;
    if (order >= 2)
        j.hess = a.value * b.hess + b.value * a.hess + a.grad * b.grad.transpose() + b.grad * a.grad.transpose();
    return j;
}

namespace {

ScalarJet zero_jet(int n, int order) {
    ScalarJet j;
    if (order >= 1) j.grad = Vec::Zero(n);
    if (order >= 2) j.hess = Mat::Zero(n, n);
    return j;
}

// Jet of f(s) with s = |d|^2 / r2 given f, f', f''.
ScalarJet radial_jet(const Vec& d, double r2, double f, double fs, double fss, int order) {
    const int n = static_cast<int>(d.size());
    ScalarJet j;
    j.value = f;
    Vec ds = 2.0 * d / r2;
    if (order >= 1) j.grad = fs * ds;
    if (order >= 2) j.hess = fss * ds * ds.transpose() + (2.0 * fs / r2) * Mat::Identity(n, n);
    return j;
}

ScalarJet bump_jet(const Vec& d, double radius, int order) {
    const int n = static_cast<int>(d.size());
    double r2 = radius * radius;
    double s = d.squaredNorm() / r2;
    if (s >= 1.0) return zero_jet(n, order);
    double u = 1.0 - s;
    double f = std::exp(1.0 - 1.0 / u);
    double fs = -f / (u * u);
    double fss = f * (1.0 - 2.0 * u) / (u * u * u * u);
    return radial_jet(d, r2, f, fs, fss, order);
}

}  // namespace

ScalarFieldPtr constant(int n, double value) { return std::make_shared<ConstantScalarField>(n, value); }

ScalarFieldPtr affine(const Vec& a, double offset) {
    const int n = static_cast<int>(a.size());
    return std::make_shared<AnalyticScalarField>(n, [a, offset, n](const Vec& z, int order) {
        ScalarJet j;
        j.value = a.dot(z) + offset;
        if (order >= 1) j.grad = a;
        if (order >= 2) j.hess = Mat::Zero(n, n);
        return j;
    });
}

ScalarFieldPtr radius(int n) {
    return std::make_shared<AnalyticScalarField>(n, [n](const Vec& z, int order) {
        ScalarJet j;
        double r = z.norm();
        j.value = r;
        if (order >= 1) j.grad = r > 0 ? Vec(z / r) : Vec(Vec::Zero(n));
        if (order >= 2) {
            if (r > 0) {
                Vec u = z / r;
                j.hess = (Mat::Identity(n, n) - u * u.transpose()) / r;
            } else {
                j.hess = Mat::Zero(n, n);
            }
        }
        return j;
    });
}

ScalarFieldPtr unit_ball_rho(int n) {
    ScalarFieldPtr r = radius(n);
    return std::make_shared<AnalyticScalarField>(n, [r](const Vec& z, int order) {
        ScalarJet j = r->eval(z, order);
        j.value = 1.0 - j.value;
        if (order >= 1) j.grad = -j.grad;
        if (order >= 2) j.hess = -j.hess;
        return j;
    });
}

ScalarFieldPtr radial_quadratic(int n, double base, double amp) {
    return std::make_shared<AnalyticScalarField>(n, [n, base, amp](const Vec& z, int order) {
        ScalarJet j;
        j.value = base + amp * (1.0 - z.squaredNorm());
        if (order >= 1) j.grad = -2.0 * amp * z;
        if (order >= 2) j.hess = -2.0 * amp * Mat::Identity(n, n);
        return j;
    });
}

ScalarFieldPtr gaussian(double base, double amp, const Vec& center, double width) {
    const int n = static_cast<int>(center.size());
    return std::make_shared<AnalyticScalarField>(n, [base, amp, center, width](const Vec& z, int order) {
        Vec d = z - center;
        double r2 = width * width;
        double f = amp * std::exp(-d.squaredNorm() / r2);
        ScalarJet j = radial_jet(d, r2, f, -f, f, order);
        j.value += base;
        return j;
    });
}

ScalarFieldPtr bump(double base, double amp, const Vec& center, double radius) {
    const int n = static_cast<int>(center.size());
    return std::make_shared<AnalyticScalarField>(n, [base, amp, center, radius](const Vec& z, int order) {
        ScalarJet j = bump_jet(z - center, radius, order);
        j.value = base + amp * j.value;
        if (order >= 1) j.grad *= amp;
        if (order >= 2) j.hess *= amp;
        return j;
    });
}

ScalarFieldPtr windowed_gaussian(double amp, const Vec& center, double sigma, double radius) {
    const int n = static_cast<int>(center.size());
    return std::make_shared<AnalyticScalarField>(n, [amp, center, sigma, radius](const Vec& z, int order) {
        Vec d = z - center;
        ScalarJet w = bump_jet(d, radius, order);
        if (w.value == 0.0) return w;
        double r2 = 2.0 * sigma * sigma;
        double f = amp * std::exp(-d.squaredNorm() / r2);
        ScalarJet g = radial_jet(d, r2, f, -f, f, order);
        return jet_product(g, w, order);
    });
}

ScalarFieldPtr planar_gaussian(int n, double amp, double width) {
    return std::make_shared<AnalyticScalarField>(n, [n, amp, width](const Vec& z, int order) {
        Vec d = Vec::Zero(n);
        d[0] = z[0];
        d[1] = z[1];
        double r2 = width * width;
        double f = amp * std::exp(-d.squaredNorm() / r2);
        ScalarJet j;
        j.value = f;
        Vec ds = -2.0 * d / r2;
        if (order >= 1) j.grad = f * ds;
        if (order >= 2) {
            Mat P = Mat::Zero(n, n);
            P(0, 0) = P(1, 1) = 1.0;
            j.hess = f * ds * ds.transpose() - (2.0 * f / r2) * P;
        }
        return j;
    });
}

ScalarFieldPtr sum(ScalarFieldPtr a, ScalarFieldPtr b) {
    const int n = a->dim();
    return std::make_shared<AnalyticScalarField>(n, [a, b](const Vec& z, int order) {
        return jet_sum(a->eval(z, order), b->eval(z, order), order);
    });
}

ScalarFieldPtr scaled(ScalarFieldPtr a, double s) {
    const int n = a->dim();
    return std::make_shared<AnalyticScalarField>(n, [a, s](const Vec& z, int order) {
        ScalarJet j = a->eval(z, order);
        j.value *= s;
        if (order >= 1) j.grad *= s;
        if (order >= 2) j.hess *= s;
        return j;
    });
}

MagneticSystem ball_system(int n, double half, int nodes, ScalarFieldPtr c, TwoFormField omega) {
    return MagneticSystem(Chart::cube(n, half, nodes), ConstantMetric::euclidean(n), std::move(c), std::move(omega),
                          unit_ball_rho(n));
}

}  // namespace maglens::expr
