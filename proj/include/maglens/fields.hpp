#pragma once

#include "maglens/grid.hpp"

#include <atomic>
#include <memory>
#include <vector>

namespace maglens {

// Background metric g0. dg[m](i,j) = d_m g0_ij, d2g[m*n + l](i,j) = d_m d_l g0_ij.
class BackgroundMetric {
public:
    virtual ~BackgroundMetric() = default;
    virtual int dim() const = 0;
    virtual bool is_constant() const = 0;
    virtual void eval(const Vec& z, int order, Mat& g, std::array<Mat, kMaxDim>* dg,
                      std::array<Mat, kMaxDim * kMaxDim>* d2g) const = 0;
};

using MetricPtr = std::shared_ptr<const BackgroundMetric>;

class ConstantMetric : public BackgroundMetric {
public:
    explicit ConstantMetric(const Mat& g);
    static std::shared_ptr<ConstantMetric> euclidean(int n);
    int dim() const override { return static_cast<int>(g_.rows()); }
    bool is_constant() const override { return true; }
    void eval(const Vec& z, int order, Mat& g, std::array<Mat, kMaxDim>* dg,
              std::array<Mat, kMaxDim * kMaxDim>* d2g) const override;

private:
    Mat g_;
};

// Metric assembled from n(n+1)/2 scalar component fields (i <= j, row-major).
class ComponentMetric : public BackgroundMetric {
public:
    ComponentMetric(int n, std::vector<ScalarFieldPtr> upper);
    int dim() const override { return n_; }
    bool is_constant() const override { return false; }
    void eval(const Vec& z, int order, Mat& g, std::array<Mat, kMaxDim>* dg,
              std::array<Mat, kMaxDim * kMaxDim>* d2g) const override;

private:
    int n_;
    std::vector<ScalarFieldPtr> upper_;
};

// Two-form stored by its packed upper-triangular components Omega_ij, i < j.
// Null components are identically zero.
class TwoFormField {
public:
    TwoFormField() = default;
    TwoFormField(int n, std::vector<ScalarFieldPtr> packed);
    static TwoFormField zero(int n);
    static TwoFormField constant(const Mat& omega);

    int dim() const { return n_; }
    bool is_zero() const;
    const ScalarFieldPtr& component(int i, int j) const;
    const std::vector<ScalarFieldPtr>& packed() const { return packed_; }

    // domega[m](i,j) = d_m Omega_ij.
    void eval(const Vec& z, int order, Mat& omega, std::array<Mat, kMaxDim>* domega) const;
    Mat value(const Vec& z) const;

private:
    int n_ = 0;
    std::vector<ScalarFieldPtr> packed_;
};

// Receives every point at which a system is evaluated.
class AccessProbe {
public:
    virtual ~AccessProbe() = default;
    virtual void touch(const Vec& z) const = 0;
};

// Everything the flow needs at one point.
struct LocalGeometry {
    int n = 0;
    double c = 1.0;
    Vec dlnc;
    Mat g, g_inv;
    Tensor3 gamma;  // Gamma^i_jk
    Mat Y;          // Lorentz force Y^i_j
    bool has_derivatives = false;
    Tensor4 dgamma;                  // d_m Gamma^i_jk
    std::array<Mat, kMaxDim> dY;     // d_m Y^i_j
};

// (M, c^2 g0, Omega) inside a chart, with boundary defining function rho
// (rho > 0 inside M).
class MagneticSystem {
public:
    MagneticSystem() = default;
    MagneticSystem(Chart chart, MetricPtr g0, ScalarFieldPtr c, TwoFormField omega, ScalarFieldPtr rho);

    int dim() const { return chart_.dim(); }
    const Chart& chart() const { return chart_; }
    const MetricPtr& background() const { return g0_; }
    const ScalarFieldPtr& conformal() const { return c_; }
    const TwoFormField& form() const { return omega_; }
    const ScalarFieldPtr& boundary() const { return rho_; }

    MagneticSystem with_conformal(ScalarFieldPtr c) const;
    MagneticSystem with_form(TwoFormField omega) const;
    void set_probe(std::shared_ptr<const AccessProbe> probe) { probe_ = std::move(probe); }

    LocalGeometry geometry(const Vec& z, bool derivatives) const;
    Mat metric(const Vec& z) const;
    double speed(const Vec& z, const Vec& v) const;
    double rho(const Vec& z) const { return rho_->eval(z, 0).value; }

    // a(z, v) = -Gamma(v, v) + Y v and, on request, its partial Jacobians.
    Vec acceleration(const Vec& z, const Vec& v) const;
    void acceleration_jacobian(const Vec& z, const Vec& v, Vec& a, Mat& da_dz, Mat& da_dv) const;

private:
    Chart chart_;
    MetricPtr g0_;
    ScalarFieldPtr c_;
    TwoFormField omega_;
    ScalarFieldPtr rho_;
    std::shared_ptr<const AccessProbe> probe_;
};

// Region {x > 0, rho >= 0} cut out by x = -rho - eps |z - p|^2 + shift.
struct Localizer {
    Vec p;
    double eps = 0.0;
    double shift = 0.0;
    ScalarFieldPtr x;
    ScalarFieldPtr rho;
    double value(const Vec& z) const { return x->eval(z, 0).value; }
    bool contains(const Vec& z) const;
};

namespace fields {

Mat metric_at(const MagneticSystem& sys, const Vec& z);
Tensor3 christoffel(const MagneticSystem& sys, const Vec& z);
Mat lorentz(const MagneticSystem& sys, const Vec& z);
Mat form_from_lorentz(const Mat& g, const Mat& Y, double tol = 1e-10);

// Max over interior chart nodes of the cyclic sum d_i W_jk + d_j W_ki + d_k W_ij
// computed with central differences.
double closedness_residual(const TwoFormField& omega, const Chart& chart);

// Lambda(z, v) - <Y v, nu>_g for the level set {b = 0} seen from {b > 0}.
double convexity_margin(const MagneticSystem& sys, const ScalarField& b, const Vec& z, const Vec& v,
                        double tol = 1e-8);
double convexity_margin(const MagneticSystem& sys, const Vec& z, const Vec& v, double tol = 1e-8);

Localizer concave_localizer(const MagneticSystem& sys, const Vec& p, double eps, double shift);

}  // namespace fields
}  // namespace maglens
