#include "maglens/fields.hpp"

#include <cmath>

namespace maglens {

ConstantMetric::ConstantMetric(const Mat& g) : g_(g) {
    if (g.rows() != g.cols() || g.rows() < 1 || g.rows() > kMaxDim)
        throw BadParameters("metric must be square with dimension <= 3");
    if ((g - g.transpose()).norm() > 1e-14 * g.norm()) throw BadParameters("metric is not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(g);
    if (es.eigenvalues().minCoeff() <= 0) throw BadParameters("metric is not positive definite");
}

std::shared_ptr<ConstantMetric> ConstantMetric::euclidean(int n) {
    return std::make_shared<ConstantMetric>(Mat::Identity(n, n));
}

void ConstantMetric::eval(const Vec&, int order, Mat& g, std::array<Mat, kMaxDim>* dg,
                          std::array<Mat, kMaxDim * kMaxDim>* d2g) const {
    const int n = dim();
    g = g_;
    if (order >= 1 && dg)
        for (int m = 0; m < n; ++m) (*dg)[m] = Mat::Zero(n, n);
    if (order >= 2 && d2g)
        for (int m = 0; m < n * n; ++m) (*d2g)[m] = Mat::Zero(n, n);
}

ComponentMetric::ComponentMetric(int n, std::vector<ScalarFieldPtr> upper) : n_(n), upper_(std::move(upper)) {
    if (static_cast<int>(upper_.size()) != n * (n + 1) / 2)
        throw BadParameters("component metric needs n(n+1)/2 fields");
    for (auto& f : upper_)
        if (!f || f->dim() != n) throw BadParameters("component metric field has wrong dimension");
}

void ComponentMetric::eval(const Vec& z, int order, Mat& g, std::array<Mat, kMaxDim>* dg,
                           std::array<Mat, kMaxDim * kMaxDim>* d2g) const {
    const int n = n_;
    g.resize(n, n);
    if (order >= 1 && dg)
        for (int m = 0; m < n; ++m) (*dg)[m].resize(n, n);
    if (order >= 2 && d2g)
        for (int m = 0; m < n * n; ++m) (*d2g)[m].resize(n, n);
    int q = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j, ++q) {
            ScalarJet s = upper_[q]->eval(z, order);
            g(i, j) = g(j, i) = s.value;
            if (order >= 1 && dg)
                for (int m = 0; m < n; ++m) (*dg)[m](i, j) = (*dg)[m](j, i) = s.grad[m];
            if (order >= 2 && d2g)
                for (int m = 0; m < n; ++m)
                    for (int l = 0; l < n; ++l) (*d2g)[m * n + l](i, j) = (*d2g)[m * n + l](j, i) = s.hess(m, l);
        }
}

TwoFormField::TwoFormField(int n, std::vector<ScalarFieldPtr> packed) : n_(n), packed_(std::move(packed)) {
    if (static_cast<int>(packed_.size()) != pair_count(n))
        throw BadParameters("two-form needs n(n-1)/2 components");
    for (auto& f : packed_)
        if (f && f->dim() != n) throw BadParameters("two-form component has wrong dimension");
}

TwoFormField TwoFormField::zero(int n) { return TwoFormField(n, std::vector<ScalarFieldPtr>(pair_count(n))); }

TwoFormField TwoFormField::constant(const Mat& omega) {
    const int n = static_cast<int>(omega.rows());
    if ((omega + omega.transpose()).norm() > 1e-12 * (1.0 + omega.norm()))
        throw NotAntisymmetric("constant two-form matrix is not antisymmetric");
    std::vector<ScalarFieldPtr> packed(pair_count(n));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (omega(i, j) != 0.0) packed[pair_index(n, i, j)] = std::make_shared<ConstantScalarField>(n, omega(i, j));
    return TwoFormField(n, packed);
}

bool TwoFormField::is_zero() const {
    for (auto& f : packed_)
        if (f) return false;
    return true;
}

const ScalarFieldPtr& TwoFormField::component(int i, int j) const { return packed_[pair_index(n_, i, j)]; }

void TwoFormField::eval(const Vec& z, int order, Mat& omega, std::array<Mat, kMaxDim>* domega) const {
    const int n = n_;
    omega = Mat::Zero(n, n);
    if (order >= 1 && domega)
        for (int m = 0; m < n; ++m) (*domega)[m] = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const auto& f = packed_[pair_index(n, i, j)];
            if (!f) continue;
            ScalarJet s = f->eval(z, order >= 1 ? 1 : 0);
            omega(i, j) = s.value;
            omega(j, i) = -s.value;
            if (order >= 1 && domega)
                for (int m = 0; m < n; ++m) {
                    (*domega)[m](i, j) = s.grad[m];
                    (*domega)[m](j, i) = -s.grad[m];
                }
        }
}

Mat TwoFormField::value(const Vec& z) const {
    Mat w;
    eval(z, 0, w, nullptr);
    return w;
}

MagneticSystem::MagneticSystem(Chart chart, MetricPtr g0, ScalarFieldPtr c, TwoFormField omega, ScalarFieldPtr rho)
    : chart_(std::move(chart)), g0_(std::move(g0)), c_(std::move(c)), omega_(std::move(omega)), rho_(std::move(rho)) {
    const int n = chart_.dim();
    if (!g0_ || g0_->dim() != n) throw BadParameters("background metric dimension mismatch");
    if (!c_ || c_->dim() != n) throw BadParameters("conformal factor dimension mismatch");
    if (omega_.dim() != n) throw BadParameters("two-form dimension mismatch");
    if (!rho_ || rho_->dim() != n) throw BadParameters("boundary function dimension mismatch");
}

MagneticSystem MagneticSystem::with_conformal(ScalarFieldPtr c) const {
    MagneticSystem s = *this;
    s.c_ = std::move(c);
    return s;
}

MagneticSystem MagneticSystem::with_form(TwoFormField omega) const {
    MagneticSystem s = *this;
    s.omega_ = std::move(omega);
    return s;
}

LocalGeometry MagneticSystem::geometry(const Vec& z, bool derivatives) const {
    chart_.require(z);
    if (probe_) probe_->touch(z);
    const int n = dim();
    LocalGeometry G;
    G.n = n;
    G.gamma = Tensor3(n);
    const bool flat = g0_->is_constant();

    Mat g0;
    std::array<Mat, kMaxDim> dg;
    std::array<Mat, kMaxDim * kMaxDim> d2g;
    g0_->eval(z, flat ? 0 : (derivatives ? 2 : 1), g0, flat ? nullptr : &dg, flat ? nullptr : &d2g);
    Mat g0inv = g0.inverse();

    ScalarJet cj = c_->eval(z, derivatives ? 2 : 1);
    if (!(cj.value > 0)) throw BadParameters("conformal factor must be positive");
    const double c = cj.value;
    Vec a = cj.grad / c;
    Vec b = g0inv * a;
    G.c = c;
    G.dlnc = a;
    G.g = c * c * g0;
    G.g_inv = g0inv / (c * c);

    // Levi-Civita connection of g0 when it is not constant.
    Tensor3 gam0(n);
    std::array<Mat, kMaxDim> dg0inv;
    if (!flat) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) {
                    double s = 0;
                    for (int l = 0; l < n; ++l) s += g0inv(i, l) * (dg[j](l, k) + dg[k](l, j) - dg[l](j, k));
                    gam0(i, j, k) = 0.5 * s;
                }
        for (int m = 0; m < n; ++m) dg0inv[m] = -g0inv * dg[m] * g0inv;
    }

    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                double s = gam0(i, j, k) - g0(j, k) * b[i];
                if (i == k) s += a[j];
                if (i == j) s += a[k];
                G.gamma(i, j, k) = s;
            }

    Mat omega;
    std::array<Mat, kMaxDim> domega;
    omega_.eval(z, derivatives ? 1 : 0, omega, derivatives ? &domega : nullptr);
    G.Y = -G.g_inv * omega;

    if (!derivatives) return G;
    G.has_derivatives = true;
    G.dgamma = Tensor4(n);
    Mat da(n, n);  // da(m, j) = d_m d_j ln c
    for (int m = 0; m < n; ++m)
        for (int j = 0; j < n; ++j) da(m, j) = cj.hess(m, j) / c - a[m] * a[j];
    Mat db(n, n);  // db(m, i) = d_m b^i
    for (int m = 0; m < n; ++m) {
        Vec col = g0inv * da.row(m).transpose();
        if (!flat) col += dg0inv[m] * a;
        for (int i = 0; i < n; ++i) db(m, i) = col[i];
    }
    for (int m = 0; m < n; ++m)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) {
                    double s = -g0(j, k) * db(m, i);
                    if (i == k) s += da(m, j);
                    if (i == j) s += da(m, k);
                    if (!flat) {
                        s -= dg[m](j, k) * b[i];
                        double t = 0;
                        for (int l = 0; l < n; ++l) {
                            t += dg0inv[m](i, l) * (dg[j](l, k) + dg[k](l, j) - dg[l](j, k));
                            t += g0inv(i, l) *
                                 (d2g[m * n + j](l, k) + d2g[m * n + k](l, j) - d2g[m * n + l](j, k));
                        }
                        s += 0.5 * t;
                    }
                    G.dgamma(m, i, j, k) = s;
                }
    for (int m = 0; m < n; ++m) {
        Mat dginv = -2.0 * a[m] * G.g_inv;
        if (!flat) dginv += dg0inv[m] / (c * c);
        G.dY[m] = -(dginv * omega + G.g_inv * domega[m]);
    }
    return G;
}

Mat MagneticSystem::metric(const Vec& z) const {
    chart_.require(z);
    Mat g0;
    g0_->eval(z, 0, g0, nullptr, nullptr);
    double c = c_->eval(z, 0).value;
    return c * c * g0;
}

double MagneticSystem::speed(const Vec& z, const Vec& v) const {
    Mat g = metric(z);
    return std::sqrt(v.dot(g * v));
}

Vec MagneticSystem::acceleration(const Vec& z, const Vec& v) const {
    LocalGeometry G = geometry(z, false);
    const int n = G.n;
    Vec acc = G.Y * v;
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) s += G.gamma(i, j, k) * v[j] * v[k];
        acc[i] -= s;
    }
    return acc;
}

void MagneticSystem::acceleration_jacobian(const Vec& z, const Vec& v, Vec& acc, Mat& da_dz, Mat& da_dv) const {
    LocalGeometry G = geometry(z, true);
    const int n = G.n;
    acc = G.Y * v;
    da_dv = G.Y;
    da_dz = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) {
            double gv = 0;
            for (int k = 0; k < n; ++k) gv += G.gamma(i, j, k) * v[k];
            s += gv * v[j];
            da_dv(i, j) -= 2.0 * gv;
        }
        acc[i] -= s;
    }
    for (int m = 0; m < n; ++m) {
        Vec yv = G.dY[m] * v;
        for (int i = 0; i < n; ++i) {
            double s = 0;
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) s += G.dgamma(m, i, j, k) * v[j] * v[k];
            da_dz(i, m) = yv[i] - s;
        }
    }
}

bool Localizer::contains(const Vec& z) const {
    return x->eval(z, 0).value > 0 && rho->eval(z, 0).value >= 0;
}

namespace fields {

Mat metric_at(const MagneticSystem& sys, const Vec& z) { return sys.metric(z); }

Tensor3 christoffel(const MagneticSystem& sys, const Vec& z) { return sys.geometry(z, false).gamma; }

Mat lorentz(const MagneticSystem& sys, const Vec& z) { return sys.geometry(z, false).Y; }

Mat form_from_lorentz(const Mat& g, const Mat& Y, double tol) {
    Mat omega = Y.transpose() * g;
    double scale = std::max(1.0, omega.norm());
    if ((omega + omega.transpose()).norm() > tol * scale)
        throw NotAntisymmetric("g Y is not antisymmetric");
    return 0.5 * (omega - omega.transpose());
}

double closedness_residual(const TwoFormField& omega, const Chart& chart) {
    const int n = omega.dim();
    if (chart.dim() != n) throw BadParameters("chart dimension mismatch");
    if (n < 3) return 0.0;
    const long N = chart.node_count();
    const int P = pair_count(n);
    std::vector<double> vals(static_cast<size_t>(N) * P, 0.0);
    for (long id = 0; id < N; ++id) {
        Mat w = omega.value(chart.node_point(id));
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) vals[id * P + pair_index(n, i, j)] = w(i, j);
    }
    auto comp = [&](long id, int i, int j) {
        if (i == j) return 0.0;
        if (i < j) return vals[id * P + pair_index(n, i, j)];
        return -vals[id * P + pair_index(n, j, i)];
    };
    auto deriv = [&](const std::array<int, kMaxDim>& idx, int axis, int i, int j) {
        auto lo = idx, hi = idx;
        lo[axis] -= 1;
        hi[axis] += 1;
        return (comp(chart.linear(hi), i, j) - comp(chart.linear(lo), i, j)) / (2.0 * chart.spacing(axis));
    };
    double worst = 0.0;
    for (long id = 0; id < N; ++id) {
        auto idx = chart.unravel(id);
        bool interior = true;
        for (int a = 0; a < n; ++a)
            if (idx[a] == 0 || idx[a] == chart.nodes(a) - 1) interior = false;
        if (!interior) continue;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                for (int k = j + 1; k < n; ++k) {
                    double s = deriv(idx, i, j, k) + deriv(idx, j, k, i) + deriv(idx, k, i, j);
                    worst = std::max(worst, std::abs(s));
                }
    }
    return worst;
}

double convexity_margin(const MagneticSystem& sys, const ScalarField& bfun, const Vec& z, const Vec& v, double tol) {
    ScalarJet bj = bfun.eval(z, 2);
    double gnorm_e = bj.grad.norm();
    if (std::abs(bj.value) > tol * std::max(1.0, gnorm_e))
        throw NotOnBoundary("point is not on the level set (value " + std::to_string(bj.value) + ")");
    LocalGeometry G = sys.geometry(z, false);
    double speed = std::sqrt(v.dot(G.g * v));
    if (std::abs(speed - 1.0) > 1e-6) throw NotUnitSpeed("tangent vector is not unit speed");
    if (std::abs(bj.grad.dot(v)) > tol * std::max(1.0, gnorm_e) * v.norm())
        throw NotTangent("vector is not tangent to the level set");
    const int n = G.n;
    double gn = std::sqrt(bj.grad.dot(G.g_inv * bj.grad));
    double hess = v.dot(bj.hess * v);
    for (int k = 0; k < n; ++k) {
        double s = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) s += G.gamma(k, i, j) * v[i] * v[j];
        hess -= s * bj.grad[k];
    }
    double lambda = -hess / gn;
    double force = (G.Y * v).dot(bj.grad) / gn;
    return lambda - force;
}

double convexity_margin(const MagneticSystem& sys, const Vec& z, const Vec& v, double tol) {
    return convexity_margin(sys, *sys.boundary(), z, v, tol);
}

Localizer concave_localizer(const MagneticSystem& sys, const Vec& p, double eps, double shift) {
    const int n = sys.dim();
    if (p.size() != n) throw BadParameters("localizer point dimension mismatch");
    if (eps < 0) throw BadParameters("localizer eps must be nonnegative");
    if (std::abs(sys.rho(p)) > 1e-8) throw NotOnBoundary("localizer point is not on the boundary");
    if (!(shift > 0)) throw EmptyRegion("localizer shift must be positive");
    Localizer L;
    L.p = p;
    L.eps = eps;
    L.shift = shift;
    L.rho = sys.boundary();
    ScalarFieldPtr rho = sys.boundary();
    L.x = std::make_shared<AnalyticScalarField>(n, [rho, p, eps, shift, n](const Vec& z, int order) {
        ScalarJet r = rho->eval(z, order);
        ScalarJet j;
        Vec d = z - p;
        j.value = -r.value - eps * d.squaredNorm() + shift;
        if (order >= 1) j.grad = -r.grad - 2.0 * eps * d;
        if (order >= 2) j.hess = -r.hess - 2.0 * eps * Mat::Identity(n, n);
        return j;
    });
    const Chart& chart = sys.chart();
    bool any = false;
    for (long id = 0; id < chart.node_count() && !any; ++id) {
        Vec z = chart.node_point(id);
        if (L.contains(z)) any = true;
    }
    if (!any) throw EmptyRegion("no chart node lies in {x > 0, rho >= 0}");
    return L;
}

}  // namespace fields
}  // namespace maglens
