#include "maglens/transform.hpp"

#include "maglens/quadrature.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <sstream>

namespace maglens {

AnalyticPair::AnalyticPair(int n, PhiFn phi, OmegaFn omega, SupportFn support)
    : n_(n), phi_(std::move(phi)), omega_(std::move(omega)), support_(std::move(support)) {}

void AnalyticPair::eval(const Vec& z, Vec& phi, Mat& omega) const {
    phi = phi_ ? phi_(z) : Vec(Vec::Zero(n_));
    omega = omega_ ? omega_(z) : Mat(Mat::Zero(n_, n_));
}

AnalyticPair difference_pair(const MagneticSystem& sys1, const MagneticSystem& sys2) {
    ScalarFieldPtr c1 = sys1.conformal(), c2 = sys2.conformal();
    auto phi = [c1, c2](const Vec& z) {
        ScalarJet a = c1->eval(z, 1), b = c2->eval(z, 1);
        return Vec(b.grad / b.value - a.grad / a.value);
    };
    auto omega = [sys1, sys2](const Vec& z) {
        return Mat(fields::metric_at(sys1, z) * (fields::lorentz(sys1, z) - fields::lorentz(sys2, z)));
    };
    return AnalyticPair(sys1.dim(), phi, omega);
}

namespace transform {

namespace {

FlowOptions relaxed(FlowOptions o) {
    o.unit_tol = std::numeric_limits<double>::infinity();
    return o;
}

PhaseVec packed(const PhaseState& s) {
    PhaseVec p(2 * s.dim());
    p << s.z, s.v;
    return p;
}

}  // namespace

IdentityParts identity_parts(const MagneticSystem& sys1, const MagneticSystem& sys2, const PhaseState& s0, double t,
                             int panels, bool force_identity, const FlowOptions& o) {
    const int n = sys1.dim();
    FlowOptions ro = relaxed(o);
    IdentityParts out;
    out.lhs = PhaseVec::Zero(2 * n);
    out.rhs = PhaseVec::Zero(2 * n);
    if (t <= 0) return out;
    out.lhs = packed(flow::flow_to(sys1, s0, t, ro)) - packed(flow::flow_to(sys2, s0, t, ro));

    Trajectory path = flow::integrate(sys1, s0, t, ro);
    std::vector<double> ts, ws;
    composite_gauss(0.0, t, panels, 2, ts, ws);
    for (size_t k = 0; k < ts.size(); ++k) {
        PhaseState x = path.state(ts[k]);
        PhaseVec dv = flow::generator(sys1, x) - flow::generator(sys2, x);
        if (force_identity) {
            out.rhs += ws[k] * dv;
        } else {
            PhaseMat J = flow::flow_with_variation(sys2, x, t - ts[k], ro).second;
            out.rhs += ws[k] * (J * dv);
        }
    }
    out.residual = (out.lhs - out.rhs).norm() / (out.lhs.norm() + out.rhs.norm() + 1.0);
    return out;
}

double identity_residual(const MagneticSystem& sys1, const MagneticSystem& sys2, const PhaseState& s0, double t,
                         int panels, bool force_identity, const FlowOptions& o) {
    return identity_parts(sys1, sys2, s0, t, panels, force_identity, o).residual;
}

Mat weight_A(const MagneticSystem& sys2, const PhaseState& s, const FlowOptions& o) {
    const int n = sys2.dim();
    ExitEvent ev;
    try {
        ev = flow::exit_event(sys2, s, relaxed(o), true);
    } catch (const Trapped& e) {
        throw WeightFailure(e.what());
    }
    return ev.variation.bottomRightCorner(n, n);
}

Mat weight_B(const MagneticSystem& sys, const PhaseState& s, double unit_tol) {
    flow::require_unit(sys, s, unit_tol);
    Mat g0;
    sys.background()->eval(s.z, 0, g0, nullptr, nullptr);
    double c = sys.conformal()->value(s.z);
    return 2.0 * s.v * s.v.transpose() - g0.inverse() / (c * c);
}

namespace {

void ray_nodes(const Trajectory& ray, const TransformOptions& opt, std::vector<double>& ts, std::vector<double>& ws) {
    // Short steps are merged until a span reaches one panel.
    std::vector<double> knots = ray.knots();
    if (knots.size() < 2) return;
    double a = knots[0];
    for (size_t s = 1; s < knots.size(); ++s) {
        double b = knots[s];
        if (b - a < opt.max_panel && s + 1 < knots.size()) continue;
        int panels = std::max(1, static_cast<int>(std::ceil((b - a) / opt.max_panel)));
        composite_gauss(a, b, panels, opt.gauss, ts, ws);
        a = b;
    }
}

}  // namespace

RayWeightSample ray_weights(const MagneticSystem& sys1, const MagneticSystem& sys2, const Trajectory& ray,
                            const std::function<bool(const Vec&)>& keep, const TransformOptions& opt) {
    const int n = sys1.dim();
    const double ell = ray.duration();
    RayWeightSample rw;
    if (ell <= 0) return rw;
    FlowOptions ro = relaxed(opt.flow);
    std::vector<double> ts, ws;
    ray_nodes(ray, opt, ts, ws);
    for (size_t k = 0; k < ts.size(); ++k) {
        PhaseState x = ray.state(ts[k]);
        if (keep && !keep(x.z)) continue;
        Mat A;
        if (opt.force_A_identity)
            A = Mat::Identity(n, n);
        else if (opt.a_rule == ARule::ExitTime)
            A = weight_A(sys2, x, opt.flow);
        else
            A = flow::flow_with_variation(sys2, x, ell - ts[k], ro).second.bottomRightCorner(n, n);
        rw.t.push_back(ts[k]);
        rw.weight.push_back(ws[k]);
        rw.B.push_back(weight_B(sys1, x, 1e-6));
        rw.g_inv.push_back(sys1.geometry(x.z, false).g_inv);
        rw.state.push_back(std::move(x));
        rw.A.push_back(std::move(A));
    }
    return rw;
}

RayWeightSample self_ray_weights(const MagneticSystem& sys, const Trajectory& ray,
                                 const std::function<bool(const Vec&)>& keep, const TransformOptions& opt) {
    if (!ray.has_variation()) throw BadParameters("self_ray_weights needs a trajectory with variation");
    const int n = sys.dim();
    const double ell = ray.duration();
    RayWeightSample rw;
    if (ell <= 0) return rw;
    std::vector<double> ts, ws;
    ray_nodes(ray, opt, ts, ws);
    PhaseMat end = ray.variation(ell);
    for (size_t k = 0; k < ts.size(); ++k) {
        PhaseState x = ray.state(ts[k]);
        if (keep && !keep(x.z)) continue;
        Mat A;
        if (opt.force_A_identity) {
            A = Mat::Identity(n, n);
        } else {
            // J(ell - s, X(s)) = J(ell, X(0)) J(s, X(0))^{-1}
            PhaseMat J = end * ray.variation(ts[k]).partialPivLu().inverse();
            A = J.bottomRightCorner(n, n);
        }
        rw.t.push_back(ts[k]);
        rw.weight.push_back(ws[k]);
        rw.B.push_back(weight_B(sys, x, 1e-6));
        rw.g_inv.push_back(sys.geometry(x.z, false).g_inv);
        rw.state.push_back(std::move(x));
        rw.A.push_back(std::move(A));
    }
    return rw;
}

Vec apply_weights(const RayWeightSample& rw, const PairField& pair) {
    const int n = pair.dim();
    Vec out = Vec::Zero(n);
    Vec phi;
    Mat omega;
    for (size_t k = 0; k < rw.t.size(); ++k) {
        const PhaseState& x = rw.state[k];
        if (!pair.supported(x.z)) continue;
        pair.eval(x.z, phi, omega);
        out += rw.weight[k] * (rw.A[k] * (rw.B[k] * phi + rw.g_inv[k] * (omega * x.v)));
    }
    return out;
}

Vec i_ab(const MagneticSystem& sys1, const MagneticSystem& sys2, const PairField& pair, const Trajectory& ray,
         const TransformOptions& opt) {
    RayWeightSample rw = ray_weights(sys1, sys2, ray, [&](const Vec& z) { return pair.supported(z); }, opt);
    return apply_weights(rw, pair);
}

Vec i_w(const GeneralSystem& sys, const WeightFn& W, const VectorFn& phi, const Trajectory& curve,
        const TransformOptions& opt) {
    const int n = sys.base.dim();
    Vec out = Vec::Zero(n);
    std::vector<double> ts, ws;
    ray_nodes(curve, opt, ts, ws);
    for (size_t k = 0; k < ts.size(); ++k) {
        PhaseState x = curve.state(ts[k]);
        double speed = sys.base.speed(x.z, x.v);
        if (!(speed > 1e-12)) {
            std::ostringstream os;
            os << "curve speed vanishes at s = " << ts[k];
            throw NonUnitReparamFailure(os.str());
        }
        out += ws[k] * speed * (W(x.z, Vec(x.v / speed)) * phi(x.z));
    }
    return out;
}

// ---- symbols ----

BSampler identity_b(int n) {
    return [n](const Eigen::VectorXd&) { return Eigen::MatrixXd::Identity(n, n); };
}

BSampler paper_b(int n) {
    return [n](const Eigen::VectorXd& w) {
        Eigen::VectorXd v = w.normalized();
        return Eigen::MatrixXd(2.0 * v * v.transpose() - Eigen::MatrixXd::Identity(n, n));
    };
}

namespace {

double smooth_edge(double x) { return x > 0 ? std::exp(-1.0 / x) : 0.0; }

// 1 on [0, 1/2], 0 beyond 1, C-infinity in between.
double flat_top(double t) {
    double x = (1.0 - t) / 0.5;
    double a = smooth_edge(x), b = smooth_edge(1.0 - x);
    return a + b > 0 ? a / (a + b) : 0.0;
}

void check_symbol_args(int n, const Eigen::VectorXd& eta, const Eigen::MatrixXd& A0) {
    if (n < 3) throw BadParameters("symbol checks need n >= 3");
    if (eta.size() != n - 1) throw BadParameters("eta must have n - 1 components");
    if (A0.rows() != n || A0.cols() != n) throw BadParameters("A0 must be n x n");
}

// M = [B, w_0 I, ..., w_{n-1} I] so that M [phi; vec(Phi)] = B phi + Phi w.
template <class Scalar>
Eigen::Matrix<Scalar, -1, -1> row_map(int n, const Eigen::MatrixXd& B, const Eigen::Matrix<Scalar, -1, 1>& w) {
    Eigen::Matrix<Scalar, -1, -1> M = Eigen::Matrix<Scalar, -1, -1>::Zero(n, n + n * n);
    M.leftCols(n) = B.cast<Scalar>();
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) M(i, n + n * j + i) = w[j];
    return M;
}

void finish(SymbolReport& rep, int n, const Eigen::VectorXcd& null_dir) {
    rep.hermitian_defect = (rep.H - rep.H.adjoint()).cwiseAbs().maxCoeff();
    Eigen::MatrixXcd Hs = 0.5 * (rep.H + rep.H.adjoint());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> full(Hs, Eigen::EigenvaluesOnly);
    rep.min_eig_full = full.eigenvalues().minCoeff();
    Eigen::MatrixXcd P = constrained_basis(n).cast<std::complex<double>>();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> con(P.adjoint() * Hs * P, Eigen::EigenvaluesOnly);
    rep.min_eig_constrained = con.eigenvalues().minCoeff();
    rep.null_vector = null_dir / null_dir.norm();
    rep.null_residual = (rep.H * rep.null_vector).norm();
}

// phi = 0, Phi row k = c_k r with c = (1, ..., 1) / sqrt(n).
Eigen::VectorXcd row_parallel(int n, const Eigen::VectorXcd& r) {
    Eigen::VectorXcd u = Eigen::VectorXcd::Zero(n + n * n);
    const double ck = 1.0 / std::sqrt(static_cast<double>(n));
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) u[n + n * j + k] = ck * r[j];
    return u;
}

}  // namespace

Cutoff gaussian_cutoff(double sigma) {
    if (!(sigma > 0)) throw BadParameters("cutoff width must be positive");
    Cutoff c;
    c.radius = 4.0 * sigma;
    c.f = [sigma](double s) {
        double t = std::abs(s) / (4.0 * sigma);
        if (t >= 1.0) return 0.0;
        return std::exp(-s * s / (2 * sigma * sigma)) * flat_top(t);
    };
    return c;
}

Cutoff bump_cutoff(double radius) {
    if (!(radius > 0)) throw BadParameters("cutoff radius must be positive");
    Cutoff c;
    c.radius = radius;
    c.f = [radius](double s) {
        double q = s / radius;
        return std::abs(q) < 1.0 ? std::exp(1.0 - 1.0 / (1.0 - q * q)) : 0.0;
    };
    return c;
}

Eigen::MatrixXd constrained_basis(int n) {
    const int P = pair_count(n);
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(n + n * n, n + P);
    for (int i = 0; i < n; ++i) basis(i, i) = 1.0;
    const double s = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            int col = n + pair_index(n, i, j);
            basis(n + n * j + i, col) = s;   // Phi(i, j)
            basis(n + n * i + j, col) = -s;  // Phi(j, i)
        }
    return basis;
}

SphereRule sphere_rule(int d, int order) {
    SphereRule r;
    if (d == 0) {
        for (double s : {1.0, -1.0}) {
            r.points.push_back(Eigen::VectorXd::Constant(1, s));
            r.weights.push_back(1.0);
        }
        return r;
    }
    if (d == 1) {
        for (int k = 0; k < order; ++k) {
            double th = 2 * M_PI * k / order;
            r.points.push_back((Eigen::VectorXd(2) << std::cos(th), std::sin(th)).finished());
            r.weights.push_back(2 * M_PI / order);
        }
        return r;
    }
    SphereRule sub = sphere_rule(d - 1, order);
    const QuadratureRule& gl = gauss_legendre(order);
    for (int k = 0; k < order; ++k) {
        double th = M_PI * gl.nodes[k];
        double wt = M_PI * gl.weights[k] * std::pow(std::sin(th), d - 1);
        for (size_t j = 0; j < sub.points.size(); ++j) {
            Eigen::VectorXd p(d + 1);
            p[0] = std::cos(th);
            p.tail(d) = std::sin(th) * sub.points[j];
            r.points.push_back(std::move(p));
            r.weights.push_back(wt * sub.weights[j]);
        }
    }
    return r;
}

SymbolReport symbol_boundary(int n, double xi, const Eigen::VectorXd& eta, double F, const Eigen::MatrixXd& A0,
                             const BSampler& B, double alpha, const SymbolOptions& so) {
    check_symbol_args(n, eta, A0);
    if (!(F > 0)) throw BadParameters("F must be positive");
    if (!(alpha > 0)) throw BadParameters("alpha must be positive");
    if (xi == 0.0 && eta.norm() == 0.0) throw BadParameters("(xi, eta) must be nonzero");
    using C = std::complex<double>;
    const double q = xi * xi + F * F;
    const Eigen::MatrixXcd AA = (A0.transpose() * A0).cast<C>();
    SphereRule sr = sphere_rule(n - 2, so.sphere_order);
    SymbolReport rep;
    rep.H = Eigen::MatrixXcd::Zero(n + n * n, n + n * n);
    for (size_t k = 0; k < sr.points.size(); ++k) {
        const Eigen::VectorXd& Yh = sr.points[k];
        double ye = Yh.dot(eta);
        double damp = std::exp(-ye * ye / (2.0 * alpha * q / F));
        Eigen::VectorXcd w(n);
        w[0] = -C(xi, -F) * ye / q;
        for (int j = 1; j < n; ++j) w[j] = Yh[j - 1];
        Eigen::VectorXd dir = Eigen::VectorXd::Zero(n);
        dir.tail(n - 1) = Yh;
        Eigen::MatrixXcd M = row_map<C>(n, B(dir), w);
        rep.H += (sr.weights[k] * damp) * (M.adjoint() * AA * M);
    }
    rep.H /= std::sqrt(q);
    Eigen::VectorXcd r(n);
    r[0] = C(xi, F);
    for (int j = 1; j < n; ++j) r[j] = eta[j - 1];
    finish(rep, n, row_parallel(n, r));
    return rep;
}

SymbolReport symbol_fiber_infinity(int n, double xi, const Eigen::VectorXd& eta, const Cutoff& chi,
                                   const Eigen::MatrixXd& A0, const BSampler& B, const SymbolOptions& so) {
    check_symbol_args(n, eta, A0);
    double norm = std::sqrt(xi * xi + eta.squaredNorm());
    if (norm == 0.0) throw BadParameters("zeta must be nonzero");
    if (!chi.f || !(chi.radius > 0)) throw BadParameters("cutoff is undefined");
    if (!(chi.f(0.0) > 0)) throw BadParameters("cutoff must be positive at 0");
    for (int k = 0; k <= 200; ++k) {
        double s = chi.radius * k / 200.0;
        double a = chi.f(s), b = chi.f(-s);
        if (a < 0 || b < 0) throw BadParameters("cutoff must be nonnegative");
        if (std::abs(a - b) > 1e-12 * std::max(1.0, std::abs(a))) throw BadParameters("cutoff must be even");
    }
    xi /= norm;
    Eigen::VectorXd et = eta / norm;
    const Eigen::MatrixXd AA = A0.transpose() * A0;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n + n * n, n + n * n);
    auto add = [&](double s, const Eigen::VectorXd& Yh, double weight) {
        Eigen::VectorXd w(n);
        w[0] = s;
        w.tail(n - 1) = Yh;
        Eigen::MatrixXd M = row_map<double>(n, B(w), w);
        H += weight * (M.transpose() * AA * M);
    };
    // The slice {xi S + eta . Yh = 0} with the measure delta(xi S + eta . Yh) dS dYh.
    if (std::abs(xi) >= et.norm()) {
        SphereRule sr = sphere_rule(n - 2, so.sphere_order);
        for (size_t k = 0; k < sr.points.size(); ++k) {
            double s = -et.dot(sr.points[k]) / xi;
            double c = chi.f(s);
            if (c > 0) add(s, sr.points[k], sr.weights[k] * c / std::abs(xi));
        }
    } else {
        const double en = et.norm();
        Eigen::VectorXd eh = et / en;
        // Orthonormal complement of eh in R^{n-1}.
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(eh);
        Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n - 1, n - 1);
        Eigen::MatrixXd perp = Q.rightCols(n - 2);
        SphereRule sub = sphere_rule(n - 3, so.sphere_order);
        std::vector<double> ts, ws;
        composite_gauss(-chi.radius, chi.radius, 1, so.line_order, ts, ws);
        for (size_t k = 0; k < ts.size(); ++k) {
            double s = ts[k];
            double c = chi.f(s);
            if (!(c > 0)) continue;
            double a = -xi * s / en;
            if (std::abs(a) >= 1.0) continue;
            double rad = std::sqrt(1.0 - a * a);
            double jac = std::pow(rad, n - 4) / en;
            for (size_t j = 0; j < sub.points.size(); ++j) {
                Eigen::VectorXd Yh = a * eh + rad * (perp * sub.points[j]);
                add(s, Yh, ws[k] * c * jac * sub.weights[j]);
            }
        }
    }
    SymbolReport rep;
    rep.H = H.cast<std::complex<double>>();
    Eigen::VectorXcd r(n);
    r[0] = xi;
    for (int j = 1; j < n; ++j) r[j] = et[j - 1];
    finish(rep, n, row_parallel(n, r));
    return rep;
}

}  // namespace transform
}  // namespace maglens
