#pragma once

#include "maglens/flow.hpp"

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace maglens {

// The unknown pair [phi, Phi]: phi a vector field, omega an antisymmetric
// matrix field, Phi = g^{-1} omega for the metric of the system it is paired with.
class PairField {
public:
    virtual ~PairField() = default;
    virtual int dim() const = 0;
    // False where the pair vanishes identically (quadrature nodes are skipped).
    virtual bool supported(const Vec& z) const = 0;
    virtual void eval(const Vec& z, Vec& phi, Mat& omega) const = 0;
};

class AnalyticPair : public PairField {
public:
    using PhiFn = std::function<Vec(const Vec&)>;
    using OmegaFn = std::function<Mat(const Vec&)>;
    using SupportFn = std::function<bool(const Vec&)>;
    AnalyticPair(int n, PhiFn phi, OmegaFn omega, SupportFn support = {});
    int dim() const override { return n_; }
    bool supported(const Vec& z) const override { return !support_ || support_(z); }
    void eval(const Vec& z, Vec& phi, Mat& omega) const override;

private:
    int n_;
    PhiFn phi_;
    OmegaFn omega_;
    SupportFn support_;
};

// The exact pair of two systems sharing g0: phi = d ln(c2 / c1) and
// omega = g1 (Y1 - Y2), so that Phi = Y1 - Y2 for system 1.
AnalyticPair difference_pair(const MagneticSystem& sys1, const MagneticSystem& sys2);

enum class ARule {
    ExitTime,       // A(z, v) = dXi2/dv at the exit time of system 2 from (z, v)
    RemainingTime,  // dXi2/dv at time ell - s, the exact weight of the integral identity
};

struct TransformOptions {
    int gauss = 4;             // points per panel
    double max_panel = 0.05;   // panel length cap along the ray
    ARule a_rule = ARule::ExitTime;
    bool force_A_identity = false;  // negative control only
    FlowOptions flow;
};

// Per-node weights along one ray.
struct RayWeightSample {
    std::vector<double> t;       // node times
    std::vector<double> weight;  // quadrature weights
    std::vector<PhaseState> state;
    std::vector<Mat> A, B, g_inv;
};

namespace transform {

// Time integration of V - V2 weighted by the variation of system 2:
//   X(t) - X2(t) = int_0^t dX2/dsigma(t - s, X(s)) (V - V2)(X(s)) ds.
struct IdentityParts {
    PhaseVec lhs, rhs;
    double residual = 0.0;
};
IdentityParts identity_parts(const MagneticSystem& sys1, const MagneticSystem& sys2, const PhaseState& s0, double t,
                             int panels, bool force_identity = false, const FlowOptions& o = {});
// ||lhs - rhs|| / (||lhs|| + ||rhs|| + 1) with `panels` two-point Gauss panels.
double identity_residual(const MagneticSystem& sys1, const MagneticSystem& sys2, const PhaseState& s0, double t,
                         int panels = 16, bool force_identity = false, const FlowOptions& o = {});
// Two-point Gauss has nominal order 4.
inline constexpr double kIdentityOrder = 4.0;

Mat weight_A(const MagneticSystem& sys2, const PhaseState& s, const FlowOptions& o = {});
Mat weight_B(const MagneticSystem& sys, const PhaseState& s, double unit_tol = 1e-8);

// Nodes and weights along the ray of sys1 from s0 over [0, ell]; A from sys2,
// B from sys1. Nodes where `keep` is false are dropped before any A solve.
RayWeightSample ray_weights(const MagneticSystem& sys1, const MagneticSystem& sys2, const Trajectory& ray,
                            const std::function<bool(const Vec&)>& keep, const TransformOptions& opt = {});
// Both weights from `sys` along its own trajectory, which must carry the
// variation; A then follows from the cocycle property without further solves.
RayWeightSample self_ray_weights(const MagneticSystem& sys, const Trajectory& ray,
                                 const std::function<bool(const Vec&)>& keep, const TransformOptions& opt = {});
Vec apply_weights(const RayWeightSample& rw, const PairField& pair);

// int A (B phi + Phi v) dt along the ray of sys1.
Vec i_ab(const MagneticSystem& sys1, const MagneticSystem& sys2, const PairField& pair, const Trajectory& ray,
         const TransformOptions& opt = {});

// int W(gamma, gamma'/|gamma'|) phi(gamma) |gamma'|_g ds, i.e. the unit-speed
// reparametrized transform of a general curve.
using WeightFn = std::function<Mat(const Vec&, const Vec&)>;
using VectorFn = std::function<Vec(const Vec&)>;
Vec i_w(const GeneralSystem& sys, const WeightFn& W, const VectorFn& phi, const Trajectory& curve,
        const TransformOptions& opt = {});

// ---- symbols ----

using BSampler = std::function<Eigen::MatrixXd(const Eigen::VectorXd& w)>;
BSampler identity_b(int n);
// 2 v v^T - Id with v = w / |w| (the unit-speed weight in an orthonormal frame).
BSampler paper_b(int n);

// Even cutoff chi with support [-radius, radius].
struct Cutoff {
    std::function<double(double)> f;
    double radius = 1.0;
};
// Gaussian exp(-s^2 / (2 sigma^2)) times a smooth flat-top window vanishing at 4 sigma.
Cutoff gaussian_cutoff(double sigma = 0.25);
Cutoff bump_cutoff(double radius = 1.0);

struct SymbolReport {
    Eigen::MatrixXcd H;           // on phi (n) + Phi (n^2, column-major) coordinates
    double min_eig_constrained = 0.0;
    double min_eig_full = 0.0;
    Eigen::VectorXcd null_vector;  // predicted kernel direction of the full form
    double null_residual = 0.0;    // |H null| / |null|
    double hermitian_defect = 0.0;
};

struct SymbolOptions {
    int sphere_order = 96;  // nodes per angular direction
    int line_order = 64;    // nodes in S for the fiber-infinity slice
};

SymbolReport symbol_boundary(int n, double xi, const Eigen::VectorXd& eta, double F, const Eigen::MatrixXd& A0,
                             const BSampler& B, double alpha, const SymbolOptions& so = {});
SymbolReport symbol_fiber_infinity(int n, double xi, const Eigen::VectorXd& eta, const Cutoff& chi,
                                   const Eigen::MatrixXd& A0, const BSampler& B, const SymbolOptions& so = {});

// Basis (columns) of the constrained space: phi free, Phi antisymmetric.
Eigen::MatrixXd constrained_basis(int n);

// Quadrature on the unit sphere S^d in R^{d+1}.
struct SphereRule {
    std::vector<Eigen::VectorXd> points;
    std::vector<double> weights;
};
SphereRule sphere_rule(int d, int order);

}  // namespace transform
}  // namespace maglens
