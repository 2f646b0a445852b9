#pragma once

#include "maglens/lens.hpp"
#include "maglens/transform.hpp"

#include <Eigen/Sparse>

#include <functional>
#include <string>
#include <vector>

namespace maglens {

// Unknowns per node: n values of phi, then omega_ij (i < j) in pair_index order.
inline int pair_unknowns(int n) { return n + pair_count(n); }

enum class Basis { Linear, Cubic };

// Chart nodes that carry unknowns. Every other node holds zero. Fields are
// sums of node coefficients times tensor-product hat functions (Linear) or
// cubic B-splines (Cubic); a region set with `region` also clips them to zero
// outside it.
class NodeSet {
public:
    NodeSet() = default;
    NodeSet(Chart chart, const std::function<bool(long)>& keep, Basis basis = Basis::Linear);
    // Nodes whose point satisfies `inside`; fields are clipped to `inside`.
    static NodeSet region(const Chart& chart, const std::function<bool(const Vec&)>& inside,
                          Basis basis = Basis::Linear);

    const Chart& chart() const { return chart_; }
    int dim() const { return chart_.dim(); }
    Basis basis() const { return basis_; }
    long size() const { return static_cast<long>(nodes_.size()); }
    long node(long slot) const { return nodes_[slot]; }
    long slot(long id) const { return slot_[id]; }
    const std::vector<long>& nodes() const { return nodes_; }
    bool inside(const Vec& z) const { return !clip_ || clip_(z); }

    // Basis weights (slot, weight) of the active nodes at z; empty outside the region.
    void stencil(const Vec& z, std::vector<std::pair<long, double>>& out) const;

private:
    Chart chart_;
    Basis basis_ = Basis::Linear;
    std::vector<long> nodes_;
    std::vector<long> slot_;
    std::function<bool(const Vec&)> clip_;
};

// Pair field given by coefficients on a NodeSet.
class GridPair : public PairField {
public:
    GridPair() = default;
    GridPair(NodeSet nodes, Eigen::VectorXd u);
    // Coefficients set to the node samples of f (interpolation for Linear).
    static GridPair sample(const NodeSet& nodes, const PairField& f);

    int dim() const override { return nodes_.dim(); }
    bool supported(const Vec& z) const override;
    void eval(const Vec& z, Vec& phi, Mat& omega) const override;

    const NodeSet& nodes() const { return nodes_; }
    const Eigen::VectorXd& values() const { return u_; }
    // Coefficients of one node.
    Vec phi_coef(long slot) const;
    Mat omega_coef(long slot) const;

private:
    NodeSet nodes_;
    Eigen::VectorXd u_;
};

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor, long>;

// One ray of a linear problem: the guess geodesic from `entry` over [0, ell]
// and its n data values.
struct RaySpec {
    long id = 0;
    PhaseState entry;
    double ell = 0.0;
    Vec rhs;
};

// Row r * n + i holds component i of ray r; column slot * pair_unknowns(n) + k
// holds unknown k of node `slot`.
struct LinearSystemAssembly {
    int dim = 0;
    NodeSet nodes;
    SparseRowMatrix design;
    Eigen::VectorXd rhs;
    double lambda_reg = 0.0;
    std::vector<long> row_ray;
    std::vector<int> row_component;
    long rays_failed = 0;  // rays whose guess flow left the chart (rows left empty)
};

struct SolveOptions {
    int max_iter = 5000;
    double tol = 1e-8;  // on the normal-equation residual, relative to its start
};

struct PerturbationPair {
    GridPair pair;
    int iterations = 0;
    double normal_residual = 0.0;
    double misfit = 0.0;  // |design u - rhs|
};

enum class LiftRole : char { Excluded = 0, Free = 1, Zero = 2 };

struct GradientLift {
    std::vector<double> h;      // per chart node
    double curl_residual = 0.0; // |grad h - phi| / |phi| over the edges used
};

struct NewtonOptions {
    TransformOptions transform;
    double lambda_reg = 0.0;     // 0 selects lambda_scale * rows / cols
    double lambda_scale = 1e-4;
    SolveOptions solve;
    double noise_floor = 1e-7;  // per-ray mismatch treated as zero below this
};

struct StepReport {
    double residual = 0.0;      // RMS exit-velocity mismatch before the update
    double update_norm = 0.0;   // max |h|, |omega| over the nodes
    long rays_used = 0;
    long rays_dropped = 0;
    int cg_iterations = 0;
    double curl_residual = 0.0;
};

struct ShellRecord {
    int index = 0;
    double t_hi = 0.0, t_lo = 0.0;
    double min_margin = 0.0;    // convexity margin over the sampled levels
    long nodes = 0;
    long rays = 0;
    std::vector<double> residuals;
    std::vector<double> updates;
    double deepest_read = 0.0;  // smallest f at which the guess was evaluated
    bool ahead_read = false;    // deepest_read below t_lo minus one grid spacing
    bool completed = false;
};

// Current guess (c, Omega) = (c_base e^q, Omega_base + w) with q and w stored
// at the nodes of the base system's chart.
class ReconstructionState {
public:
    ReconstructionState() = default;
    explicit ReconstructionState(MagneticSystem base);

    const MagneticSystem& base() const { return base_; }
    const MagneticSystem& system() const { return current_; }
    const std::vector<double>& log_c() const { return q_; }
    const std::vector<std::vector<double>>& form_correction() const { return w_; }
    void set(std::vector<double> q, std::vector<std::vector<double>> w);

    double c_at(long id) const;
    Mat omega_at(long id) const;

    int iteration = 0;
    std::vector<double> residuals;
    std::vector<StepReport> steps;
    std::vector<ShellRecord> shells;

private:
    void rebuild();

    MagneticSystem base_;
    MagneticSystem current_;
    std::vector<double> q_;
    std::vector<std::vector<double>> w_;
    std::vector<double> base_c_;
    std::vector<Mat> base_omega_;
};

struct LayerOptions {
    double t_top = 1.0;
    double t_bottom = 0.2;
    int shells = 6;
    int newton_iters = 2;
    double update_tol = 1e-10;   // a shell stops iterating once the update is this small
    int convexity_points = 96;   // sampled points per level
    Basis basis = Basis::Linear;
    NewtonOptions newton;
};

namespace invert {

LinearSystemAssembly assemble(const MagneticSystem& guess, const NodeSet& nodes, const std::vector<RaySpec>& rays,
                              const TransformOptions& opt = {});
// scale * rows / cols, the weight of the gradient penalty.
double default_lambda(const LinearSystemAssembly& a, double scale = 1e-4);
// Forward differences along every axis between active neighbours, per unknown.
SparseRowMatrix gradient_operator(const NodeSet& nodes, int components);
PerturbationPair solve_linear(const LinearSystemAssembly& a, double lambda_reg, const SolveOptions& so = {});

// Least-squares h with grad h = phi on chart edges between non-excluded nodes;
// Zero nodes are held at 0. `phi` has one entry per chart node.
GradientLift gradient_to_scalar(const Chart& chart, const std::vector<Vec>& phi, const std::vector<LiftRole>& roles);

// Chart nodes inside M and inside the localizer cap.
NodeSet cap_nodes(const MagneticSystem& sys, const Localizer& loc, Basis basis = Basis::Linear);
// Free on the node set, zero outside M, excluded elsewhere.
std::vector<LiftRole> boundary_roles(const MagneticSystem& sys, const NodeSet& nodes);

// Exit-velocity mismatch of the guess against measured records.
std::vector<Vec> lens_mismatch(const MagneticSystem& guess, const std::vector<LensRecord>& records,
                               const FlowOptions& o = {});
double lens_residual(const MagneticSystem& guess, const LensDataset& measured, const FlowOptions& o = {});

StepReport newton_step(ReconstructionState& state, const LensDataset& measured, const NodeSet& nodes,
                       const std::vector<LiftRole>& roles, const NewtonOptions& opt = {});

// Smallest convexity margin of {f = level} over sampled points and tangent
// directions, seen from {f < level}.
double level_margin(const MagneticSystem& sys, const ScalarField& f, double level, int points = 96);

// Shell-by-shell inward sweep over f from t_top to t_bottom. The state keeps
// the partial result and the shell log when ConvexityLost is thrown.
void layer_strip(ReconstructionState& state, const LensDataset& measured, ScalarFieldPtr f,
                 const LayerOptions& opt = {});

}  // namespace invert
}  // namespace maglens
