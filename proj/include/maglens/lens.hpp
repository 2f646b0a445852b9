#pragma once

#include "maglens/flow.hpp"

#include <string>
#include <vector>

namespace maglens {

struct LensRecord {
    long id = 0;
    PhaseState entry;
    PhaseState exit;   // equals entry for trapped records
    double ell = 0.0;  // NaN for trapped records
    bool trapped = false;
    bool grazing = false;
};

// Fan of entries near S_p(dM): `points` boundary points in a cap of chart
// radius `cap` around p, `dirs` directions per point tilted inward from the
// tangent sphere by at most `width` radians. With `o_local` the inward tilt
// at a point is also capped by C sqrt(x), x the concave localizer.
// With `global` the points cover the whole boundary instead (directions from p
// projected onto rho = 0) and tilts are spread evenly in 1 - cos(tilt).
struct FanParams {
    Vec p;
    double cap = 0.3;
    double width = 0.5;
    int points = 16;
    int dirs = 16;
    bool o_local = false;
    double C = 1.0;
    double eps = 0.1;
    double shift = 0.05;
    bool global = false;
};

struct LensDataset {
    int dim = 0;
    std::string system_hash;
    FanParams fan;
    std::vector<LensRecord> records;
};

// Inward g-unit normal and a g-orthonormal basis of the tangent space of the
// level set of rho through z.
struct BoundaryFrame {
    Vec nu;
    std::vector<Vec> tangents;
};

// Magnetic potential alpha with d alpha = Omega, from the radial homotopy
// about a base point.
class Potential {
public:
    Potential() = default;
    Potential(TwoFormField omega, Vec base, int order = 24);
    int dim() const { return omega_.dim(); }
    Vec value(const Vec& z) const;
    // alpha + df, same Omega.
    Potential with_gauge(ScalarFieldPtr f) const;

private:
    TwoFormField omega_;
    Vec base_;
    int order_ = 24;
    ScalarFieldPtr gauge_;
};

struct ActionResult {
    double action = 0.0;  // T - int alpha
    double T = 0.0;
    Vec v;                // entry direction of the connecting geodesic
    int roots = 0;        // distinct connections found
};

struct ShootingOptions {
    int max_iter = 40;
    double tol = 1e-10;   // |Z(exit) - y|
    double tie_tol = 1e-8;
};

namespace lens {

BoundaryFrame boundary_frame(const MagneticSystem& sys, const Vec& z);
// Newton projection onto {rho = 0} along grad rho.
Vec project_to_boundary(const MagneticSystem& sys, const Vec& q);

LensRecord scatter(const MagneticSystem& sys, const PhaseState& entry, const FlowOptions& o = {});
// Entry states of the fan in record order (point-major).
std::vector<PhaseState> fan_entries(const MagneticSystem& sys, const FanParams& fan);
LensDataset sample_fan(const MagneticSystem& sys, const FanParams& fan, const FlowOptions& o = {});
// True if the trajectory of the record stays in {x >= -tol, rho >= -tol}.
bool is_o_local(const MagneticSystem& sys, const Localizer& loc, const LensRecord& rec, double tol = 1e-9,
                const FlowOptions& o = {});

Potential potential_from_form(const TwoFormField& omega, const Chart& chart, const Vec& base,
                              double closed_tol = 1e-3);

// T(x, y) and the boundary action T - int_gamma alpha over the connecting
// unit-speed geodesic, found by shooting from x.
ActionResult boundary_action(const MagneticSystem& sys, const Potential& alpha, const Vec& x, const Vec& y,
                             const ShootingOptions& so = {}, const FlowOptions& o = {});
// Line integral of alpha along the geodesic from s0 over [0, T].
double line_integral(const MagneticSystem& sys, const Potential& alpha, const PhaseState& s0, double T,
                     const FlowOptions& o = {});

// FNV-1a over the chart and all fields sampled at the chart nodes.
std::string system_hash(const MagneticSystem& sys);

// CSV at `path` plus a JSON sidecar at `path + ".json"`.
void write_dataset(const LensDataset& data, const std::string& path);
LensDataset read_dataset(const std::string& path);

}  // namespace lens
}  // namespace maglens
