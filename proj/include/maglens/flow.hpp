#pragma once

#include "maglens/fields.hpp"
#include "maglens/ode.hpp"

#include <functional>

namespace maglens {

struct FlowOptions {
    ode::Options ode;
    double t_max = 50.0;        // Trapped beyond this
    double event_tol = 1e-10;   // |rho| at a refined exit
    double unit_tol = 1e-8;     // allowed deviation of |v|_g from 1
    double graze_tol = 1e-6;    // |d rho(v)| below this flags a grazing exit
    int event_samples = 4;      // interior samples per step when scanning for exits
    double exit_max_step = 0.2; // keeps stage points near M while scanning for exits
};

// Dense phase curve over [0, duration], optionally carrying the variation
// matrix d(Z, Xi)/d(z, v) as a column-major 2n x 2n block after the state.
class Trajectory {
public:
    Trajectory() = default;
    Trajectory(int n, bool with_variation, ode::DenseOutput dense, double duration);

    int dim() const { return n_; }
    bool has_variation() const { return with_variation_; }
    double duration() const { return duration_; }
    const ode::DenseOutput& dense() const { return dense_; }

    PhaseState state(double t) const;
    PhaseMat variation(double t) const;
    // Step boundaries clipped to [0, duration].
    std::vector<double> knots() const;

private:
    int n_ = 0;
    bool with_variation_ = false;
    ode::DenseOutput dense_;
    double duration_ = 0.0;
};

struct ExitEvent {
    double tau = 0.0;
    PhaseState exit;
    bool grazing = false;
    PhaseMat variation;  // filled when requested
};

// Second-order system driven by Gamma of (c^2 g0) and an arbitrary force G(z, v).
struct GeneralSystem {
    MagneticSystem base;
    std::function<Vec(const Vec&, const Vec&)> force;
};

OdeState pack_state(const PhaseState& s);
PhaseState unpack_state(const OdeState& y, int n);

namespace flow {

// (v, -Gamma(v, v) + Y v)
PhaseVec generator(const MagneticSystem& sys, const PhaseState& s);
Trajectory integrate(const MagneticSystem& sys, const PhaseState& s0, double T, const FlowOptions& o = {});
Trajectory variation(const MagneticSystem& sys, const PhaseState& s0, double T, const FlowOptions& o = {});
// State and variation matrix at time T without dense output.
std::pair<PhaseState, PhaseMat> flow_with_variation(const MagneticSystem& sys, const PhaseState& s0, double T,
                                                     const FlowOptions& o = {});
PhaseState flow_to(const MagneticSystem& sys, const PhaseState& s0, double T, const FlowOptions& o = {});
ExitEvent exit_event(const MagneticSystem& sys, const PhaseState& s0, const FlowOptions& o = {},
                     bool with_variation = false);

PhaseVec general_generator(const GeneralSystem& sys, const PhaseState& s);
Trajectory integrate_general(const GeneralSystem& sys, const PhaseState& s0, double T, const FlowOptions& o = {});
ExitEvent general_exit_event(const GeneralSystem& sys, const PhaseState& s0, const FlowOptions& o = {});

void require_unit(const MagneticSystem& sys, const PhaseState& s, double tol);

}  // namespace flow
}  // namespace maglens
