#include "maglens/flow.hpp"

#include <cmath>
#include <sstream>

namespace maglens {

OdeState pack_state(const PhaseState& s) {
    const int n = s.dim();
    OdeState y(2 * n);
    y.head(n) = s.z;
    y.segment(n, n) = s.v;
    return y;
}

PhaseState unpack_state(const OdeState& y, int n) {
    PhaseState s;
    s.z = y.head(n);
    s.v = y.segment(n, n);
    return s;
}

Trajectory::Trajectory(int n, bool with_variation, ode::DenseOutput dense, double duration)
    : n_(n), with_variation_(with_variation), dense_(std::move(dense)), duration_(duration) {}

PhaseState Trajectory::state(double t) const {
    if (dense_.empty()) throw BadParameters("empty trajectory");
    return unpack_state(dense_.eval(t), n_);
}

PhaseMat Trajectory::variation(double t) const {
    if (!with_variation_) throw BadParameters("trajectory carries no variation");
    OdeState y = dense_.eval(t);
    const int m = 2 * n_;
    return Eigen::Map<const Eigen::MatrixXd>(y.data() + m, m, m);
}

std::vector<double> Trajectory::knots() const {
    std::vector<double> k{0.0};
    for (int s = 0; s < dense_.segments(); ++s) {
        double t = dense_.segment_end(s);
        if (t >= duration_) break;
        k.push_back(t);
    }
    k.push_back(duration_);
    return k;
}

namespace {

struct PhaseRhs {
    const MagneticSystem& sys;
    int n;
    void operator()(double, const OdeState& y, OdeState& dy) const {
        Vec z = y.head(n), v = y.segment(n, n);
        Vec a = sys.acceleration(z, v);
        dy.resize(2 * n);
        dy.head(n) = v;
        dy.segment(n, n) = a;
    }
};

struct VariationRhs {
    const MagneticSystem& sys;
    int n;
    void operator()(double, const OdeState& y, OdeState& dy) const {
        Vec z = y.head(n), v = y.segment(n, n);
        Vec a;
        Mat da_dz, da_dv;
        sys.acceleration_jacobian(z, v, a, da_dz, da_dv);
        const int m = 2 * n;
        dy.resize(m + m * m);
        dy.head(n) = v;
        dy.segment(n, n) = a;
        Eigen::Map<const Eigen::MatrixXd> J(y.data() + m, m, m);
        Eigen::Map<Eigen::MatrixXd> dJ(dy.data() + m, m, m);
        dJ.topRows(n) = J.bottomRows(n);
        dJ.bottomRows(n) = da_dz * J.topRows(n) + da_dv * J.bottomRows(n);
    }
};

struct GeneralRhs {
    const GeneralSystem& sys;
    int n;
    void operator()(double, const OdeState& y, OdeState& dy) const {
        Vec z = y.head(n), v = y.segment(n, n);
        LocalGeometry G = sys.base.geometry(z, false);
        Vec a = sys.force(z, v);
        for (int i = 0; i < n; ++i) {
            double s = 0;
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) s += G.gamma(i, j, k) * v[j] * v[k];
            a[i] -= s;
        }
        dy.resize(2 * n);
        dy.head(n) = v;
        dy.segment(n, n) = a;
    }
};

OdeState with_identity(const PhaseState& s) {
    const int n = s.dim();
    const int m = 2 * n;
    OdeState y(m + m * m);
    y.head(m) = pack_state(s);
    Eigen::Map<Eigen::MatrixXd>(y.data() + m, m, m).setIdentity();
    return y;
}

void check_status(const ode::Result& r) {
    if (r.status == ode::Status::StepFailure) {
        std::ostringstream os;
        os << "integrator gave up at t = " << r.t << " after " << r.steps << " steps";
        throw StepFailure(os.str());
    }
}

template <class Rhs>
Trajectory dense_run(Rhs rhs, const OdeState& y0, int n, bool var, double T, const FlowOptions& o) {
    ode::DenseOutput out(static_cast<int>(y0.size()));
    if (T <= 0.0) {
        // Degenerate curve: a single constant segment keeps evaluation uniform.
        OdeState r[8];
        r[0] = y0;
        for (int q = 1; q < 8; ++q) r[q] = OdeState::Zero(y0.size());
        out.append(0.0, 1.0, r);
        return Trajectory(n, var, std::move(out), 0.0);
    }
    auto res = ode::integrate(rhs, 0.0, y0, T, o.ode, true, [&](const ode::StepView& s) {
        out.append(s.t0, s.t1, s.r);
        return true;
    });
    check_status(res);
    return Trajectory(n, var, std::move(out), T);
}

template <class Rhs>
OdeState plain_run(Rhs rhs, const OdeState& y0, double T, const FlowOptions& o) {
    if (T == 0.0) return y0;
    auto res = ode::integrate(rhs, 0.0, y0, T, o.ode, false, [](const ode::StepView&) { return true; });
    check_status(res);
    return res.y;
}

// Finds the first outgoing zero of rho along the flow of `rhs` started at y0.
// `accel` gives the acceleration at the start for the tangential test.
template <class Rhs, class Accel>
std::pair<double, OdeState> find_exit(Rhs rhs, const OdeState& y0, int n, const ScalarField& rho, Accel accel,
                                      const FlowOptions& o, bool& grazing) {
    grazing = false;
    Vec z0 = y0.head(n), v0 = y0.segment(n, n);
    ScalarJet r0 = rho.eval(z0, 2);
    double gscale = std::max(1e-300, r0.grad.norm() * v0.norm());
    double dr = r0.grad.dot(v0);
    if (r0.value < -o.event_tol * 10) throw BadParameters("start point lies outside M");
    if (std::abs(r0.value) <= o.event_tol * 10) {
        if (dr < -o.graze_tol * gscale) return {0.0, y0};
        if (std::abs(dr) <= o.graze_tol * gscale) {
            double curv = v0.dot(r0.hess * v0) + r0.grad.dot(accel(z0, v0));
            if (curv < 0) {
                grazing = true;
                return {0.0, y0};
            }
        }
    }

    bool found = false;
    double ta = 0, tb = 0, step_t0 = 0, step_t1 = 0;
    OdeState step_y0, r[8];
    double prev = std::max(r0.value, 0.0);
    ode::Options oo = o.ode;
    oo.max_step = std::min(oo.max_step, o.exit_max_step);
    auto res = ode::integrate(rhs, 0.0, y0, o.t_max, oo, true, [&](const ode::StepView& s) {
        double tprev = s.t0;
        const int m = std::max(1, o.event_samples);
        for (int j = 1; j <= m; ++j) {
            double t = s.t0 + (s.t1 - s.t0) * j / m;
            OdeState y = j == m ? *s.y1 : s.eval(t);
            double val = rho.eval(y.head(n), 0).value;
            if (val < 0 && prev >= 0) {
                found = true;
                ta = tprev;
                tb = t;
                step_t0 = s.t0;
                step_t1 = s.t1;
                step_y0 = *s.y0;
                for (int q = 0; q < 8; ++q) r[q] = s.r[q];
                return false;
            }
            prev = val;
            tprev = t;
        }
        return true;
    });
    check_status(res);
    if (!found) {
        std::ostringstream os;
        os << "no exit before t_max = " << o.t_max;
        throw Trapped(os.str());
    }

    // Bracketed root on the dense interpolant (Illinois false position).
    auto g = [&](double t) { return rho.eval(ode::dense_eval(r, step_t0, step_t1, t).head(n), 0).value; };
    if (ta == 0.0 && std::abs(r0.value) <= o.event_tol * 10) {
        // A start on the boundary is itself a root; move ta inside M.
        double t = tb;
        bool inside = false;
        for (int k = 0; k < 60 && !inside; ++k) {
            t *= 0.5;
            double f = g(t);
            if (f > 0)
                inside = true;
            else
                tb = t;
        }
        ta = inside ? t : 0.0;
    }
    double fa = g(ta), fb = g(tb);
    int side = 0;
    for (int it = 0; it < 200 && std::abs(tb - ta) > 1e-15 * std::max(1.0, std::abs(tb)); ++it) {
        double tc = (fa * tb - fb * ta) / (fa - fb);
        if (!(tc > std::min(ta, tb) && tc < std::max(ta, tb))) tc = 0.5 * (ta + tb);
        double fc = g(tc);
        if (fc == 0.0) {
            ta = tb = tc;
            break;
        }
        if ((fc < 0) == (fb < 0)) {
            tb = tc;
            fb = fc;
            if (side == -1) fa *= 0.5;
            side = -1;
        } else {
            ta = tc;
            fa = fc;
            if (side == 1) fb *= 0.5;
            side = 1;
        }
        if (std::abs(fc) < 1e-3 * o.event_tol) {
            ta = tb = tc;
            break;
        }
    }
    double tau = 0.5 * (ta + tb);

    // Re-step exactly from the bracketing step start and polish with Newton.
    OdeState y = ode::single_step(rhs, step_t0, step_y0, tau - step_t0);
    for (int it = 0; it < 8; ++it) {
        ScalarJet rj = rho.eval(y.head(n), 1);
        double slope = rj.grad.dot(y.segment(n, n));
        if (std::abs(rj.value) < 1e-2 * o.event_tol || slope == 0.0) break;
        double dt = -rj.value / slope;
        if (std::abs(dt) > (step_t1 - step_t0)) break;
        tau += dt;
        y = ode::single_step(rhs, step_t0, step_y0, tau - step_t0);
    }
    ScalarJet rj = rho.eval(y.head(n), 1);
    double slope = rj.grad.dot(y.segment(n, n));
    if (std::abs(slope) <= o.graze_tol * std::max(1e-300, rj.grad.norm() * y.segment(n, n).norm())) grazing = true;
    return {tau, y};
}

}  // namespace

namespace flow {

void require_unit(const MagneticSystem& sys, const PhaseState& s, double tol) {
    if (s.z.size() != sys.dim() || s.v.size() != sys.dim()) throw BadParameters("state dimension mismatch");
    double sp = sys.speed(s.z, s.v);
    if (std::abs(sp - 1.0) > tol) {
        std::ostringstream os;
        os << "|v|_g = " << sp;
        throw NotUnitSpeed(os.str());
    }
}

PhaseVec generator(const MagneticSystem& sys, const PhaseState& s) {
    const int n = sys.dim();
    PhaseVec out(2 * n);
    out.head(n) = s.v;
    out.tail(n) = sys.acceleration(s.z, s.v);
    return out;
}

Trajectory integrate(const MagneticSystem& sys, const PhaseState& s0, double T, const FlowOptions& o) {
    require_unit(sys, s0, o.unit_tol);
    return dense_run(PhaseRhs{sys, sys.dim()}, pack_state(s0), sys.dim(), false, T, o);
}

Trajectory variation(const MagneticSystem& sys, const PhaseState& s0, double T, const FlowOptions& o) {
    require_unit(sys, s0, o.unit_tol);
    return dense_run(VariationRhs{sys, sys.dim()}, with_identity(s0), sys.dim(), true, T, o);
}

std::pair<PhaseState, PhaseMat> flow_with_variation(const MagneticSystem& sys, const PhaseState& s0, double T,
                                                     const FlowOptions& o) {
    const int n = sys.dim();
    const int m = 2 * n;
    OdeState y = plain_run(VariationRhs{sys, n}, with_identity(s0), T, o);
    return {unpack_state(y, n), Eigen::Map<const Eigen::MatrixXd>(y.data() + m, m, m)};
}

PhaseState flow_to(const MagneticSystem& sys, const PhaseState& s0, double T, const FlowOptions& o) {
    return unpack_state(plain_run(PhaseRhs{sys, sys.dim()}, pack_state(s0), T, o), sys.dim());
}

ExitEvent exit_event(const MagneticSystem& sys, const PhaseState& s0, const FlowOptions& o, bool with_variation) {
    require_unit(sys, s0, o.unit_tol);
    const int n = sys.dim();
    auto accel = [&](const Vec& z, const Vec& v) { return sys.acceleration(z, v); };
    ExitEvent ev;
    std::pair<double, OdeState> hit;
    if (with_variation)
        hit = find_exit(VariationRhs{sys, n}, with_identity(s0), n, *sys.boundary(), accel, o, ev.grazing);
    else
        hit = find_exit(PhaseRhs{sys, n}, pack_state(s0), n, *sys.boundary(), accel, o, ev.grazing);
    ev.tau = hit.first;
    ev.exit = unpack_state(hit.second, n);
    if (with_variation) {
        const int m = 2 * n;
        ev.variation = Eigen::Map<const Eigen::MatrixXd>(hit.second.data() + m, m, m);
    }
    return ev;
}

PhaseVec general_generator(const GeneralSystem& sys, const PhaseState& s) {
    const int n = sys.base.dim();
    OdeState dy;
    GeneralRhs{sys, n}(0.0, pack_state(s), dy);
    return dy;
}

Trajectory integrate_general(const GeneralSystem& sys, const PhaseState& s0, double T, const FlowOptions& o) {
    return dense_run(GeneralRhs{sys, sys.base.dim()}, pack_state(s0), sys.base.dim(), false, T, o);
}

ExitEvent general_exit_event(const GeneralSystem& sys, const PhaseState& s0, const FlowOptions& o) {
    const int n = sys.base.dim();
    auto accel = [&](const Vec& z, const Vec& v) {
        PhaseState s{z, v};
        return Vec(general_generator(sys, s).tail(n));
    };
    ExitEvent ev;
    auto hit = find_exit(GeneralRhs{sys, n}, pack_state(s0), n, *sys.base.boundary(), accel, o, ev.grazing);
    ev.tau = hit.first;
    ev.exit = unpack_state(hit.second, n);
    return ev;
}

}  // namespace flow
}  // namespace maglens
