// Integral identity, weights, ray transforms and symbol checks.

#include "doctest.h"
#include "helpers.hpp"
#include "maglens/expressions.hpp"
#include "maglens/lens.hpp"
#include "maglens/transform.hpp"

#include <cmath>
#include <random>

using namespace maglens;
using maglens::testing::planar_field;
using maglens::testing::vec;

namespace {

Vec random_unit(std::mt19937& rng, const MagneticSystem& sys, const Vec& z) {
    std::normal_distribution<double> g;
    Vec v(sys.dim());
    for (int i = 0; i < sys.dim(); ++i) v[i] = g(rng);
    return v / sys.speed(z, v);
}

}  // namespace

TEST_CASE("integral identity residual") {
    auto c1 = expr::constant(2, 1.0);
    auto c2 = expr::gaussian(1.0, 0.1, vec({0, 0}), 0.5);  // 1 + 0.1 exp(-4 |z|^2)
    auto sys1 = expr::ball_system(2, 1.5, 9, c1, TwoFormField::zero(2));
    auto sys2 = expr::ball_system(2, 1.5, 9, c2, TwoFormField::zero(2));
    PhaseState s{vec({0.2, -0.3}), vec({0.6, 0.8})};

    CHECK(transform::identity_residual(sys1, sys1, s, 0.5) < 1e-10);
    CHECK(transform::identity_residual(sys1, sys2, s, 0.0) == 0.0);
    CHECK(transform::identity_residual(sys1, sys2, s, 0.5) < 1e-6);

    // Error under panel doubling falls at the two-point Gauss order.
    std::vector<double> err;
    for (int p : {1, 2, 4}) err.push_back(transform::identity_residual(sys1, sys2, s, 0.5, p));
    double slope = std::log2(err[0] / err[2]) / 2.0;
    CHECK(slope > transform::kIdentityOrder - 0.5);

    // Without the variation factor the identity fails.
    CHECK(transform::identity_residual(sys1, sys2, s, 0.5, 16, true) > 1e-4);
}

TEST_CASE("identity with magnetic fields in three dimensions") {
    Mat w = Mat::Zero(3, 3);
    w(0, 2) = 0.4;
    w(2, 0) = -0.4;
    auto sys1 = expr::ball_system(3, 1.25, 9, expr::radial_quadratic(3, 1.0, 0.2), planar_field(3, 0.5));
    auto sys2 = expr::ball_system(3, 1.25, 9, expr::gaussian(1.0, 0.15, vec({0.1, 0, 0}), 0.6),
                                  TwoFormField::constant(w));
    std::mt19937 rng(3);
    Vec z = vec({0.1, 0.2, -0.3});
    PhaseState s{z, random_unit(rng, sys1, z)};
    CHECK(transform::identity_residual(sys1, sys2, s, 0.7) < 1e-6);
}

TEST_CASE("weight A") {
    auto flat = expr::ball_system(3, 1.25, 9, expr::constant(3, 1.0), TwoFormField::zero(3));
    PhaseState s{vec({0.8, 0, -0.6}), vec({-0.6, 0, -0.8})};
    s.v = (s.v + vec({0, 0.5, 0.3})).normalized();
    CHECK((transform::weight_A(flat, s) - Mat::Identity(3, 3)).norm() < 1e-12);

    // Constant b in the plane: velocities rotate by b tau.
    const double b = 0.8;
    auto disk = expr::ball_system(2, 1.5, 9, expr::constant(2, 1.0), planar_field(2, b));
    PhaseState d{vec({0.1, -0.2}), vec({0.6, 0.8})};
    ExitEvent ev = flow::exit_event(disk, d);
    double a = b * ev.tau;
    Mat R(2, 2);
    R << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    CHECK((transform::weight_A(disk, d) - R).norm() < 1e-8);

    // Tangential entries at a convex point exit immediately.
    auto ball = expr::ball_system(3, 1.25, 9, expr::radial_quadratic(3, 1.0, 0.1), planar_field(3, 0.3));
    PhaseState t{vec({0, 0, 1}), vec({1, 0, 0})};
    t.v /= ball.speed(t.z, t.v);
    CHECK((transform::weight_A(ball, t) - Mat::Identity(3, 3)).norm() < 1e-12);
}

TEST_CASE("weight B algebra and the conformal Christoffel difference") {
    auto flat = expr::ball_system(3, 1.25, 9, expr::constant(3, 1.0), TwoFormField::zero(3));
    Mat B = transform::weight_B(flat, {vec({0, 0, 0}), vec({1, 0, 0})});
    CHECK((B - Vec(vec({1, -1, -1})).asDiagonal().toDenseMatrix()).norm() < 1e-15);
    CHECK_THROWS_AS(transform::weight_B(flat, {vec({0, 0, 0}), vec({2, 0, 0})}), NotUnitSpeed);

    auto c1 = expr::radial_quadratic(3, 1.0, 0.3);
    auto c2 = expr::gaussian(1.1, 0.2, vec({0.2, 0.1, 0}), 0.5);
    auto sys1 = expr::ball_system(3, 1.25, 9, c1, TwoFormField::zero(3));
    auto sys2 = expr::ball_system(3, 1.25, 9, c2, TwoFormField::zero(3));
    AnalyticPair pair = difference_pair(sys1, sys2);
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    double worst_sq = 0, worst_even = 0, worst_gamma = 0;
    for (int k = 0; k < 200; ++k) {
        Vec z = vec({u(rng), u(rng), u(rng)});
        Vec v = random_unit(rng, sys1, z);
        Mat Bz = transform::weight_B(sys1, {z, v});
        Mat gB = fields::metric_at(sys1, z) * Bz;
        worst_sq = std::max(worst_sq, (gB * gB - Mat::Identity(3, 3)).norm());
        worst_even = std::max(worst_even, (transform::weight_B(sys1, {z, Vec(-v)}) - Bz).norm());
        Tensor3 G1 = fields::christoffel(sys1, z), G2 = fields::christoffel(sys2, z);
        Vec diff = Vec::Zero(3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int l = 0; l < 3; ++l) diff[i] += (G2(i, j, l) - G1(i, j, l)) * v[j] * v[l];
        Vec phi;
        Mat om;
        pair.eval(z, phi, om);
        worst_gamma = std::max(worst_gamma, (diff - Bz * phi).norm() / diff.norm());
    }
    CHECK(worst_sq < 1e-12);
    CHECK(worst_even == 0.0);
    CHECK(worst_gamma < 1e-10);
}

TEST_CASE("i_ab is linear and reproduces the exit-velocity mismatch") {
    auto c1 = expr::radial_quadratic(3, 1.0, 0.1);
    Vec center = vec({0, 0, -0.75});
    auto c2 = expr::sum(c1, expr::bump(0.0, 0.05, center, 0.35));
    auto sys1 = expr::ball_system(3, 1.25, 9, c1, planar_field(3, 0.3));
    std::vector<ScalarFieldPtr> packed(3);
    packed[pair_index(3, 0, 1)] = expr::sum(expr::constant(3, 0.3), expr::bump(0.0, 0.1, center, 0.35));
    auto sys2 = expr::ball_system(3, 1.25, 9, c2, TwoFormField(3, packed));

    AnalyticPair exact = difference_pair(sys1, sys2);
    TransformOptions opt;
    opt.a_rule = ARule::RemainingTime;
    opt.max_panel = 0.01;  // the bump is steep near its edge
    opt.gauss = 6;
    FanParams fan;
    fan.p = vec({0, 0, -1});
    fan.cap = 0.25;
    fan.width = 0.5;
    fan.points = 3;
    fan.dirs = 3;
    double worst = 0;
    for (const PhaseState& s : lens::fan_entries(sys1, fan)) {
        LensRecord r = lens::scatter(sys1, s);
        Trajectory ray = flow::integrate(sys1, s, r.ell);
        Vec val = transform::i_ab(sys1, sys2, exact, ray, opt);
        FlowOptions ro;
        ro.unit_tol = 1e9;
        PhaseState other = flow::flow_to(sys2, s, r.ell, ro);
        Vec mismatch = r.exit.v - other.v;
        worst = std::max(worst, (val - mismatch).norm() / std::max(mismatch.norm(), 1e-12));
    }
    CHECK(worst < 1e-5);

    // Linearity and the zero pair.
    PhaseState s = lens::fan_entries(sys1, fan)[4];
    LensRecord r = lens::scatter(sys1, s);
    Trajectory ray = flow::integrate(sys1, s, r.ell);
    AnalyticPair p1(3, [](const Vec& z) { return Vec(vec({z[0], 1.0, z[2] * z[2]})); }, {});
    AnalyticPair p2(3, {}, [](const Vec& z) {
        Mat m = Mat::Zero(3, 3);
        m(0, 1) = 1 + z[1];
        m(1, 0) = -m(0, 1);
        return m;
    });
    AnalyticPair mix(3, [](const Vec& z) { return Vec(2.0 * vec({z[0], 1.0, z[2] * z[2]})); },
                     [](const Vec& z) {
                         Mat m = Mat::Zero(3, 3);
                         m(0, 1) = -3 * (1 + z[1]);
                         m(1, 0) = -m(0, 1);
                         return m;
                     });
    Vec a = transform::i_ab(sys1, sys2, p1, ray), b = transform::i_ab(sys1, sys2, p2, ray);
    Vec m = transform::i_ab(sys1, sys2, mix, ray);
    CHECK((m - (2 * a - 3 * b)).norm() < 1e-10 * (1 + m.norm()));
    AnalyticPair zero(3, {}, {});
    CHECK(transform::i_ab(sys1, sys2, zero, ray).norm() == 0.0);
    CHECK(transform::i_ab(sys1, sys1, difference_pair(sys1, sys1), ray).norm() < 1e-12);
}

TEST_CASE("cocycle weights match per-node variation solves") {
    auto c = expr::radial_quadratic(3, 1.0, 0.1);
    auto sys = expr::ball_system(3, 1.25, 9, c, planar_field(3, 0.4));
    PhaseState s{vec({0, 0, -1}), Vec()};
    s.v = vec({0.8, 0.1, 0.5});
    s.v /= sys.speed(s.z, s.v);
    LensRecord r = lens::scatter(sys, s);
    TransformOptions opt;
    opt.a_rule = ARule::RemainingTime;
    opt.max_panel = 0.2;
    RayWeightSample fast = transform::self_ray_weights(sys, flow::variation(sys, s, r.ell), {}, opt);
    REQUIRE(fast.t.size() > 10);
    FlowOptions ro;
    ro.unit_tol = 1e9;
    double worst = 0;
    for (size_t k = 0; k < fast.t.size(); ++k) {
        const PhaseState& x = fast.state[k];
        Mat A = flow::flow_with_variation(sys, x, r.ell - fast.t[k], ro).second.bottomRightCorner(3, 3);
        worst = std::max(worst, (A - fast.A[k]).norm());
        worst = std::max(worst, (transform::weight_B(sys, x, 1e-6) - fast.B[k]).norm());
    }
    CHECK(worst < 1e-8);
    CHECK_THROWS_AS(transform::self_ray_weights(sys, flow::integrate(sys, s, r.ell), {}, opt), BadParameters);
}

TEST_CASE("general-curve transform") {
    auto flat = expr::ball_system(3, 1.25, 9, expr::constant(3, 1.0), TwoFormField::zero(3));
    GeneralSystem free{flat, [](const Vec& z, const Vec&) { return Vec(Vec::Zero(z.size())); }};
    // Speed 0.5 for 4 units of parameter: unit-speed length 2.
    Trajectory seg = flow::integrate_general(free, {vec({-1, 0, 0}), vec({0.5, 0, 0})}, 4.0);
    auto idw = [](const Vec&, const Vec&) { return Mat(Mat::Identity(3, 3)); };
    Vec e1 = vec({1, 0, 0});
    CHECK((transform::i_w(free, idw, [&](const Vec&) { return e1; }, seg) - 2 * e1).norm() < 1e-12);
    CHECK(transform::i_w(free, idw, [](const Vec& z) { return Vec(z[1] > 0.5 ? vec({1, 1, 1}) : vec({0, 0, 0})); },
                         seg)
              .norm() == 0.0);
    Trajectory still = flow::integrate_general(free, {vec({0, 0, 0}), vec({0, 0, 0})}, 1.0);
    CHECK_THROWS_AS(transform::i_w(free, idw, [&](const Vec&) { return e1; }, still), NonUnitReparamFailure);

    // With the Lorentz force as G and W = A B, i_w is the phi part of i_ab.
    auto sys = expr::ball_system(3, 1.25, 9, expr::radial_quadratic(3, 1.0, 0.2), planar_field(3, 0.4));
    GeneralSystem lor{sys, [&](const Vec& z, const Vec& v) { return Vec(fields::lorentz(sys, z) * v); }};
    PhaseState s{vec({0.6, 0, -0.8}), vec({-0.5, 0.4, 0.5})};
    s.v /= sys.speed(s.z, s.v);
    LensRecord r = lens::scatter(sys, s);
    Trajectory ray = flow::integrate(sys, s, r.ell);
    auto phi = [](const Vec& z) { return Vec(vec({std::sin(z[0]), z[1] * z[2], 1.0})); };
    AnalyticPair pair(3, phi, {});
    Vec ref = transform::i_ab(sys, sys, pair, ray);
    auto W = [&](const Vec& z, const Vec& v) {
        PhaseState x{z, v};
        return Mat(transform::weight_A(sys, x) * transform::weight_B(sys, x, 1e-6));
    };
    Vec got = transform::i_w(lor, W, phi, flow::integrate_general(lor, s, r.ell));
    CHECK((got - ref).norm() < 1e-8 * (1 + ref.norm()));
}

TEST_CASE("boundary symbol") {
    const int n = 3;
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(2);
    auto rep = transform::symbol_boundary(n, 1.0, eta, 1.0, I, transform::identity_b(n), 1.0);
    CHECK(rep.min_eig_constrained > 1e-3);
    CHECK(rep.hermitian_defect < 1e-12);
    CHECK(std::abs(rep.min_eig_full) < 1e-8);
    CHECK(rep.null_residual < 1e-8);

    Eigen::VectorXd eta2(2);
    eta2 << 0.7, -1.2;
    auto a = transform::symbol_boundary(n, -0.4, eta2, 0.5, I, transform::paper_b(n), 1.0);
    auto b = transform::symbol_boundary(n, -0.4, eta2, 0.5, 2 * I, transform::paper_b(n), 1.0);
    CHECK(b.min_eig_constrained / a.min_eig_constrained == doctest::Approx(4.0).epsilon(1e-8));
    CHECK(a.min_eig_constrained > 0);
    CHECK(a.null_residual < 1e-8);

    CHECK_THROWS_AS(transform::symbol_boundary(2, 1.0, Eigen::VectorXd::Zero(1), 1.0, Eigen::MatrixXd::Identity(2, 2),
                                               transform::identity_b(2), 1.0),
                    BadParameters);
    CHECK_THROWS_AS(transform::symbol_boundary(n, 1.0, eta, 0.0, I, transform::identity_b(n), 1.0), BadParameters);
    CHECK_THROWS_AS(transform::symbol_boundary(n, 1.0, eta, 1.0, I, transform::identity_b(n), -1.0), BadParameters);
}

TEST_CASE("fiber-infinity symbol") {
    const int n = 3;
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd e1(2);
    e1 << 1, 0;
    auto rep = transform::symbol_fiber_infinity(n, 0.0, e1, transform::bump_cutoff(1.0), I, transform::identity_b(n));
    CHECK(rep.min_eig_constrained > 1e-3);
    CHECK(std::abs(rep.min_eig_full) < 1e-8);
    CHECK(rep.null_residual < 1e-10);
    CHECK(rep.hermitian_defect < 1e-12);

    transform::Cutoff odd{[](double s) { return std::exp(-s * s) * (1 + 0.1 * s); }, 1.0};
    CHECK_THROWS_AS(transform::symbol_fiber_infinity(n, 0.0, e1, odd, I, transform::identity_b(n)), BadParameters);

    // The two slice parametrizations agree where they meet, |xi| = |eta|.
    Eigen::VectorXd eta(2);
    eta << std::cos(0.3), std::sin(0.3);
    auto chi = transform::gaussian_cutoff(0.3);
    transform::SymbolOptions so;
    so.sphere_order = 400;
    so.line_order = 400;
    auto lo = transform::symbol_fiber_infinity(n, 1.0 - 1e-9, eta, chi, I, transform::paper_b(n), so);
    auto hi = transform::symbol_fiber_infinity(n, 1.0 + 1e-9, eta, chi, I, transform::paper_b(n), so);
    CHECK((lo.H - hi.H).norm() / hi.H.norm() < 1e-3);
    CHECK(hi.min_eig_constrained > 0);
}

TEST_CASE("sphere rules integrate constants to the sphere area") {
    auto area = [](int d, int order) {
        auto r = transform::sphere_rule(d, order);
        double s = 0;
        for (double w : r.weights) s += w;
        return s;
    };
    CHECK(area(0, 8) == 2.0);
    CHECK(area(1, 16) == doctest::Approx(2 * M_PI).epsilon(1e-14));
    CHECK(area(2, 16) == doctest::Approx(4 * M_PI).epsilon(1e-12));
    CHECK(area(3, 16) == doctest::Approx(2 * M_PI * M_PI).epsilon(1e-12));
}
