// Lens data, fans, magnetic potentials and the boundary action.

#include "doctest.h"
#include "helpers.hpp"
#include "maglens/expressions.hpp"
#include "maglens/lens.hpp"
#include "maglens/quadrature.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace maglens;
using maglens::testing::planar_field;
using maglens::testing::vec;

namespace {

// Exit of a constant-field circle (curvature b) from the unit disk: the orbit is
// C + R(b t)(z0 - C) with C = z0 + J v0 / b, J v = (-v2, v1).
struct CircleExit {
    double tau;
    Vec z, v;
};

CircleExit circle_exit(const Vec& z0, const Vec& v0, double b) {
    Vec Jv = vec({-v0[1], v0[0]});
    Vec C = z0 + Jv / b;
    Vec u = z0 - C;
    double r = u.norm(), cn = C.norm();
    double kappa = (1 - cn * cn - r * r) / (2 * cn * r);
    double a0 = std::atan2(u[1], u[0]), ac = std::atan2(C[1], C[0]);
    double best = 1e300;
    for (double s : {1.0, -1.0})
        for (int k = -2; k <= 2; ++k) {
            double th = s * std::acos(kappa) + 2 * M_PI * k + ac - a0;
            if (th > 1e-9 && th < best) best = th;
        }
    auto rot = [](double a, const Vec& w) {
        return vec({std::cos(a) * w[0] - std::sin(a) * w[1], std::sin(a) * w[0] + std::cos(a) * w[1]});
    };
    return {best / b, C + rot(best, u), rot(best, v0)};
}

}  // namespace

TEST_CASE("scatter along a diameter") {
    auto sys = expr::ball_system(2, 1.5, 9, expr::constant(2, 1.0), TwoFormField::zero(2));
    LensRecord r = lens::scatter(sys, {vec({1, 0}), vec({-1, 0})});
    CHECK(r.ell == doctest::Approx(2.0).epsilon(1e-12));
    CHECK((r.exit.z - vec({-1, 0})).norm() < 1e-10);
    CHECK((r.exit.v - vec({-1, 0})).norm() < 1e-10);
    CHECK_THROWS_AS(lens::scatter(sys, {vec({0.5, 0}), vec({-1, 0})}), NotOnBoundary);
    CHECK_THROWS_AS(lens::scatter(sys, {vec({1, 0}), vec({1, 0})}), BadParameters);
}

TEST_CASE("constant field scattering matches circle intersections") {
    const double b = 1.0;
    auto sys = expr::ball_system(2, 1.5, 9, expr::constant(2, 1.0), planar_field(2, b));
    CircleExit ref = circle_exit(vec({1, 0}), vec({-1, 0}), b);
    CHECK(ref.tau == doctest::Approx(M_PI / 2).epsilon(1e-12));
    CHECK((ref.z - vec({0, -1})).norm() < 1e-12);

    FanParams fan;
    fan.p = vec({1, 0});
    fan.points = 1;
    fan.dirs = 64;
    fan.width = 1.4;
    LensDataset data = lens::sample_fan(sys, fan);
    REQUIRE(data.records.size() == 64);
    double worst = 0;
    for (const LensRecord& r : data.records) {
        CHECK_FALSE(r.trapped);
        CHECK(std::abs(r.exit.v.norm() - 1) < 1e-9);
        CHECK(std::abs(sys.rho(r.exit.z)) < 1e-10);
        CircleExit e = circle_exit(r.entry.z, r.entry.v, b);
        worst = std::max({worst, std::abs(e.tau - r.ell), (e.z - r.exit.z).norm(), (e.v - r.exit.v).norm()});
    }
    CHECK(worst < 1e-8);
}

TEST_CASE("records beyond the time cap are trapped and kept") {
    auto sys = expr::ball_system(2, 1.5, 9, expr::constant(2, 1.0), planar_field(2, 1.0));
    FlowOptions o;
    o.t_max = 1.0;  // below the quarter-circle travel time pi/2
    CHECK_THROWS_AS(lens::scatter(sys, {vec({1, 0}), vec({-1, 0})}, o), Trapped);
    FanParams fan;
    fan.p = vec({1, 0});
    fan.points = 1;
    fan.dirs = 8;
    fan.width = 1.4;
    LensDataset data = lens::sample_fan(sys, fan, o);
    CHECK(data.records.size() == 8);
    int trapped = 0;
    for (const auto& r : data.records) trapped += r.trapped;
    CHECK(trapped > 0);
}

TEST_CASE("fan enumeration, tangency and determinism") {
    auto sys = expr::ball_system(3, 1.25, 13, expr::radial_quadratic(3, 1.0, 0.1), planar_field(3, 0.3));
    FanParams fan;
    fan.p = vec({0, 0, -1});
    fan.cap = 0.3;
    fan.width = 0.4;
    LensDataset a = lens::sample_fan(sys, fan);
    LensDataset b = lens::sample_fan(sys, fan);
    REQUIRE(a.records.size() == 256);
    bool same = true;
    for (size_t i = 0; i < a.records.size(); ++i) {
        same = same && a.records[i].id == static_cast<long>(i);
        same = same && a.records[i].exit.z == b.records[i].exit.z && a.records[i].ell == b.records[i].ell;
    }
    CHECK(same);
    CHECK(a.system_hash == b.system_hash);
    CHECK(a.system_hash != lens::system_hash(sys.with_form(planar_field(3, 0.31))));

    fan.width = 0.0;
    LensDataset t = lens::sample_fan(sys, fan);
    for (const auto& r : t.records) {
        CHECK(r.ell < 1e-12);
        CHECK(r.grazing);
    }
}

TEST_CASE("o-local fans stay inside the localized cap") {
    // Fine enough that the 0.05-thick cap contains nodes.
    auto sys = expr::ball_system(3, 1.25, 41, expr::constant(3, 1.0), TwoFormField::zero(3));
    FanParams fan;
    fan.p = vec({1, 0, 0});
    fan.cap = 0.3;
    fan.width = 0.3;
    fan.points = 8;
    fan.dirs = 8;
    fan.o_local = true;
    fan.C = 1.0;
    fan.eps = 0.1;
    fan.shift = 0.05;
    Localizer loc = fields::concave_localizer(sys, fan.p, fan.eps, fan.shift);
    LensDataset data = lens::sample_fan(sys, fan);
    for (const auto& r : data.records) CHECK(lens::is_o_local(sys, loc, r));
}

TEST_CASE("time reversal holds only without a magnetic field") {
    for (double b : {0.0, 0.8}) {
        auto sys = expr::ball_system(3, 1.25, 9, expr::radial_quadratic(3, 1.0, 0.2), planar_field(3, b));
        Vec z = vec({0.6, 0, 0.8});
        Vec v = -z + vec({0, 0.7, 0});
        v /= sys.speed(z, v);
        LensRecord fwd = lens::scatter(sys, {z, v});
        LensRecord back = lens::scatter(sys, {fwd.exit.z, -fwd.exit.v});
        double miss = (back.exit.z - z).norm() + (back.exit.v + v).norm();
        if (b == 0.0)
            CHECK(miss < 1e-8);
        else
            CHECK(miss > 1e-2);
    }
}

TEST_CASE("travel time equals arc length") {
    auto sys = expr::ball_system(3, 1.25, 13, expr::radial_quadratic(3, 1.0, 0.2), planar_field(3, 0.5));
    Vec z = vec({0, 0.6, -0.8});
    Vec v = -z + vec({0.5, 0.1, 0});
    v /= sys.speed(z, v);
    LensRecord r = lens::scatter(sys, {z, v});
    Trajectory tr = flow::integrate(sys, {z, v}, r.ell);
    std::vector<double> knots = tr.knots();
    const QuadratureRule& q = gauss_legendre(8);
    double len = 0;
    for (size_t s = 0; s + 1 < knots.size(); ++s)
        for (size_t k = 0; k < q.nodes.size(); ++k) {
            double t = knots[s] + (knots[s + 1] - knots[s]) * q.nodes[k];
            PhaseState st = tr.state(t);
            len += (knots[s + 1] - knots[s]) * q.weights[k] * sys.speed(st.z, st.v);
        }
    CHECK(std::abs(len - r.ell) / r.ell < 1e-8);
}

TEST_CASE("homotopy potential") {
    Chart ch = Chart::cube(3, 1.25, 61);
    CHECK(lens::potential_from_form(TwoFormField::zero(3), ch, vec({0, 0, 0})).value(vec({0.3, 0.2, 0.1})).norm() ==
          0.0);

    const double b = 0.7;
    Potential a = lens::potential_from_form(planar_field(3, b), ch, vec({0, 0, 0}));
    Vec z = vec({0.3, -0.4, 0.2});
    CHECK((a.value(z) - vec({-b / 2 * z[1], b / 2 * z[0], 0})).norm() < 1e-14);

    // Omega = d beta with beta = (sin z2, z1 z3, z2 cos z1).
    auto comp = [](std::function<double(const Vec&)> f) {
        return std::make_shared<AnalyticScalarField>(3, [f](const Vec& z, int) {
            ScalarJet j;
            j.value = f(z);
            return j;
        });
    };
    std::vector<ScalarFieldPtr> packed(3);
    packed[pair_index(3, 0, 1)] = comp([](const Vec& z) { return z[2] - std::cos(z[1]); });
    packed[pair_index(3, 0, 2)] = comp([](const Vec& z) { return -z[1] * std::sin(z[0]); });
    packed[pair_index(3, 1, 2)] = comp([](const Vec& z) { return std::cos(z[0]) - z[0]; });
    TwoFormField omega(3, packed);
    Potential alpha = lens::potential_from_form(omega, ch, vec({0.1, 0, -0.1}));
    double worst = 0;
    const double h = 1e-4;
    for (Vec p : {vec({0.2, 0.3, -0.4}), vec({-0.5, 0.1, 0.6}), vec({0.7, -0.6, 0.0})}) {
        Mat d(3, 3);
        for (int i = 0; i < 3; ++i) {
            Vec e = Vec::Unit(3, i) * h;
            d.row(i) = ((alpha.value(p + e) - alpha.value(p - e)) / (2 * h)).transpose();
        }
        Mat w = omega.value(p);
        worst = std::max(worst, (d - d.transpose() - w).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-6);

    std::vector<ScalarFieldPtr> open(3);
    open[pair_index(3, 1, 2)] = expr::affine(vec({1, 0, 0}), 0.0);
    CHECK_THROWS_AS(lens::potential_from_form(TwoFormField(3, open), ch, vec({0, 0, 0})), NotClosed);
}

TEST_CASE("boundary action in the disk and under gauge shifts") {
    auto flat = expr::ball_system(2, 1.5, 9, expr::constant(2, 1.0), TwoFormField::zero(2));
    Potential zero = lens::potential_from_form(TwoFormField::zero(2), flat.chart(), vec({0, 0}));
    ActionResult r = lens::boundary_action(flat, zero, vec({1, 0}), vec({0, 1}));
    CHECK(r.T == doctest::Approx(std::sqrt(2.0)).epsilon(1e-10));
    CHECK(r.action == doctest::Approx(std::sqrt(2.0)).epsilon(1e-10));
    ActionResult same = lens::boundary_action(flat, zero, vec({1, 0}), vec({1, 0}));
    CHECK(same.T == 0.0);
    CHECK(same.action == 0.0);

    auto sys = expr::ball_system(2, 1.5, 9, expr::constant(2, 1.0), planar_field(2, 0.6));
    Potential alpha = lens::potential_from_form(sys.form(), sys.chart(), vec({0, 0}));
    Vec x = vec({std::cos(0.2), std::sin(0.2)}), y = vec({std::cos(1.9), std::sin(1.9)});
    ActionResult base = lens::boundary_action(sys, alpha, x, y);
    auto f = expr::gaussian(0.0, 0.8, vec({0.3, -0.2}), 0.9);
    ActionResult shifted = lens::boundary_action(sys, alpha.with_gauge(f), x, y);
    CHECK(shifted.T == doctest::Approx(base.T).epsilon(1e-12));
    CHECK(shifted.action - base.action == doctest::Approx(f->value(x) - f->value(y)).epsilon(1e-8));
}

TEST_CASE("two-point travel time agrees with scattering") {
    auto sys = expr::ball_system(3, 1.25, 13, expr::radial_quadratic(3, 1.0, 0.15), planar_field(3, 0.4));
    Potential alpha = lens::potential_from_form(sys.form(), sys.chart(), vec({0, 0, 0}));
    Vec z = vec({0.8, 0, -0.6});
    Vec v = -z + vec({0, 1.2, 0.3});
    v /= sys.speed(z, v);
    LensRecord rec = lens::scatter(sys, {z, v});
    ActionResult r = lens::boundary_action(sys, alpha, z, rec.exit.z);
    CHECK(r.T == doctest::Approx(rec.ell).epsilon(1e-9));
    CHECK((r.v - v).norm() < 1e-7);
}

TEST_CASE("dataset files round trip") {
    auto sys = expr::ball_system(3, 1.25, 9, expr::constant(3, 1.0), planar_field(3, 0.5));
    FanParams fan;
    fan.p = vec({0, 0, 1});
    fan.points = 3;
    fan.dirs = 4;
    LensDataset data = lens::sample_fan(sys, fan);
    data.records[1].trapped = true;
    data.records[1].ell = std::nan("");
    std::string path = "test_lens_roundtrip.csv";
    lens::write_dataset(data, path);
    LensDataset back = lens::read_dataset(path);
    REQUIRE(back.records.size() == data.records.size());
    CHECK(back.system_hash == data.system_hash);
    CHECK(back.fan.points == 3);
    for (size_t i = 0; i < data.records.size(); ++i) {
        const auto &a = data.records[i], &b = back.records[i];
        CHECK(a.entry.z == b.entry.z);
        CHECK(a.exit.v == b.exit.v);
        CHECK(a.trapped == b.trapped);
        if (!a.trapped) CHECK(a.ell == b.ell);
    }
    CHECK(std::isnan(back.records[1].ell));
    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
}
