// Acceptance run: one PASS/FAIL line per criterion. Arguments select a subset
// of criteria by number; the default runs all ten.

#include "helpers.hpp"
#include "maglens/cli.hpp"
#include "maglens/expressions.hpp"
#include "maglens/parallel.hpp"

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>

using namespace maglens;
using maglens::testing::planar_field;
using maglens::testing::vec;
namespace fs = std::filesystem;
using Json = cli::Json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

fs::path g_out;

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[1024];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

cli::RunOptions options(const char* name) {
    cli::RunOptions ro;
    ro.out_dir = (g_out / name).string();
    return ro;
}

Vec random_unit(std::mt19937& rng, const MagneticSystem& sys, const Vec& z) {
    std::normal_distribution<double> g;
    Vec v(sys.dim());
    for (int i = 0; i < sys.dim(); ++i) v[i] = g(rng);
    return v / sys.speed(z, v);
}

Vec random_point(std::mt19937& rng, int n, double radius) {
    std::uniform_real_distribution<double> u(-radius, radius);
    Vec z(n);
    do {
        for (int i = 0; i < n; ++i) z[i] = u(rng);
    } while (z.norm() > radius);
    return z;
}

// ---- 1 ----
Outcome flow_oracle() {
    auto disk = expr::ball_system(2, 2.5, 9, expr::constant(2, 1.0), planar_field(2, 1.0));
    Trajectory tr = flow::integrate(disk, {vec({0, 0}), vec({1, 0})}, 2 * M_PI);
    double circle = 0;
    for (int k = 0; k <= 1000; ++k) {
        double t = 2 * M_PI * k / 1000;
        circle = std::max(circle, (tr.state(t).z - vec({std::sin(t), 1 - std::cos(t)})).norm());
    }
    const double a = 0.4, s = std::cos(a), w = std::sin(a);
    auto space = expr::ball_system(3, 8.0, 9, expr::constant(3, 1.0), planar_field(3, 1.0));
    Trajectory hx = flow::integrate(space, {vec({0, 0, 0}), vec({s, 0, w})}, 2 * M_PI);
    double helix = 0;
    for (int k = 0; k <= 1000; ++k) {
        double t = 2 * M_PI * k / 1000;
        helix = std::max(helix, (hx.state(t).z - vec({s * std::sin(t), s * (1 - std::cos(t)), w * t})).norm());
    }
    return {circle < 1e-8 && helix < 1e-8, fmt("max position error circle %.2e, helix %.2e", circle, helix)};
}

// ---- 2 ----
Outcome energy() {
    auto sys = expr::ball_system(3, 1.25, 24, expr::radial_quadratic(3, 1.0, 0.2), planar_field(3, 0.5));
    std::mt19937 rng(2);
    std::vector<PhaseState> starts;
    for (int k = 0; k < 1000; ++k) {
        Vec z = random_point(rng, 3, 0.9);
        starts.push_back({z, random_unit(rng, sys, z)});
    }
    std::vector<double> drift(starts.size());
    parallel_for(static_cast<long>(starts.size()), [&](long k) {
        ExitEvent ev = flow::exit_event(sys, starts[k]);
        Trajectory tr = flow::integrate(sys, starts[k], ev.tau);
        double worst = 0;
        for (int j = 1; j <= 20; ++j) {
            double t = ev.tau * j / 20;
            PhaseState st = tr.state(t);
            worst = std::max(worst, std::abs(sys.speed(st.z, st.v) - 1.0) / t);
        }
        drift[k] = worst;
    });
    double worst = *std::max_element(drift.begin(), drift.end());
    return {worst < 1e-8, fmt("max |v|_g drift per unit time %.2e over 1000 rays", worst)};
}

// ---- 3 ----
Outcome identity() {
    Json c = Json::parse(R"({
        "system": {"chart": {"nodes": 24}, "c": {"type": "radial_quadratic", "base": 1, "amp": 0.2},
                   "omega": {"01": {"type": "constant", "value": 0.5}}},
        "second_system": {"chart": {"nodes": 24},
                   "c": {"type": "gaussian", "base": 1, "amp": 0.15, "center": [0.1, 0, 0], "width": 0.6},
                   "omega": {"02": {"type": "constant", "value": 0.4},
                             "12": {"type": "gaussian", "base": 0, "amp": 0.3, "center": [0, 0.2, 0], "width": 0.5}}},
        "identity": {"samples": 100, "order_samples": 20}
    })");
    cli::CommandResult r = cli::cmd_check_identity(cli::resolve_config(c), options("identity"));
    const Json& res = r.report["results"];
    double order = res["fitted_order"].is_null() ? 0.0 : res["fitted_order"].get<double>();
    return {r.exit_code == cli::kOk,
            fmt("max residual %.2e (median %.2e) at default quadrature, fitted order %.2f (nominal %.0f)",
                res["max_residual"].get<double>(), res["median_residual"].get<double>(), order,
                transform::kIdentityOrder)};
}

// ---- 4 ----
Outcome weights() {
    auto sys = expr::ball_system(3, 1.25, 24, expr::radial_quadratic(3, 1.0, 0.2), planar_field(3, 0.5));
    std::mt19937 rng(4);
    double gb = 0;
    for (int k = 0; k < 10000; ++k) {
        Vec z = random_point(rng, 3, 1.0);
        PhaseState s{z, random_unit(rng, sys, z)};
        Mat m = sys.metric(z) * transform::weight_B(sys, s);
        gb = std::max(gb, (m * m - Mat::Identity(3, 3)).cwiseAbs().maxCoeff());
    }
    FanParams fan;
    fan.p = vec({0, 0, -1});
    fan.cap = 0.5;
    fan.width = 1e-3;
    fan.points = 16;
    fan.dirs = 16;
    std::vector<PhaseState> entries = lens::fan_entries(sys, fan);
    std::vector<double> tau(entries.size()), dev(entries.size());
    parallel_for(static_cast<long>(entries.size()), [&](long k) {
        tau[k] = flow::exit_event(sys, entries[k]).tau;
        dev[k] = (transform::weight_A(sys, entries[k]) - Mat::Identity(3, 3)).norm();
    });
    double worst = 0, tmax = 0, rate = 0;
    int used = 0;
    for (std::size_t k = 0; k < entries.size(); ++k)
        if (tau[k] < 1e-3) {
            ++used;
            worst = std::max(worst, dev[k]);
            tmax = std::max(tmax, tau[k]);
            if (tau[k] > 0) rate = std::max(rate, dev[k] / tau[k]);
        }
    return {gb < 1e-12 && used >= 10 && worst < 1e-4,
            fmt("(gB)^2 - Id max %.2e at 1e4 states; |A - Id| max %.2e over %d tangential rays with tau < %.1e "
                "(|A - Id| / tau <= %.2f)",
                gb, worst, used, tmax, rate)};
}

Json xray_config() {
    return Json::parse(R"({
        "system": {"chart": {"nodes": 9}, "c": {"type": "radial_quadratic", "base": 1, "amp": 0.1},
                   "omega": {"01": {"type": "constant", "value": 0.3}}},
        "second_system": {"chart": {"nodes": 9},
                   "c": {"type": "sum", "terms": [{"type": "radial_quadratic", "base": 1, "amp": 0.1},
                         {"type": "bump", "base": 0, "amp": 0.05, "center": [0, 0, -0.75], "radius": 0.35}]},
                   "omega": {"01": {"type": "sum", "terms": [{"type": "constant", "value": 0.3},
                         {"type": "bump", "base": 0, "amp": 0.1, "center": [0, 0, -0.75], "radius": 0.35}]}}},
        "fan": {"cap": 0.25, "width": 0.5, "points": 16, "dirs": 16}
    })");
}

// ---- 5 ----
Outcome xray() {
    cli::CommandResult r = cli::cmd_forward_xray(cli::resolve_config(xray_config()), options("xray"));
    const Json& res = r.report["results"];
    return {r.exit_code == cli::kOk && res["rays"] == 256,
            fmt("%ld rays, max per-ray rel. err %.2e, fan-wide rel. err %.2e", res["rays"].get<long>(),
                res["max_rel_err"].get<double>(), res["global_rel_err"].get<double>())};
}

// ---- 6 ----
Outcome ellipticity() {
    Json c = Json::parse(R"({"symbol": {"F": [0.5, 1.0, 2.0], "grid": 20, "weights": "identity", "chi": "gaussian"}})");
    cli::CommandResult r = cli::cmd_ellipticity(cli::resolve_config(c), options("ellipticity"));
    const Json& res = r.report["results"];
    return {r.exit_code == cli::kOk,
            fmt("%ld rows, constrained min eigenvalue %.3e, unconstrained |min eigenvalue| max %.2e",
                res["rows"].get<long>(), res["min_eig_constrained"].get<double>(),
                res["max_abs_min_eig_full"].get<double>())};
}

// ---- 7 ----
Outcome linear_phantom() {
    auto sys = expr::ball_system(3, 1.25, 40, expr::radial_quadratic(3, 1.0, 0.1), planar_field(3, 0.3));
    Vec p = vec({0, 0, -1});
    Localizer loc = fields::concave_localizer(sys, p, 1.0, 0.5);
    NodeSet nodes = invert::cap_nodes(sys, loc, Basis::Cubic);
    auto g0 = expr::windowed_gaussian(0.05, vec({0.03, 0, -0.78}), 0.09, 0.2);
    auto g1 = expr::windowed_gaussian(0.05, vec({-0.03, 0.02, -0.78}), 0.09, 0.2);
    AnalyticPair phantom(
        3, [&](const Vec& z) { return Vec(g0->value(z) * vec({1, 0.5, -0.7})); },
        [&](const Vec& z) {
            Mat m = Mat::Zero(3, 3);
            m(0, 1) = g1->value(z);
            m(1, 0) = -m(0, 1);
            return m;
        });

    std::string detail;
    std::vector<double> errs;
    const int unknowns = static_cast<int>(nodes.size()) * pair_unknowns(3);
    for (auto [P, D] : {std::pair{105, 100}, std::pair{150, 140}, std::pair{210, 202}}) {
        FanParams fan;
        fan.p = p;
        fan.cap = 0.9;
        fan.width = 1.2;
        fan.points = P;
        fan.dirs = D;
        std::vector<PhaseState> entries = lens::fan_entries(sys, fan);
        std::vector<RaySpec> rays(entries.size());
        TransformOptions opt;
        parallel_for(static_cast<long>(entries.size()), [&](long i) {
            LensRecord r = lens::scatter(sys, entries[i]);
            Trajectory tr = flow::variation(sys, entries[i], r.ell);
            auto rw = transform::self_ray_weights(sys, tr, [](const Vec&) { return true; }, opt);
            rays[i] = {i, entries[i], r.ell, transform::apply_weights(rw, phantom)};
        });
        LinearSystemAssembly a = invert::assemble(sys, nodes, rays, opt);
        PerturbationPair sol = invert::solve_linear(a, invert::default_lambda(a, 1e-7));
        double e2 = 0, t2 = 0;
        for (long id : nodes.nodes()) {
            Vec z = sys.chart().node_point(id), f, r;
            Mat F, R;
            phantom.eval(z, f, F);
            sol.pair.eval(z, r, R);
            e2 += (r - f).squaredNorm() + 0.5 * (R - F).squaredNorm();
            t2 += f.squaredNorm() + 0.5 * F.squaredNorm();
        }
        errs.push_back(std::sqrt(e2 / t2));
        detail += fmt("%s%.1fx rows: %.4f", detail.empty() ? "" : ", ",
                      static_cast<double>(a.design.rows()) / unknowns, errs.back());
    }
    bool monotone = errs[0] > errs[1] && errs[1] > errs[2];
    return {monotone && errs.back() < 0.10,
            fmt("rel. L2 error on %ld cap nodes (%d unknowns): %s; %s", nodes.size(), unknowns, detail.c_str(),
                monotone ? "decreasing" : "NOT decreasing")};
}

// ---- 8 ----
Outcome newton() {
    Json base = Json::parse(R"({
        "chart": {"half": 1.25, "nodes": 40},
        "c": {"type": "radial_quadratic", "base": 1, "amp": 0.1},
        "omega": {"01": {"type": "constant", "value": 0.3}}})");
    Json truth = Json::parse(R"({
        "chart": {"half": 1.25, "nodes": 40},
        "c": {"type": "sum", "terms": [{"type": "radial_quadratic", "base": 1, "amp": 0.1},
              {"type": "windowed_gaussian", "amp": 0.05, "center": [0.03, 0, -0.78], "sigma": 0.09, "radius": 0.2}]},
        "omega": {"01": {"type": "sum", "terms": [{"type": "constant", "value": 0.3},
              {"type": "windowed_gaussian", "amp": 0.02, "center": [-0.03, 0.02, -0.78], "sigma": 0.09, "radius": 0.2}]}}})");
    Json gen = {{"system", truth},
                {"fan", {{"cap", 0.9}, {"width", 1.2}, {"points", 100}, {"dirs", 100}}},
                {"localizer", {{"eps", 1.0}, {"shift", 0.5}}}};
    cli::RunOptions ro = options("newton");
    cli::CommandResult g = cli::cmd_gen_lens(cli::resolve_config(gen), ro);
    if (g.exit_code != cli::kOk) return {false, "gen-lens failed"};
    Json inv = gen;
    inv["system"] = base;
    inv["second_system"] = truth;
    inv["inversion"] = {{"basis", "cubic"}, {"lambda_scale", 1e-7}, {"steps", 5}, {"reference", true}};
    inv["input"] = {{"lens", fs::absolute(fs::path(ro.out_dir) / "lens.csv").string()}};
    cli::CommandResult r = cli::cmd_invert(cli::resolve_config(inv), ro);
    const Json& res = r.report["results"];
    const Json& ref = res["reference"];
    const double ec = ref["c_rel_err_perturbation"], eo = ref["omega_rel_err"];
    const double eo_pert = ref["omega_rel_err_perturbation"];
    std::string hist;
    for (const auto& x : res["residuals"]) hist += fmt("%s%.2e", hist.empty() ? "" : " ", x.get<double>());
    return {r.exit_code == cli::kOk && res["steps"].size() <= 5 && ec < 0.05 && eo < 0.10,
            fmt("%zu steps, residuals %s; c error / perturbation %.4f (c-relative %.5f); Omega error / Omega %.4f "
                "(/ Omega perturbation %.2f)",
                res["steps"].size(), hist.c_str(), ec, ref["c_rel_err"].get<double>(), eo, eo_pert)};
}

// ---- 9 ----
Outcome layers() {
    Json base = Json::parse(R"({"chart": {"half": 1.25, "nodes": 25}, "c": {"type": "constant", "value": 1}})");
    Json truth = Json::parse(
        R"({"chart": {"half": 1.25, "nodes": 25}, "c": {"type": "radial_quadratic", "base": 1, "amp": 0.2}})");
    Json gen = {{"system", truth}, {"fan", {{"global", true}, {"width", 1.5}, {"points", 60}, {"dirs", 60}}}};
    cli::RunOptions ro = options("layers");
    cli::CommandResult g = cli::cmd_gen_lens(cli::resolve_config(gen), ro);
    if (g.exit_code != cli::kOk) return {false, "gen-lens failed"};
    Json cfg = gen;
    cfg["system"] = base;
    cfg["second_system"] = truth;
    cfg["inversion"] = {{"lambda_reg", 1e-4}, {"reference", true}};
    cfg["layers"] = {{"shells", 6}, {"t_top", 1.0}, {"t_bottom", 0.2}, {"iters", 2}};
    cfg["input"] = {{"lens", fs::absolute(fs::path(ro.out_dir) / "lens.csv").string()}};
    cli::CommandResult r = cli::cmd_layer_strip(cli::resolve_config(cfg), ro);
    const Json& res = r.report["results"];
    const double e = res["reference"]["c_rel_err"], ep = res["reference"]["c_rel_err_perturbation"];
    const int done = res["shells_completed"];
    std::string log;
    for (const auto& s : res["shells"]) log += fmt("%s%.3f", log.empty() ? "" : " ", s["t_lo"].get<double>());
    return {r.exit_code == cli::kOk && done == 6 && e < 0.05 && res["monotone_inward"] == true &&
                res["ahead_reads"] == false,
            fmt("%d/6 shells (t_lo %s), ahead reads %s; c error outside r = 0.2: %.4f (/ perturbation %.3f)", done,
                log.c_str(), res["ahead_reads"] == true ? "yes" : "none", e, ep)};
}

// ---- 10 ----
Outcome negative_controls() {
    cli::RunOptions ro = options("negative_xray");
    ro.force_A_identity = true;
    cli::CommandResult x = cli::cmd_forward_xray(cli::resolve_config(xray_config()), ro);
    const double broken = x.report["results"]["max_rel_err"];

    // Strong central field: circles of radius t have margin 1/t - amp exp(-t^2 / w^2).
    const double amp = 8.0, width = 0.4, t_top = 1.0, t_bottom = 0.2;
    const int shells = 8;
    const double dt = (t_top - t_bottom) / shells;
    int expect = -1;
    for (int k = 0; k < shells && expect < 0; ++k)
        for (double level : {t_top - k * dt, t_top - (k + 0.5) * dt, t_top - (k + 1) * dt})
            if (1.0 / level - amp * std::exp(-level * level / (width * width)) <= 0) expect = k;
    Json sys = {{"dim", 2},
                {"chart", {{"half", 1.25}, {"nodes", 41}}},
                {"omega", {{"01", {{"type", "planar_gaussian"}, {"amp", amp}, {"width", width}}}}}};
    Json cfg = {{"system", sys}, {"fan", {{"global", true}, {"width", 1.5}, {"points", 16}, {"dirs", 8}}}};
    cli::RunOptions lo = options("negative_layers");
    cli::cmd_gen_lens(cli::resolve_config(cfg), lo);
    cfg["layers"] = {{"shells", shells}, {"t_top", t_top}, {"t_bottom", t_bottom}, {"iters", 1}};
    cfg["input"] = {{"lens", fs::absolute(fs::path(lo.out_dir) / "lens.csv").string()}};
    cli::CommandResult l = cli::cmd_layer_strip(cli::resolve_config(cfg), lo);
    const Json& res = l.report["results"];
    const Json& last = res["shells"].back();
    const int stopped = last["index"];
    const bool lost = res.contains("error") &&
                      res["error"].get<std::string>().rfind("ConvexityLost", 0) == 0 && last["completed"] == false;
    return {x.exit_code != cli::kOk && broken > 1e-2 && lost && stopped == expect,
            fmt("A = Id: max rel. err %.2e; ConvexityLost at shell %d (margin %.3f), margin scan predicts shell %d",
                broken, stopped, last["min_margin"].get<double>(), expect)};
}

}  // namespace

int main(int argc, char** argv) {
    g_out = fs::temp_directory_path() / "maglens_acceptance";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    struct Criterion {
        int id;
        const char* name;
        double limit;  // seconds
        std::function<Outcome()> run;
    };
    const Criterion all[] = {
        {1, "flow oracle", 1, flow_oracle},
        {2, "energy conservation", 10, energy},
        {3, "pseudo-linearization identity", 120, identity},
        {4, "weight algebra", 30, weights},
        {5, "transform-flow consistency", 300, xray},
        {6, "ellipticity", 120, ellipticity},
        {7, "linear phantom recovery", 600, linear_phantom},
        {8, "nonlinear local recovery", 1800, newton},
        {9, "layer stripping", 3600, layers},
        {10, "negative controls", 600, negative_controls},
    };
    int failed = 0;
    for (const Criterion& c : all) {
        if (!only.empty() && !only.count(c.id)) continue;
        auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw ") + e.what()};
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bool pass = o.pass && secs < c.limit;
        failed += !pass;
        std::printf("C%-2d %s  %s: %s [%.1f s, limit %.0f s]\n", c.id, pass ? "PASS" : "FAIL", c.name,
                    o.detail.c_str(), secs, c.limit);
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
