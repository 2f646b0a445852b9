#include "maglens/cli.hpp"

#include "maglens/expressions.hpp"
#include "maglens/grid_io.hpp"
#include "maglens/parallel.hpp"

#include "csv_util.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <set>

namespace maglens::cli {

namespace fs = std::filesystem;

namespace {

Json system_defaults() {
    return {{"dim", 3},
            {"background", "euclidean"},
            {"boundary", "unit_ball"},
            {"chart", {{"half", 1.25}, {"nodes", 24}}},
            {"c", {{"type", "constant"}, {"value", 1.0}}},
            {"omega", Json::object()}};
}

// Subtrees taken wholesale from the user document and validated when built.
const std::set<std::string>& opaque_paths() {
    static const std::set<std::string> s{"system.c", "system.omega", "second_system.c", "second_system.omega",
                                         "layers.foliation"};
    return s;
}

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

Json merge(const Json& def, const Json& user, const std::string& path) {
    if (opaque_paths().count(path)) return user;
    if (def.is_object()) {
        require(user.is_object(), path + " must be an object");
        Json out = def;
        for (const auto& [key, value] : user.items()) {
            std::string sub = path.empty() ? key : path + "." + key;
            require(def.contains(key), "unknown key " + sub);
            out[key] = merge(def[key], value, sub);
        }
        return out;
    }
    if (def.is_boolean()) {
        require(user.is_boolean(), path + " must be a boolean");
        return user;
    }
    if (def.is_number_integer()) {
        require(user.is_number_integer(), path + " must be an integer");
        return user;
    }
    if (def.is_number()) {
        require(user.is_number(), path + " must be a number");
        return user.get<double>();
    }
    if (def.is_string()) {
        require(user.is_string(), path + " must be a string");
        return user;
    }
    if (def.is_array()) {
        require(user.is_array(), path + " must be an array");
        for (const auto& x : user) require(x.is_number(), path + " must hold numbers");
        Json out = Json::array();
        for (const auto& x : user) out.push_back(x.get<double>());
        return out;
    }
    fail("unsupported default at " + path);
}

std::string fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

void one_of(const Json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    for (const char* a : allowed)
        if (j.get<std::string>() == a) return;
    fail("bad value '" + j.get<std::string>() + "' for " + path);
}

double num(const Json& e, const char* key) {
    require(e.contains(key) && e[key].is_number(), std::string("expression needs a number '") + key + "'");
    return e[key].get<double>();
}

Vec vec_of(const Json& e, const char* key, int n) {
    require(e.contains(key) && e[key].is_array() && static_cast<int>(e[key].size()) == n,
            std::string("expression needs '") + key + "' with " + std::to_string(n) + " entries");
    Vec v(n);
    for (int i = 0; i < n; ++i) {
        require(e[key][i].is_number(), std::string("'") + key + "' must hold numbers");
        v[i] = e[key][i].get<double>();
    }
    return v;
}

Vec to_vec(const Json& a) {
    Vec v(static_cast<int>(a.size()));
    for (int i = 0; i < v.size(); ++i) v[i] = a[i].get<double>();
    return v;
}

FlowOptions flow_options(const Json& f) {
    FlowOptions o;
    o.ode.rtol = f["rtol"];
    o.ode.atol = f["atol"];
    o.t_max = f["t_max"];
    o.event_tol = f["event_tol"];
    o.unit_tol = f["unit_tol"];
    o.graze_tol = f["graze_tol"];
    return o;
}

FanParams fan_params(const Json& cfg) {
    const Json& f = cfg["fan"];
    FanParams fan;
    fan.p = to_vec(f["p"]);
    fan.cap = f["cap"];
    fan.width = f["width"];
    fan.points = f["points"];
    fan.dirs = f["dirs"];
    fan.o_local = f["o_local"];
    fan.C = f["C"];
    fan.global = f["global"];
    fan.eps = cfg["localizer"]["eps"];
    fan.shift = cfg["localizer"]["shift"];
    return fan;
}

Basis basis_of(const Json& j) { return j.get<std::string>() == "cubic" ? Basis::Cubic : Basis::Linear; }

NewtonOptions newton_options(const Json& cfg, const RunOptions& ro) {
    const Json& inv = cfg["inversion"];
    NewtonOptions no;
    no.transform.gauss = inv["gauss"];
    no.transform.max_panel = inv["max_panel"];
    no.transform.force_A_identity = ro.force_A_identity;
    no.transform.flow = flow_options(cfg["flow"]);
    no.lambda_reg = inv["lambda_reg"];
    no.lambda_scale = inv["lambda_scale"];
    no.solve.max_iter = inv["cg_max_iter"];
    no.solve.tol = inv["cg_tol"];
    no.noise_floor = inv["noise_floor"];
    return no;
}

fs::path resolve_path(const RunConfig& cfg, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : cfg.base_dir / path;
}

fs::path out_path(const RunOptions& ro, const std::string& name) {
    fs::create_directories(ro.out_dir);
    return fs::path(ro.out_dir) / name;
}

CommandResult finish(const std::string& command, const RunConfig& cfg, const RunOptions& ro, Json results,
                     int exit_code) {
    CommandResult r;
    r.exit_code = exit_code;
    r.report = {{"command", command},
                {"version", kVersion},
                {"config_hash", cfg.hash},
                {"config", cfg.resolved},
                {"options", {{"threads", ro.threads}, {"debug_force_A_identity", ro.force_A_identity}}},
                {"results", std::move(results)},
                {"exit_code", exit_code}};
    std::ofstream out(out_path(ro, command + ".report.json"));
    if (!out) throw FormatError("cannot write report for " + command);
    out << r.report.dump(2) << '\n';
    return r;
}

double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Slope of -log r against log p by least squares.
double order_fit(const std::vector<double>& panels, const std::vector<double>& r) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double k = static_cast<double>(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        double x = std::log(panels[i]), y = -std::log(r[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

void write_state_grids(const ReconstructionState& st, const Json& cfg, const RunOptions& ro, Json& results) {
    const MagneticSystem& base = st.base();
    const Chart& ch = base.chart();
    const int n = base.dim();
    const long count = ch.node_count();
    GridFormat fmt = cfg["output"]["grid_format"].get<std::string>() == "binary" ? GridFormat::Binary : GridFormat::Csv;
    const std::string ext = fmt == GridFormat::Binary ? ".bin" : ".csv";

    GridDump c{ch, {"c"}, {std::vector<double>(count)}};
    GridDump om{ch, {}, {}};
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) om.components.push_back("omega" + std::to_string(i) + std::to_string(j));
    om.values.assign(om.components.size(), std::vector<double>(count));
    for (long id = 0; id < count; ++id) {
        c.values[0][id] = st.c_at(id);
        Mat w = st.omega_at(id);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) om.values[pair_index(n, i, j)][id] = w(i, j);
    }
    fs::path cp = out_path(ro, "c" + ext), op = out_path(ro, "omega" + ext);
    write_grid(c, cp.string(), fmt);
    write_grid(om, op.string(), fmt);
    results["grids"] = {{"c", cp.string()}, {"omega", op.string()}};
}

LensDataset load_lens(const RunConfig& cfg, int n) {
    const std::string p = cfg.resolved["input"]["lens"];
    require(!p.empty(), "input.lens is required");
    LensDataset data = lens::read_dataset(resolve_path(cfg, p).string());
    require(data.dim == n, "lens data dimension does not match the system");
    return data;
}

}  // namespace

Json default_config() {
    return {
        {"system", system_defaults()},
        {"second_system", system_defaults()},
        {"fan",
         {{"p", Json::array()},
          {"cap", 0.3},
          {"width", 0.5},
          {"points", 16},
          {"dirs", 16},
          {"o_local", false},
          {"C", 1.0},
          {"global", false}}},
        {"flow",
         {{"rtol", 1e-10},
          {"atol", 1e-12},
          {"t_max", 0.0},
          {"event_tol", 1e-10},
          {"unit_tol", 1e-8},
          {"graze_tol", 1e-6}}},
        {"localizer", {{"eps", 0.0}, {"shift", 0.0}}},
        {"identity",
         {{"samples", 100},
          {"seed", 1},
          {"radius", 0.5},
          {"t_min", 0.2},
          {"t_max", 0.7},
          {"panels", 16},
          {"order_panels", {1.0, 2.0, 4.0}},
          {"order_samples", 10},
          {"threshold", 1e-6}}},
        {"xray",
         {{"a_rule", "remaining_time"}, {"gauss", 6}, {"max_panel", 0.01}, {"floor", 1e-3}, {"threshold", 1e-5}}},
        {"symbol",
         {{"F", {0.5, 1.0, 2.0}},
          {"alpha", 1.0},
          {"chi", "gaussian"},
          {"chi_width", 0.25},
          {"grid", 20},
          {"range", 2.0},
          {"eta_angle", 0.3},
          {"weights", "identity"},
          {"sphere_order", 96},
          {"line_order", 64},
          {"null_tol", 1e-8}}},
        {"inversion",
         {{"basis", "cubic"},
          {"lambda_reg", 0.0},
          {"lambda_scale", 1e-4},
          {"steps", 5},
          {"stagnation", 0.25},
          {"gauss", 4},
          {"max_panel", 0.05},
          {"cg_max_iter", 5000},
          {"cg_tol", 1e-8},
          {"noise_floor", 1e-7},
          {"reference", false}}},
        {"layers",
         {{"shells", 6},
          {"t_top", 1.0},
          {"t_bottom", 0.2},
          {"iters", 2},
          {"update_tol", 1e-10},
          {"convexity_points", 96},
          {"basis", "linear"},
          {"foliation", {{"type", "radius"}}},
          {"reference_min_radius", 0.2}}},
        {"input", {{"lens", ""}}},
        {"output", {{"grid_format", "csv"}, {"lens_file", "lens.csv"}}},
    };
}

RunConfig resolve_config(const Json& user, const fs::path& base_dir) {
    require(user.is_object(), "config must be an object");
    Json r = merge(default_config(), user, "");
    if (!user.contains("second_system")) r["second_system"] = r["system"];

    RunConfig cfg;
    cfg.base_dir = base_dir;

    const int n = r["system"]["dim"];
    for (const char* block : {"system", "second_system"}) {
        const Json& s = r[block];
        const std::string b = block;
        require(s["dim"].get<int>() == n, "second_system.dim must equal system.dim");
        one_of(s["background"], b + ".background", {"euclidean"});
        one_of(s["boundary"], b + ".boundary", {"unit_ball"});
    }
    require(n >= 2 && n <= kMaxDim, "system.dim must be 2 or 3");
    one_of(r["xray"]["a_rule"], "xray.a_rule", {"exit_time", "remaining_time"});
    one_of(r["symbol"]["chi"], "symbol.chi", {"gaussian", "bump"});
    one_of(r["symbol"]["weights"], "symbol.weights", {"identity", "paper"});
    one_of(r["inversion"]["basis"], "inversion.basis", {"linear", "cubic"});
    one_of(r["layers"]["basis"], "layers.basis", {"linear", "cubic"});
    one_of(r["output"]["grid_format"], "output.grid_format", {"csv", "binary"});
    require(r["identity"]["samples"].get<int>() > 0, "identity.samples must be positive");
    require(r["identity"]["order_panels"].size() >= 2, "identity.order_panels needs two entries");
    require(r["symbol"]["grid"].get<int>() > 0, "symbol.grid must be positive");
    require(r["layers"]["shells"].get<int>() > 0, "layers.shells must be positive");

    MagneticSystem s1 = build_system(r["system"], base_dir);
    MagneticSystem s2 = build_system(r["second_system"], base_dir);
    build_expression(r["layers"]["foliation"], n, base_dir);
    const Chart& ch = s1.chart();
    const double diameter = (ch.hi() - ch.lo()).norm();

    Json& p = r["fan"]["p"];
    if (p.empty()) {
        p = std::vector<double>(n, 0.0);
        p[n - 1] = -1.0;
    }
    require(static_cast<int>(p.size()) == n, "fan.p must have system.dim entries");
    if (r["flow"]["t_max"].get<double>() <= 0) {
        // Ten crossings of the chart at the slowest coordinate speed 1 / c.
        double cmax = 0;
        for (const MagneticSystem* s : {&s1, &s2})
            for (double c : sample_nodes(s->chart(), *s->conformal())) cmax = std::max(cmax, c);
        r["flow"]["t_max"] = 10.0 * diameter * cmax;
    }
    if (r["localizer"]["eps"].get<double>() <= 0) r["localizer"]["eps"] = 0.1 / diameter;
    if (r["localizer"]["shift"].get<double>() <= 0) r["localizer"]["shift"] = 5.0 * ch.max_spacing();

    cfg.resolved = r;
    cfg.hash = fnv1a(r.dump());
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open config " + path);
    Json user;
    try {
        in >> user;
    } catch (const std::exception& e) {
        fail(std::string("cannot parse config: ") + e.what());
    }
    fs::path base = fs::path(path).parent_path();
    return resolve_config(user, base.empty() ? fs::path(".") : base);
}

ScalarFieldPtr build_expression(const Json& e, int n, const fs::path& base_dir) {
    require(e.is_object() && e.contains("type") && e["type"].is_string(), "expression needs a string 'type'");
    const std::string type = e["type"];
    auto keys = [&](std::initializer_list<const char*> allowed) {
        for (const auto& [k, v] : e.items()) {
            if (k == "type") continue;
            bool ok = false;
            for (const char* a : allowed) ok = ok || k == a;
            require(ok, "unknown key '" + k + "' in " + type + " expression");
        }
    };
    if (type == "constant") {
        keys({"value"});
        return expr::constant(n, num(e, "value"));
    }
    if (type == "affine") {
        keys({"a", "offset"});
        return expr::affine(vec_of(e, "a", n), num(e, "offset"));
    }
    if (type == "radial_quadratic") {
        keys({"base", "amp"});
        return expr::radial_quadratic(n, num(e, "base"), num(e, "amp"));
    }
    if (type == "gaussian") {
        keys({"base", "amp", "center", "width"});
        return expr::gaussian(num(e, "base"), num(e, "amp"), vec_of(e, "center", n), num(e, "width"));
    }
    if (type == "bump") {
        keys({"base", "amp", "center", "radius"});
        return expr::bump(num(e, "base"), num(e, "amp"), vec_of(e, "center", n), num(e, "radius"));
    }
    if (type == "windowed_gaussian") {
        keys({"amp", "center", "sigma", "radius"});
        return expr::windowed_gaussian(num(e, "amp"), vec_of(e, "center", n), num(e, "sigma"), num(e, "radius"));
    }
    if (type == "planar_gaussian") {
        keys({"amp", "width"});
        return expr::planar_gaussian(n, num(e, "amp"), num(e, "width"));
    }
    if (type == "radius") {
        keys({});
        return expr::radius(n);
    }
    if (type == "sum") {
        keys({"terms"});
        require(e.contains("terms") && e["terms"].is_array() && !e["terms"].empty(), "sum needs a nonempty 'terms'");
        ScalarFieldPtr acc;
        for (const auto& t : e["terms"]) {
            ScalarFieldPtr f = build_expression(t, n, base_dir);
            acc = acc ? expr::sum(acc, f) : f;
        }
        return acc;
    }
    if (type == "scaled") {
        keys({"factor", "of"});
        require(e.contains("of"), "scaled needs 'of'");
        return expr::scaled(build_expression(e["of"], n, base_dir), num(e, "factor"));
    }
    if (type == "grid") {
        keys({"path", "component"});
        require(e.contains("path") && e["path"].is_string(), "grid needs a string 'path'");
        std::string comp = e.value("component", "");
        fs::path p(e["path"].get<std::string>());
        if (!p.is_absolute()) p = base_dir / p;
        GridDump d = read_grid(p.string());
        require(d.chart.dim() == n, "grid dimension does not match the system");
        for (std::size_t k = 0; k < d.components.size(); ++k)
            if (comp.empty() ? d.components.size() == 1 : d.components[k] == comp)
                return std::make_shared<GridScalarField>(d.chart, d.values[k]);
        fail("grid " + p.string() + " has no component '" + comp + "'");
    }
    fail("unknown expression type '" + type + "'");
}

MagneticSystem build_system(const Json& block, const fs::path& base_dir) {
    const int n = block["dim"];
    const double half = block["chart"]["half"];
    const int nodes = block["chart"]["nodes"];
    require(half > 1.0, "chart.half must exceed 1 so the chart covers the unit ball");
    require(nodes >= 4, "chart.nodes must be at least 4");
    ScalarFieldPtr c = build_expression(block["c"], n, base_dir);

    const Json& om = block["omega"];
    require(om.is_object(), "omega must be an object keyed by index pairs such as \"01\"");
    TwoFormField omega = TwoFormField::zero(n);
    if (!om.empty()) {
        std::vector<ScalarFieldPtr> packed(pair_count(n), expr::constant(n, 0.0));
        for (const auto& [key, value] : om.items()) {
            require(key.size() == 2 && std::isdigit(key[0]) && std::isdigit(key[1]), "bad omega key '" + key + "'");
            int i = key[0] - '0', j = key[1] - '0';
            require(i < j && j < n, "omega key '" + key + "' must name i < j < dim");
            packed[pair_index(n, i, j)] = build_expression(value, n, base_dir);
        }
        omega = TwoFormField(n, packed);
    }
    MagneticSystem sys = expr::ball_system(n, half, nodes, c, omega);
    const Chart& ch = sys.chart();
    for (long id = 0; id < ch.node_count(); ++id) {
        Vec z = ch.node_point(id);
        if (sys.rho(z) >= 0 && !(c->value(z) > 0)) fail("c must be positive in M");
    }
    return sys;
}

CommandResult cmd_gen_lens(const RunConfig& cfg, const RunOptions& ro) {
    const Json& r = cfg.resolved;
    MagneticSystem sys = build_system(r["system"], cfg.base_dir);
    LensDataset data = lens::sample_fan(sys, fan_params(r), flow_options(r["flow"]));
    fs::path path = out_path(ro, r["output"]["lens_file"]);
    lens::write_dataset(data, path.string());
    long trapped = 0, grazing = 0;
    for (const LensRecord& rec : data.records) {
        trapped += rec.trapped;
        grazing += rec.grazing;
    }
    const long total = static_cast<long>(data.records.size());
    Json res = {{"lens_file", path.string()},
                {"system_hash", data.system_hash},
                {"records", total},
                {"trapped", trapped},
                {"grazing", grazing}};
    int code = 2 * trapped > total ? kDataWarning : kOk;
    if (code != kOk) res["warning"] = "most records are trapped";
    return finish("gen-lens", cfg, ro, res, code);
}

CommandResult cmd_check_identity(const RunConfig& cfg, const RunOptions& ro) {
    const Json& r = cfg.resolved;
    const Json& id = r["identity"];
    MagneticSystem s1 = build_system(r["system"], cfg.base_dir);
    MagneticSystem s2 = build_system(r["second_system"], cfg.base_dir);
    const FlowOptions fo = flow_options(r["flow"]);
    const int n = s1.dim();
    const int samples = id["samples"], panels = id["panels"];
    const double radius = id["radius"], t_min = id["t_min"], t_max = id["t_max"];

    std::mt19937 rng(id["seed"].get<unsigned>());
    std::uniform_real_distribution<double> box(-radius, radius), ut(t_min, t_max);
    std::normal_distribution<double> gauss;
    std::vector<PhaseState> starts;
    std::vector<double> times;
    while (static_cast<int>(starts.size()) < samples) {
        Vec z(n), v(n);
        for (int i = 0; i < n; ++i) z[i] = box(rng);
        for (int i = 0; i < n; ++i) v[i] = gauss(rng);
        double t = ut(rng);
        if (z.norm() > radius) continue;
        starts.push_back({z, v / s1.speed(z, v)});
        times.push_back(t);
    }

    std::vector<double> res(samples);
    parallel_for(samples, [&](long k) {
        res[k] = transform::identity_residual(s1, s2, starts[k], times[k], panels, ro.force_A_identity, fo);
    });

    std::vector<double> plist = id["order_panels"].get<std::vector<double>>();
    const int order_samples = std::min(id["order_samples"].get<int>(), samples);
    std::vector<std::vector<double>> ladder(order_samples, std::vector<double>(plist.size()));
    parallel_for(static_cast<long>(order_samples) * plist.size(), [&](long k) {
        long s = k / plist.size(), j = k % plist.size();
        ladder[s][j] = transform::identity_residual(s1, s2, starts[s], times[s], static_cast<int>(plist[j]),
                                                    ro.force_A_identity, fo);
    });
    std::vector<double> orders;
    for (const auto& l : ladder)
        if (*std::min_element(l.begin(), l.end()) > 1e-13) orders.push_back(order_fit(plist, l));

    {
        std::ofstream out(out_path(ro, "identity.csv"));
        out << "sample";
        for (int i = 0; i < n; ++i) out << ",z" << i;
        for (int i = 0; i < n; ++i) out << ",v" << i;
        out << ",t,residual\n";
        for (int k = 0; k < samples; ++k) {
            std::string line = std::to_string(k);
            for (int i = 0; i < n; ++i) csv::put(line, starts[k].z[i]);
            for (int i = 0; i < n; ++i) csv::put(line, starts[k].v[i]);
            csv::put(line, times[k]);
            csv::put(line, res[k]);
            out << line << '\n';
        }
    }

    const double max_res = *std::max_element(res.begin(), res.end());
    const double order = median(orders);
    const double threshold = id["threshold"];
    const bool res_ok = max_res < threshold;
    const bool order_ok = orders.empty() || order >= transform::kIdentityOrder - 0.5;
    Json out = {{"samples", samples},
                {"max_residual", max_res},
                {"median_residual", median(res)},
                {"nominal_order", transform::kIdentityOrder},
                {"fitted_order", orders.empty() ? Json(nullptr) : Json(order)},
                {"order_samples_used", orders.size()},
                {"residual_ok", res_ok},
                {"order_ok", order_ok}};
    return finish("check-identity", cfg, ro, out, res_ok && order_ok ? kOk : kAssertionFailure);
}

CommandResult cmd_forward_xray(const RunConfig& cfg, const RunOptions& ro) {
    const Json& r = cfg.resolved;
    const Json& x = r["xray"];
    MagneticSystem s1 = build_system(r["system"], cfg.base_dir);
    MagneticSystem s2 = build_system(r["second_system"], cfg.base_dir);
    const int n = s1.dim();
    TransformOptions opt;
    opt.gauss = x["gauss"];
    opt.max_panel = x["max_panel"];
    opt.a_rule = x["a_rule"].get<std::string>() == "exit_time" ? ARule::ExitTime : ARule::RemainingTime;
    opt.force_A_identity = ro.force_A_identity;
    opt.flow = flow_options(r["flow"]);
    FlowOptions loose = opt.flow;
    loose.unit_tol = std::numeric_limits<double>::infinity();

    AnalyticPair pair = difference_pair(s1, s2);
    std::vector<PhaseState> entries = lens::fan_entries(s1, fan_params(r));
    const long m = static_cast<long>(entries.size());
    std::vector<Vec> val(m), mis(m);
    std::vector<char> trapped(m, 0);
    parallel_for(m, [&](long k) {
        LensRecord rec = lens::scatter(s1, entries[k], opt.flow);
        if (rec.trapped) {
            trapped[k] = 1;
            val[k] = mis[k] = Vec::Zero(n);
            return;
        }
        Trajectory ray = flow::integrate(s1, entries[k], rec.ell, opt.flow);
        val[k] = transform::i_ab(s1, s2, pair, ray, opt);
        mis[k] = rec.exit.v - flow::flow_to(s2, entries[k], rec.ell, loose).v;
    });

    double peak = 0, e2 = 0, m2 = 0;
    for (long k = 0; k < m; ++k) peak = std::max(peak, mis[k].norm());
    const double floor = std::max(x["floor"].get<double>() * peak, std::numeric_limits<double>::min());
    double worst = 0;
    long significant = 0, skipped = 0;
    std::vector<double> rel(m, 0.0);
    for (long k = 0; k < m; ++k) {
        if (trapped[k]) {
            ++skipped;
            continue;
        }
        e2 += (val[k] - mis[k]).squaredNorm();
        m2 += mis[k].squaredNorm();
        rel[k] = (val[k] - mis[k]).norm() / std::max(mis[k].norm(), floor);
        if (mis[k].norm() >= floor) {
            ++significant;
            worst = std::max(worst, rel[k]);
        }
    }
    {
        std::ofstream out(out_path(ro, "xray.csv"));
        out << "ray";
        for (int i = 0; i < n; ++i) out << ",iab" << i;
        for (int i = 0; i < n; ++i) out << ",mismatch" << i;
        out << ",rel_err,trapped\n";
        for (long k = 0; k < m; ++k) {
            std::string line = std::to_string(k);
            for (int i = 0; i < n; ++i) csv::put(line, val[k][i]);
            for (int i = 0; i < n; ++i) csv::put(line, mis[k][i]);
            csv::put(line, rel[k]);
            line += trapped[k] ? ",1" : ",0";
            out << line << '\n';
        }
    }
    const double threshold = x["threshold"];
    Json out = {{"rays", m},
                {"trapped", skipped},
                {"significant_rays", significant},
                {"max_mismatch", peak},
                {"max_rel_err", worst},
                {"global_rel_err", m2 > 0 ? std::sqrt(e2 / m2) : 0.0}};
    return finish("forward-xray", cfg, ro, out, worst < threshold && significant > 0 ? kOk : kAssertionFailure);
}

CommandResult cmd_ellipticity(const RunConfig& cfg, const RunOptions& ro) {
    const Json& r = cfg.resolved;
    const Json& s = r["symbol"];
    const int n = r["system"]["dim"];
    const int grid = s["grid"];
    const double range = s["range"], angle = s["eta_angle"], alpha = s["alpha"];
    const std::vector<double> Fs = s["F"].get<std::vector<double>>();
    const double null_tol = s["null_tol"];
    transform::SymbolOptions so;
    so.sphere_order = s["sphere_order"];
    so.line_order = s["line_order"];
    transform::BSampler B = s["weights"].get<std::string>() == "paper" ? transform::paper_b(n) : transform::identity_b(n);
    transform::Cutoff chi = s["chi"].get<std::string>() == "bump" ? transform::bump_cutoff(s["chi_width"])
                                                                  : transform::gaussian_cutoff(s["chi_width"]);
    const Eigen::MatrixXd A0 = Eigen::MatrixXd::Identity(n, n);

    struct Row {
        std::string symbol;
        double F = 0, xi = 0;
        Eigen::VectorXd eta;
        transform::SymbolReport rep;
        std::string status = "ok";
    };
    const int per_point = 1 + static_cast<int>(Fs.size());
    std::vector<Row> rows(static_cast<std::size_t>(grid) * grid * per_point);
    auto coord = [&](int i) { return -range + 2.0 * range * (i + 0.5) / grid; };
    parallel_for(static_cast<long>(rows.size()), [&](long k) {
        Row& row = rows[k];
        const int slot = static_cast<int>(k % per_point);
        const long point = k / per_point;
        row.xi = coord(static_cast<int>(point / grid));
        row.eta = Eigen::VectorXd::Zero(std::max(n - 1, 1));
        const double e = coord(static_cast<int>(point % grid));
        row.eta[0] = e * std::cos(angle);
        if (n > 2) row.eta[1] = e * std::sin(angle);
        try {
            if (slot == 0) {
                row.symbol = "fiber_infinity";
                row.F = std::numeric_limits<double>::quiet_NaN();
                row.rep = transform::symbol_fiber_infinity(n, row.xi, row.eta, chi, A0, B, so);
            } else {
                row.symbol = "boundary";
                row.F = Fs[slot - 1];
                row.rep = transform::symbol_boundary(n, row.xi, row.eta, row.F, A0, B, alpha, so);
            }
        } catch (const BadParameters& err) {
            row.status = err.what();
        }
    });

    double min_c = std::numeric_limits<double>::infinity(), max_full = 0, max_herm = 0;
    long rejected = 0, ok = 0;
    {
        std::ofstream out(out_path(ro, "ellipticity.csv"));
        out << "symbol,F,xi";
        for (int i = 0; i + 1 < n; ++i) out << ",eta" << i;
        out << ",min_eig_constrained,min_eig_full,null_residual,hermitian_defect,status\n";
        for (const Row& row : rows) {
            std::string line = row.symbol;
            csv::put(line, row.F);
            csv::put(line, row.xi);
            for (int i = 0; i + 1 < n; ++i) csv::put(line, row.eta[i]);
            csv::put(line, row.rep.min_eig_constrained);
            csv::put(line, row.rep.min_eig_full);
            csv::put(line, row.rep.null_residual);
            csv::put(line, row.rep.hermitian_defect);
            std::string status = row.status;
            std::replace(status.begin(), status.end(), ',', ';');
            out << line << ',' << status << '\n';
            if (row.status != "ok") {
                ++rejected;
                continue;
            }
            ++ok;
            min_c = std::min(min_c, row.rep.min_eig_constrained);
            max_full = std::max(max_full, std::abs(row.rep.min_eig_full));
            max_herm = std::max(max_herm, row.rep.hermitian_defect);
        }
    }
    const bool positive = ok > 0 && min_c > 0;
    const bool null_seen = ok > 0 && max_full < null_tol;
    Json out = {{"rows", rows.size()},
                {"rejected_rows", rejected},
                {"min_eig_constrained", ok ? Json(min_c) : Json(nullptr)},
                {"max_abs_min_eig_full", max_full},
                {"max_hermitian_defect", max_herm},
                {"positive_on_constrained", positive},
                {"null_vector_seen", null_seen}};
    int code = !(positive && null_seen) ? kAssertionFailure : rejected ? kDataWarning : kOk;
    return finish("ellipticity", cfg, ro, out, code);
}

CommandResult cmd_invert(const RunConfig& cfg, const RunOptions& ro) {
    const Json& r = cfg.resolved;
    const Json& inv = r["inversion"];
    MagneticSystem base = build_system(r["system"], cfg.base_dir);
    const int n = base.dim();
    LensDataset data = load_lens(cfg, n);
    Localizer loc = fields::concave_localizer(base, data.fan.p, r["localizer"]["eps"], r["localizer"]["shift"]);
    NodeSet nodes = invert::cap_nodes(base, loc, basis_of(inv["basis"]));
    std::vector<LiftRole> roles = invert::boundary_roles(base, nodes);
    NewtonOptions no = newton_options(r, ro);

    ReconstructionState st(base);
    Json steps = Json::array(), res;
    int code = kOk;
    const int max_steps = inv["steps"];
    const double stagnation = inv["stagnation"];
    try {
        for (int k = 0; k < max_steps; ++k) {
            StepReport sr = invert::newton_step(st, data, nodes, roles, no);
            steps.push_back({{"residual", sr.residual},
                             {"update_norm", sr.update_norm},
                             {"rays_used", sr.rays_used},
                             {"rays_dropped", sr.rays_dropped},
                             {"cg_iterations", sr.cg_iterations},
                             {"curl_residual", sr.curl_residual}});
            std::fprintf(stderr, "step %d residual %.3e update %.3e\n", k, sr.residual, sr.update_norm);
            if (sr.update_norm == 0.0) break;
            const auto& h = st.residuals;
            if (h.size() >= 2 && h[h.size() - 1] > (1.0 - stagnation) * h[h.size() - 2]) break;
        }
    } catch (const Error& e) {
        res["error"] = e.what();
        code = kAssertionFailure;
    }
    res["nodes"] = nodes.size();
    res["unknowns"] = nodes.size() * pair_unknowns(n);
    res["records"] = data.records.size();
    res["steps"] = steps;
    res["residuals"] = st.residuals;
    res["final_residual"] = invert::lens_residual(st.system(), data, no.transform.flow);

    if (inv["reference"].get<bool>()) {
        MagneticSystem truth = build_system(r["second_system"], cfg.base_dir);
        const Chart& ch = base.chart();
        double ec = 0, dc = 0, tc = 0, eo = 0, dO = 0, to = 0;
        for (long id : nodes.nodes()) {
            Vec z = ch.node_point(id);
            double ct = truth.conformal()->value(z), cb = base.conformal()->value(z), cr = st.c_at(id);
            ec += (cr - ct) * (cr - ct);
            dc += (ct - cb) * (ct - cb);
            tc += ct * ct;
            Mat ot = truth.form().value(z), ob = base.form().value(z), orr = st.omega_at(id);
            eo += (orr - ot).squaredNorm();
            dO += (ot - ob).squaredNorm();
            to += ot.squaredNorm();
        }
        auto ratio = [](double a, double b) { return b > 0 ? Json(std::sqrt(a / b)) : Json(nullptr); };
        res["reference"] = {{"c_rel_err", ratio(ec, tc)},
                            {"c_rel_err_perturbation", ratio(ec, dc)},
                            {"omega_rel_err", ratio(eo, to)},
                            {"omega_rel_err_perturbation", ratio(eo, dO)}};
    }
    write_state_grids(st, r, ro, res);
    return finish("invert", cfg, ro, res, code);
}

CommandResult cmd_layer_strip(const RunConfig& cfg, const RunOptions& ro) {
    const Json& r = cfg.resolved;
    const Json& L = r["layers"];
    MagneticSystem base = build_system(r["system"], cfg.base_dir);
    const int n = base.dim();
    LensDataset data = load_lens(cfg, n);
    ScalarFieldPtr f = build_expression(L["foliation"], n, cfg.base_dir);
    LayerOptions opt;
    opt.shells = L["shells"];
    opt.t_top = L["t_top"];
    opt.t_bottom = L["t_bottom"];
    opt.newton_iters = L["iters"];
    opt.update_tol = L["update_tol"];
    opt.convexity_points = L["convexity_points"];
    opt.basis = basis_of(L["basis"]);
    opt.newton = newton_options(r, ro);

    ReconstructionState st(base);
    Json res;
    int code = kOk;
    try {
        invert::layer_strip(st, data, f, opt);
    } catch (const ConvexityLost& e) {
        res["error"] = e.what();
        code = kAssertionFailure;
    } catch (const Error& e) {
        res["error"] = e.what();
        code = kAssertionFailure;
    }
    Json shells = Json::array();
    bool ahead = false, inward = true;
    for (std::size_t k = 0; k < st.shells.size(); ++k) {
        const ShellRecord& s = st.shells[k];
        shells.push_back({{"index", s.index},
                          {"t_hi", s.t_hi},
                          {"t_lo", s.t_lo},
                          {"min_margin", s.min_margin},
                          {"nodes", s.nodes},
                          {"rays", s.rays},
                          {"residuals", s.residuals},
                          {"updates", s.updates},
                          {"deepest_read", s.deepest_read},
                          {"ahead_read", s.ahead_read},
                          {"completed", s.completed}});
        ahead = ahead || s.ahead_read;
        if (k > 0 && !(s.t_hi < st.shells[k - 1].t_hi)) inward = false;
    }
    res["shells"] = shells;
    res["shells_completed"] =
        std::count_if(st.shells.begin(), st.shells.end(), [](const ShellRecord& s) { return s.completed; });
    res["ahead_reads"] = ahead;
    res["monotone_inward"] = inward;
    if (ahead || !inward) code = kAssertionFailure;

    if (r["inversion"]["reference"].get<bool>()) {
        MagneticSystem truth = build_system(r["second_system"], cfg.base_dir);
        const Chart& ch = base.chart();
        const double rmin = L["reference_min_radius"];
        double e2 = 0, c2 = 0, p2 = 0;
        for (long id = 0; id < ch.node_count(); ++id) {
            Vec z = ch.node_point(id);
            if (truth.rho(z) < 0 || z.norm() < rmin) continue;
            double ct = truth.conformal()->value(z), cb = base.conformal()->value(z), cr = st.c_at(id);
            e2 += (cr - ct) * (cr - ct);
            c2 += ct * ct;
            p2 += (ct - cb) * (ct - cb);
        }
        res["reference"] = {{"c_rel_err", c2 > 0 ? Json(std::sqrt(e2 / c2)) : Json(nullptr)},
                            {"c_rel_err_perturbation", p2 > 0 ? Json(std::sqrt(e2 / p2)) : Json(nullptr)}};
    }
    write_state_grids(st, r, ro, res);
    return finish("layer-strip", cfg, ro, res, code);
}

int run(const std::string& command, const std::string& config_path, const RunOptions& ro) {
    thread_limit() = ro.threads;
    try {
        RunConfig cfg = load_config(config_path);
        CommandResult res;
        if (command == "gen-lens")
            res = cmd_gen_lens(cfg, ro);
        else if (command == "check-identity")
            res = cmd_check_identity(cfg, ro);
        else if (command == "forward-xray")
            res = cmd_forward_xray(cfg, ro);
        else if (command == "ellipticity")
            res = cmd_ellipticity(cfg, ro);
        else if (command == "invert")
            res = cmd_invert(cfg, ro);
        else if (command == "layer-strip")
            res = cmd_layer_strip(cfg, ro);
        else
            fail("unknown command " + command);
        std::cout << res.report["results"].dump(2) << '\n';
        return res.exit_code;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << '\n';
        return kConfigError;
    } catch (const FormatError& e) {
        std::cerr << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return kAssertionFailure;
    }
}

}  // namespace maglens::cli
