#include "maglens/lens.hpp"

#include "maglens/parallel.hpp"
#include "maglens/quadrature.hpp"
#include "csv_util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace maglens {

namespace {

constexpr double kGolden = 0.6180339887498949;

Vec g_normalize(const MagneticSystem& sys, const Vec& z, const Vec& w) { return w / sys.speed(z, w); }

}  // namespace

Potential::Potential(TwoFormField omega, Vec base, int order)
    : omega_(std::move(omega)), base_(std::move(base)), order_(order) {}

Vec Potential::value(const Vec& z) const {
    const int n = omega_.dim();
    Vec a = gauge_ ? Vec(gauge_->eval(z, 1).grad) : Vec(Vec::Zero(n));
    if (omega_.is_zero()) return a;
    Vec d = z - base_;
    const QuadratureRule& r = gauss_legendre(order_);
    Mat w;
    for (int k = 0; k < order_; ++k) {
        double t = r.nodes[k];
        omega_.eval(base_ + t * d, 0, w, nullptr);
        // alpha_j += t Omega_ij d^i
        a += r.weights[k] * t * (w.transpose() * d);
    }
    return a;
}

Potential Potential::with_gauge(ScalarFieldPtr f) const {
    Potential out = *this;
    out.gauge_ = std::move(f);
    return out;
}

namespace lens {

BoundaryFrame boundary_frame(const MagneticSystem& sys, const Vec& z) {
    const int n = sys.dim();
    LocalGeometry geo = sys.geometry(z, false);
    ScalarJet r = sys.boundary()->eval(z, 1);
    Vec up = geo.g_inv * r.grad;
    double gn = std::sqrt(r.grad.dot(up));
    if (!(gn > 0)) throw BadParameters("boundary defining function has vanishing gradient");
    BoundaryFrame f;
    f.nu = up / gn;
    // Gram-Schmidt on coordinate axes in the g inner product, dropping the
    // axis most aligned with nu.
    int skip = 0;
    Vec gnu = geo.g * f.nu;
    for (int i = 1; i < n; ++i)
        if (std::abs(gnu[i]) > std::abs(gnu[skip])) skip = i;
    std::vector<Vec> basis{f.nu};
    for (int i = 0; i < n; ++i) {
        if (i == skip) continue;
        Vec e = Vec::Unit(n, i);
        for (const Vec& b : basis) e -= (b.dot(geo.g * e)) * b;
        e /= std::sqrt(e.dot(geo.g * e));
        basis.push_back(e);
        f.tangents.push_back(e);
    }
    return f;
}

Vec project_to_boundary(const MagneticSystem& sys, const Vec& q) {
    Vec z = q;
    for (int it = 0; it < 50; ++it) {
        ScalarJet r = sys.boundary()->eval(z, 1);
        if (std::abs(r.value) < 1e-14) break;
        z -= r.value * r.grad / r.grad.squaredNorm();
    }
    return z;
}

LensRecord scatter(const MagneticSystem& sys, const PhaseState& entry, const FlowOptions& o) {
    if (std::abs(sys.rho(entry.z)) > 1e-8) throw NotOnBoundary("scatter entry is not on the boundary");
    ScalarJet r = sys.boundary()->eval(entry.z, 1);
    if (r.grad.dot(entry.v) < -1e-10) throw BadParameters("scatter entry direction points out of M");
    flow::require_unit(sys, entry, o.unit_tol);
    ExitEvent ev = flow::exit_event(sys, entry, o);
    LensRecord rec;
    rec.entry = entry;
    rec.exit = ev.exit;
    rec.ell = ev.tau;
    rec.grazing = ev.grazing;
    return rec;
}

namespace {

Vec fibonacci_direction(int n, int k, int N) {
    Vec u(n);
    if (n == 2) {
        double th = 2 * M_PI * k / N;
        u << std::cos(th), std::sin(th);
        return u;
    }
    double h = N == 1 ? 0.0 : 1.0 - 2.0 * (k + 0.5) / N;
    double r = std::sqrt(std::max(0.0, 1.0 - h * h));
    double th = 2 * M_PI * std::fmod(k * kGolden, 1.0);
    u << r * std::cos(th), r * std::sin(th), h;
    return u;
}

}  // namespace

std::vector<PhaseState> fan_entries(const MagneticSystem& sys, const FanParams& fan) {
    const int n = sys.dim();
    if (fan.p.size() != n) throw BadParameters("fan base point has wrong dimension");
    if (fan.points < 1 || fan.dirs < 1) throw BadParameters("fan counts must be positive");
    if (fan.width < 0 || fan.width >= M_PI / 2) throw BadParameters("fan width must lie in [0, pi/2)");
    if (fan.global && fan.o_local) throw BadParameters("a global fan cannot be O-local");
    Vec p = fan.global ? fan.p : project_to_boundary(sys, fan.p);
    BoundaryFrame fp;
    if (!fan.global) fp = boundary_frame(sys, p);
    Localizer loc;
    if (fan.o_local) loc = fields::concave_localizer(sys, p, fan.eps, fan.shift);

    std::vector<PhaseState> out;
    out.reserve(static_cast<size_t>(fan.points) * fan.dirs);
    const int N = fan.points;
    for (int k = 0; k < N; ++k) {
        Vec q = p;
        if (fan.global) {
            q += fibonacci_direction(n, k, N);
        } else if (n == 2) {
            double u = N == 1 ? 0.0 : 2.0 * k / (N - 1) - 1.0;
            q += fan.cap * u * fp.tangents[0];
        } else {
            double r = N == 1 ? 0.0 : fan.cap * std::sqrt(static_cast<double>(k) / (N - 1));
            double th = 2 * M_PI * std::fmod(k * kGolden, 1.0);
            q += r * (std::cos(th) * fp.tangents[0] + std::sin(th) * fp.tangents[1]);
        }
        Vec z = project_to_boundary(sys, q);
        BoundaryFrame f = boundary_frame(sys, z);
        double lmax = std::tan(fan.width);
        if (fan.o_local) lmax = std::min(lmax, fan.C * std::sqrt(std::max(0.0, loc.value(z))));
        // Tilt fraction in (0, 1) for direction j.
        auto tilt = [&](double frac) {
            if (!fan.global) return lmax * frac;
            double depth = (1.0 - std::cos(fan.width)) * frac;
            return std::tan(std::acos(1.0 - depth));
        };
        for (int j = 0; j < fan.dirs; ++j) {
            Vec omega;
            double lam;
            if (n == 2) {
                omega = (j % 2 == 0 ? 1.0 : -1.0) * f.tangents[0];
                int half = (fan.dirs + 1) / 2;
                lam = tilt((j / 2 + 0.5) / half);
            } else {
                // Global fans rotate the azimuths from point to point.
                double turn = fan.global ? k * kGolden * kGolden : 0.0;
                double psi = 2 * M_PI * std::fmod(j * kGolden + turn, 1.0);
                omega = std::cos(psi) * f.tangents[0] + std::sin(psi) * f.tangents[1];
                lam = tilt((j + 0.5) / fan.dirs);
            }
            out.push_back({z, g_normalize(sys, z, lam * f.nu + omega)});
        }
    }
    return out;
}

LensDataset sample_fan(const MagneticSystem& sys, const FanParams& fan, const FlowOptions& o) {
    std::vector<PhaseState> entries = fan_entries(sys, fan);
    LensDataset data;
    data.dim = sys.dim();
    data.fan = fan;
    data.system_hash = system_hash(sys);
    data.records.resize(entries.size());
    parallel_for(static_cast<long>(entries.size()), [&](long i) {
        LensRecord rec;
        try {
            rec = scatter(sys, entries[i], o);
        } catch (const Trapped&) {
            rec.entry = entries[i];
            rec.exit = entries[i];
            rec.ell = std::numeric_limits<double>::quiet_NaN();
            rec.trapped = true;
        }
        rec.id = i;
        data.records[i] = std::move(rec);
    });
    return data;
}

bool is_o_local(const MagneticSystem& sys, const Localizer& loc, const LensRecord& rec, double tol,
                const FlowOptions& o) {
    if (rec.trapped) return false;
    if (rec.ell <= 0) return loc.value(rec.entry.z) >= -tol;
    Trajectory tr = flow::integrate(sys, rec.entry, rec.ell, o);
    const int samples = 64;
    for (int k = 0; k <= samples; ++k) {
        Vec z = tr.state(rec.ell * k / samples).z;
        if (loc.value(z) < -tol || sys.rho(z) < -tol) return false;
    }
    return true;
}

Potential potential_from_form(const TwoFormField& omega, const Chart& chart, const Vec& base, double closed_tol) {
    if (!omega.is_zero()) {
        double res = fields::closedness_residual(omega, chart);
        if (res > closed_tol) {
            std::ostringstream msg;
            msg << "closedness residual " << res << " exceeds " << closed_tol;
            throw NotClosed(msg.str());
        }
    }
    return Potential(omega, base);
}

double line_integral(const MagneticSystem& sys, const Potential& alpha, const PhaseState& s0, double T,
                     const FlowOptions& o) {
    if (T <= 0) return 0.0;
    Trajectory tr = flow::integrate(sys, s0, T, o);
    std::vector<double> knots = tr.knots();
    double sum = 0.0;
    const QuadratureRule& r = gauss_legendre(8);
    for (size_t s = 0; s + 1 < knots.size(); ++s) {
        double a = knots[s], b = knots[s + 1];
        for (size_t k = 0; k < r.nodes.size(); ++k) {
            PhaseState st = tr.state(a + (b - a) * r.nodes[k]);
            sum += (b - a) * r.weights[k] * alpha.value(st.z).dot(st.v);
        }
    }
    return sum;
}

namespace {

struct Shot {
    bool ok = false;
    double T = 0.0;
    Vec v;
    double miss = 0.0;
};

// Gauss-Newton on the unnormalized entry direction w, v = w / |w|_g.
Shot shoot(const MagneticSystem& sys, const Vec& x, const Vec& y, Vec w, const ShootingOptions& so,
           const FlowOptions& o) {
    const int n = sys.dim();
    Shot best;
    ScalarJet rx = sys.boundary()->eval(x, 1);
    auto evaluate = [&](const Vec& ww, Vec& F, Mat* DF, double& T) -> bool {
        // Keep the direction strictly inward so the exit is not the start point.
        Vec v = g_normalize(sys, x, ww);
        if (rx.grad.dot(v) <= 1e-12) return false;
        ExitEvent ev;
        try {
            ev = flow::exit_event(sys, {x, v}, o, DF != nullptr);
        } catch (const Error&) {
            return false;
        }
        if (ev.tau <= 0) return false;
        F = ev.exit.z - y;
        T = ev.tau;
        if (DF) {
            ScalarJet r = sys.boundary()->eval(ev.exit.z, 1);
            Mat dZdv = ev.variation.block(0, n, n, n);
            double rate = r.grad.dot(ev.exit.v);
            Mat dexit = dZdv - ev.exit.v * (r.grad.transpose() * dZdv) / rate;
            // d v / d w for v = w / |w|_g
            Mat g = sys.metric(x);
            double s = std::sqrt(ww.dot(g * ww));
            Mat dvdw = (Mat::Identity(n, n) - ww * (g * ww).transpose() / (s * s)) / s;
            *DF = dexit * dvdw;
        }
        return true;
    };
    Vec F;
    Mat DF;
    double T = 0.0;
    if (!evaluate(w, F, &DF, T)) return best;
    for (int it = 0; it < so.max_iter; ++it) {
        if (F.norm() < so.tol) {
            best.ok = true;
            best.T = T;
            best.v = g_normalize(sys, x, w);
            best.miss = F.norm();
            return best;
        }
        Vec step = DF.completeOrthogonalDecomposition().solve(-F);
        double lam = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 30; ++ls, lam *= 0.5) {
            Vec w2 = w + lam * step;
            Vec F2;
            double T2;
            if (evaluate(w2, F2, nullptr, T2) && F2.norm() < F.norm()) {
                w = w2;
                moved = true;
                break;
            }
        }
        if (!moved) break;
        w = g_normalize(sys, x, w);
        if (!evaluate(w, F, &DF, T)) break;
    }
    if (F.norm() < so.tol) {
        best.ok = true;
        best.T = T;
        best.v = g_normalize(sys, x, w);
        best.miss = F.norm();
    }
    return best;
}

}  // namespace

ActionResult boundary_action(const MagneticSystem& sys, const Potential& alpha, const Vec& x, const Vec& y,
                             const ShootingOptions& so, const FlowOptions& o) {
    if (std::abs(sys.rho(x)) > 1e-8 || std::abs(sys.rho(y)) > 1e-8)
        throw NotOnBoundary("boundary_action endpoints must lie on the boundary");
    ActionResult res;
    if ((x - y).norm() < 1e-14) {
        res.v = boundary_frame(sys, x).tangents[0];
        res.roots = 1;
        return res;
    }
    BoundaryFrame f = boundary_frame(sys, x);
    Vec d = (y - x).normalized();
    std::vector<Vec> starts{d, d + 0.3 * f.nu, d - 0.15 * f.nu};
    for (const Vec& t : f.tangents) {
        starts.push_back(d + 0.3 * t);
        starts.push_back(d - 0.3 * t);
    }
    std::vector<Shot> roots;
    for (const Vec& w0 : starts) {
        Shot s = shoot(sys, x, y, w0, so, o);
        if (!s.ok) continue;
        bool dup = false;
        for (const Shot& r : roots)
            if ((r.v - s.v).norm() < 1e-6) dup = true;
        if (!dup) roots.push_back(s);
    }
    if (roots.empty()) throw NoConnection("shooting found no geodesic between the boundary points");
    std::sort(roots.begin(), roots.end(), [](const Shot& a, const Shot& b) { return a.T < b.T; });
    if (roots.size() > 1 && roots[1].T - roots[0].T < so.tie_tol)
        throw AmbiguousConnection("two connecting geodesics with equal travel time");
    res.T = roots[0].T;
    res.v = roots[0].v;
    res.roots = static_cast<int>(roots.size());
    res.action = res.T - line_integral(sys, alpha, {x, res.v}, res.T, o);
    return res;
}

std::string system_hash(const MagneticSystem& sys) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, size_t len) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    auto mix_d = [&mix](double x) { mix(&x, sizeof x); };
    const Chart& ch = sys.chart();
    const int n = ch.dim();
    mix(&n, sizeof n);
    for (int a = 0; a < n; ++a) {
        mix_d(ch.lo()[a]);
        mix_d(ch.hi()[a]);
        int k = ch.nodes(a);
        mix(&k, sizeof k);
    }
    Mat g, w;
    for (long id = 0; id < ch.node_count(); ++id) {
        Vec z = ch.node_point(id);
        mix_d(sys.conformal()->value(z));
        mix_d(sys.rho(z));
        sys.background()->eval(z, 0, g, nullptr, nullptr);
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) mix_d(g(i, j));
        sys.form().eval(z, 0, w, nullptr);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) mix_d(w(i, j));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

using csv::parse_double;
using csv::put;
using csv::split;

void write_dataset(const LensDataset& data, const std::string& path) {
    const int n = data.dim;
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open " + path);
    out << "id";
    for (const char* tag : {"z", "v", "zx", "vx"})
        for (int i = 0; i < n; ++i) out << ',' << tag << i;
    out << ",ell,trapped,grazing\n";
    for (const LensRecord& r : data.records) {
        std::string line = std::to_string(r.id);
        for (const Vec* x : {&r.entry.z, &r.entry.v, &r.exit.z, &r.exit.v})
            for (int i = 0; i < n; ++i) put(line, (*x)[i]);
        put(line, r.ell);
        line += r.trapped ? ",1" : ",0";
        line += r.grazing ? ",1" : ",0";
        out << line << '\n';
    }
    nlohmann::json side;
    side["dim"] = n;
    side["system_hash"] = data.system_hash;
    side["records"] = data.records.size();
    const FanParams& f = data.fan;
    side["fan"] = {{"p", std::vector<double>(f.p.data(), f.p.data() + f.p.size())},
                   {"cap", f.cap},
                   {"width", f.width},
                   {"points", f.points},
                   {"dirs", f.dirs},
                   {"o_local", f.o_local},
                   {"C", f.C},
                   {"eps", f.eps},
                   {"shift", f.shift},
                   {"global", f.global}};
    std::ofstream js(path + ".json");
    if (!js) throw FormatError("cannot open " + path + ".json");
    js << side.dump(2) << '\n';
}

LensDataset read_dataset(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw FormatError("missing sidecar " + path + ".json");
    nlohmann::json side;
    try {
        js >> side;
    } catch (const std::exception& e) {
        throw FormatError(std::string("bad sidecar: ") + e.what());
    }
    LensDataset data;
    data.dim = side.at("dim").get<int>();
    data.system_hash = side.value("system_hash", "");
    const int n = data.dim;
    if (side.contains("fan")) {
        const auto& f = side["fan"];
        auto p = f.at("p").get<std::vector<double>>();
        data.fan.p = Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<long>(p.size()));
        data.fan.cap = f.at("cap");
        data.fan.width = f.at("width");
        data.fan.points = f.at("points");
        data.fan.dirs = f.at("dirs");
        data.fan.o_local = f.at("o_local");
        data.fan.C = f.at("C");
        data.fan.eps = f.at("eps");
        data.fan.shift = f.at("shift");
        data.fan.global = f.value("global", false);
    }

    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    std::string line;
    std::getline(in, line);
    const size_t cols = 1 + 4 * static_cast<size_t>(n) + 3;
    if (split(line).size() != cols) throw FormatError("unexpected lens header in " + path);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split(line);
        if (f.size() != cols) throw FormatError("bad lens row: " + line);
        LensRecord r;
        r.id = std::stol(f[0]);
        size_t c = 1;
        for (Vec* x : {&r.entry.z, &r.entry.v, &r.exit.z, &r.exit.v}) {
            x->resize(n);
            for (int i = 0; i < n; ++i) (*x)[i] = parse_double(f[c++]);
        }
        r.ell = parse_double(f[c++]);
        r.trapped = f[c++] == "1";
        r.grazing = f[c++] == "1";
        data.records.push_back(std::move(r));
    }
    return data;
}

}  // namespace lens
}  // namespace maglens
