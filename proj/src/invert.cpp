#include "maglens/invert.hpp"

#include "maglens/expressions.hpp"
#include "maglens/parallel.hpp"

#include <Eigen/IterativeLinearSolvers>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <limits>
#include <sstream>

namespace maglens {

NodeSet::NodeSet(Chart chart, const std::function<bool(long)>& keep, Basis basis)
    : chart_(std::move(chart)), basis_(basis) {
    const long N = chart_.node_count();
    slot_.assign(N, -1);
    for (long id = 0; id < N; ++id) {
        if (!keep(id)) continue;
        slot_[id] = static_cast<long>(nodes_.size());
        nodes_.push_back(id);
    }
}

NodeSet NodeSet::region(const Chart& chart, const std::function<bool(const Vec&)>& inside, Basis basis) {
    NodeSet s(chart, [&](long id) { return inside(chart.node_point(id)); }, basis);
    s.clip_ = inside;
    return s;
}

void NodeSet::stencil(const Vec& z, std::vector<std::pair<long, double>>& out) const {
    out.clear();
    const int n = chart_.dim();
    if (!chart_.contains(z) || !inside(z)) return;
    // Per axis: first node index and up to four weights.
    const int width = basis_ == Basis::Linear ? 2 : 4;
    int first[kMaxDim] = {0, 0, 0};
    double w[kMaxDim][4] = {};
    for (int k = 0; k < n; ++k) {
        int N = chart_.nodes(k);
        double s = (z[k] - chart_.lo()[k]) / chart_.spacing(k);
        int i = std::clamp(static_cast<int>(std::floor(s)), 0, std::max(0, N - 2));
        double t = std::clamp(s - i, 0.0, 1.0);
        if (basis_ == Basis::Linear) {
            first[k] = i;
            w[k][0] = 1.0 - t;
            w[k][1] = t;
        } else {
            first[k] = i - 1;
            double u = 1.0 - t;
            w[k][0] = u * u * u / 6.0;
            w[k][1] = (3 * t * t * t - 6 * t * t + 4) / 6.0;
            w[k][2] = (-3 * t * t * t + 3 * t * t + 3 * t + 1) / 6.0;
            w[k][3] = t * t * t / 6.0;
        }
    }
    int total = 1;
    for (int k = 0; k < n; ++k) total *= width;
    for (int c = 0; c < total; ++c) {
        std::array<int, kMaxDim> idx{0, 0, 0};
        double wt = 1.0;
        int rest = c;
        bool ok = true;
        for (int k = 0; k < n && ok; ++k) {
            int a = rest % width;
            rest /= width;
            idx[k] = first[k] + a;
            ok = idx[k] >= 0 && idx[k] < chart_.nodes(k);
            wt *= w[k][a];
        }
        if (!ok || wt <= 0.0) continue;
        long s = slot_[chart_.linear(idx)];
        if (s >= 0) out.emplace_back(s, wt);
    }
}

GridPair::GridPair(NodeSet nodes, Eigen::VectorXd u) : nodes_(std::move(nodes)), u_(std::move(u)) {
    if (u_.size() != nodes_.size() * pair_unknowns(nodes_.dim()))
        throw BadParameters("pair vector does not match the node set");
}

GridPair GridPair::sample(const NodeSet& nodes, const PairField& f) {
    const int n = nodes.dim(), m = pair_unknowns(n);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(nodes.size() * m);
    Vec phi;
    Mat omega;
    for (long s = 0; s < nodes.size(); ++s) {
        f.eval(nodes.chart().node_point(nodes.node(s)), phi, omega);
        for (int a = 0; a < n; ++a) u[s * m + a] = phi[a];
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) u[s * m + n + pair_index(n, i, j)] = omega(i, j);
    }
    return GridPair(nodes, std::move(u));
}

bool GridPair::supported(const Vec& z) const {
    thread_local std::vector<std::pair<long, double>> st;
    nodes_.stencil(z, st);
    return !st.empty();
}

Vec GridPair::phi_coef(long slot) const {
    const int n = dim();
    return u_.segment(slot * pair_unknowns(n), n);
}

Mat GridPair::omega_coef(long slot) const {
    const int n = dim();
    const long b = slot * pair_unknowns(n) + n;
    Mat w = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            w(i, j) = u_[b + pair_index(n, i, j)];
            w(j, i) = -w(i, j);
        }
    return w;
}

void GridPair::eval(const Vec& z, Vec& phi, Mat& omega) const {
    const int n = dim();
    phi = Vec::Zero(n);
    omega = Mat::Zero(n, n);
    thread_local std::vector<std::pair<long, double>> st;
    nodes_.stencil(z, st);
    for (auto [s, w] : st) {
        phi += w * phi_coef(s);
        omega += w * omega_coef(s);
    }
}

// ---- reconstruction state ----

ReconstructionState::ReconstructionState(MagneticSystem base) : base_(std::move(base)) {
    const Chart& chart = base_.chart();
    const int n = chart.dim();
    const long N = chart.node_count();
    q_.assign(N, 0.0);
    w_.assign(pair_count(n), std::vector<double>(N, 0.0));
    base_c_.resize(N);
    base_omega_.resize(N);
    for (long id = 0; id < N; ++id) {
        Vec z = chart.node_point(id);
        base_c_[id] = base_.conformal()->value(z);
        base_omega_[id] = base_.form().value(z);
    }
    current_ = base_;
}

void ReconstructionState::set(std::vector<double> q, std::vector<std::vector<double>> w) {
    if (q.size() != q_.size() || w.size() != w_.size()) throw BadParameters("correction size mismatch");
    q_ = std::move(q);
    w_ = std::move(w);
    rebuild();
}

double ReconstructionState::c_at(long id) const { return base_c_[id] * std::exp(q_[id]); }

Mat ReconstructionState::omega_at(long id) const {
    const int n = base_.dim();
    Mat w = base_omega_[id];
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            w(i, j) += w_[pair_index(n, i, j)][id];
            w(j, i) = -w(i, j);
        }
    return w;
}

namespace {

bool all_zero(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

// c_base e^q with q interpolated on the chart.
ScalarFieldPtr scaled_conformal(ScalarFieldPtr base, std::shared_ptr<GridScalarField> q) {
    const int n = base->dim();
    return std::make_shared<AnalyticScalarField>(n, [base, q](const Vec& z, int order) {
        ScalarJet b = base->eval(z, order), e = q->eval(z, order);
        double s = std::exp(e.value);
        ScalarJet j;
        j.value = b.value * s;
        if (order >= 1) j.grad = s * (b.grad + b.value * e.grad);
        if (order >= 2) {
            Mat h = b.hess + b.grad * e.grad.transpose() + e.grad * b.grad.transpose() +
                    b.value * (e.hess + e.grad * e.grad.transpose());
            j.hess = s * h;
        }
        return j;
    });
}

}  // namespace

void ReconstructionState::rebuild() {
    const Chart& chart = base_.chart();
    const int n = chart.dim();
    ScalarFieldPtr c = base_.conformal();
    if (!all_zero(q_)) c = scaled_conformal(c, std::make_shared<GridScalarField>(chart, q_));
    std::vector<ScalarFieldPtr> packed = base_.form().packed();
    packed.resize(pair_count(n));
    bool any = false;
    for (int k = 0; k < pair_count(n); ++k) {
        if (all_zero(w_[k])) continue;
        ScalarFieldPtr g = std::make_shared<GridScalarField>(chart, w_[k]);
        packed[k] = packed[k] ? expr::sum(packed[k], g) : g;
        any = true;
    }
    TwoFormField form = any ? TwoFormField(n, packed) : base_.form();
    current_ = MagneticSystem(chart, base_.background(), c, form, base_.boundary());
}

namespace invert {

namespace {

FlowOptions relaxed(FlowOptions o) {
    o.unit_tol = std::numeric_limits<double>::infinity();
    return o;
}

// Fixed chunk count so sums do not depend on the worker count.
constexpr long kChunks = 16;

void mul(const SparseRowMatrix& A, const Eigen::VectorXd& x, Eigen::VectorXd& y) {
    y.resize(A.rows());
    const long rows = A.rows();
    parallel_for(kChunks, [&](long c) {
        for (long r = rows * c / kChunks; r < rows * (c + 1) / kChunks; ++r) {
            double s = 0;
            for (SparseRowMatrix::InnerIterator it(A, r); it; ++it) s += it.value() * x[it.col()];
            y[r] = s;
        }
    });
}

void mul_t(const SparseRowMatrix& A, const Eigen::VectorXd& x, Eigen::VectorXd& y) {
    const long rows = A.rows();
    std::vector<Eigen::VectorXd> part(kChunks, Eigen::VectorXd::Zero(A.cols()));
    parallel_for(kChunks, [&](long c) {
        Eigen::VectorXd& p = part[c];
        for (long r = rows * c / kChunks; r < rows * (c + 1) / kChunks; ++r) {
            if (x[r] == 0.0) continue;
            for (SparseRowMatrix::InnerIterator it(A, r); it; ++it) p[it.col()] += it.value() * x[r];
        }
    });
    y = part[0];
    for (long c = 1; c < kChunks; ++c) y += part[c];
}

}  // namespace

LinearSystemAssembly assemble(const MagneticSystem& guess, const NodeSet& nodes, const std::vector<RaySpec>& rays,
                              const TransformOptions& opt) {
    if (rays.empty()) throw EmptyFan("no rays to assemble");
    const int n = guess.dim(), m = pair_unknowns(n);
    if (nodes.dim() != n) throw BadParameters("node set dimension mismatch");
    // Per ray: sorted columns, each with its n row values.
    using Entry = std::pair<long, std::array<double, kMaxDim>>;
    std::vector<std::vector<Entry>> per_ray(rays.size());
    std::vector<char> failed(rays.size(), 0);
    FlowOptions fo = relaxed(opt.flow);

    parallel_for(static_cast<long>(rays.size()), [&](long r) {
        const RaySpec& ray = rays[r];
        if (ray.rhs.size() != n) throw BadParameters("ray data must have n components");
        if (!(ray.ell > 0)) return;
        std::vector<Entry> raw;
        std::vector<std::pair<long, double>> st;
        auto add = [&](long col, const Vec& val) {
            Entry e{col, {0.0, 0.0, 0.0}};
            for (int i = 0; i < n; ++i) e.second[i] = val[i];
            raw.push_back(e);
        };
        try {
            Trajectory tr = flow::variation(guess, ray.entry, ray.ell, fo);
            RayWeightSample rw = transform::self_ray_weights(
                guess, tr,
                [&](const Vec& z) {
                    nodes.stencil(z, st);
                    return !st.empty();
                },
                opt);
            for (size_t k = 0; k < rw.t.size(); ++k) {
                const Vec& v = rw.state[k].v;
                Mat Mphi = rw.A[k] * rw.B[k];
                Mat Mom = rw.A[k] * rw.g_inv[k];
                nodes.stencil(rw.state[k].z, st);
                for (auto [s, w] : st) {
                    double c = w * rw.weight[k];
                    for (int a = 0; a < n; ++a) add(s * m + a, c * Mphi.col(a));
                    for (int i = 0; i < n; ++i)
                        for (int j = i + 1; j < n; ++j)
                            add(s * m + n + pair_index(n, i, j), c * (Mom.col(i) * v[j] - Mom.col(j) * v[i]));
                }
            }
        } catch (const OutOfChart&) {
            failed[r] = 1;
            return;
        } catch (const StepFailure&) {
            failed[r] = 1;
            return;
        }
        std::sort(raw.begin(), raw.end(), [](const Entry& x, const Entry& y) { return x.first < y.first; });
        std::vector<Entry>& out = per_ray[r];
        for (const Entry& e : raw) {
            if (!out.empty() && out.back().first == e.first) {
                for (int i = 0; i < n; ++i) out.back().second[i] += e.second[i];
            } else {
                out.push_back(e);
            }
        }
        out.shrink_to_fit();
    });

    LinearSystemAssembly a;
    a.dim = n;
    a.nodes = nodes;
    const long rows = static_cast<long>(rays.size()) * n;
    a.rhs = Eigen::VectorXd::Zero(rows);
    a.row_ray.resize(rows);
    a.row_component.resize(rows);
    Eigen::Matrix<long, Eigen::Dynamic, 1> row_nnz(rows);
    for (size_t r = 0; r < rays.size(); ++r)
        for (int i = 0; i < n; ++i) row_nnz[static_cast<long>(r) * n + i] = static_cast<long>(per_ray[r].size());
    a.design.resize(rows, nodes.size() * m);
    a.design.reserve(row_nnz);
    for (size_t r = 0; r < rays.size(); ++r) {
        for (int i = 0; i < n; ++i) {
            long row = static_cast<long>(r) * n + i;
            a.row_ray[row] = rays[r].id;
            a.row_component[row] = i;
            if (!failed[r]) a.rhs[row] = rays[r].rhs[i];
            for (const auto& [col, val] : per_ray[r]) a.design.insert(row, col) = val[i];
        }
        if (failed[r]) ++a.rays_failed;
        std::vector<Entry>().swap(per_ray[r]);
    }
    a.design.makeCompressed();
    a.lambda_reg = default_lambda(a);
    return a;
}

double default_lambda(const LinearSystemAssembly& a, double scale) {
    if (a.design.cols() == 0) return scale;
    return scale * static_cast<double>(a.design.rows()) / static_cast<double>(a.design.cols());
}

SparseRowMatrix gradient_operator(const NodeSet& nodes, int components) {
    const Chart& chart = nodes.chart();
    const int n = chart.dim();
    std::vector<Eigen::Triplet<double, long>> trip;
    long row = 0;
    for (long s = 0; s < nodes.size(); ++s) {
        std::array<int, kMaxDim> idx = chart.unravel(nodes.node(s));
        for (int k = 0; k < n; ++k) {
            if (idx[k] + 1 >= chart.nodes(k)) continue;
            std::array<int, kMaxDim> nb = idx;
            ++nb[k];
            long t = nodes.slot(chart.linear(nb));
            if (t < 0) continue;
            double inv = 1.0 / chart.spacing(k);
            for (int c = 0; c < components; ++c) {
                trip.emplace_back(row, t * components + c, inv);
                trip.emplace_back(row, s * components + c, -inv);
                ++row;
            }
        }
    }
    SparseRowMatrix L(row, nodes.size() * components);
    L.setFromTriplets(trip.begin(), trip.end());
    return L;
}

PerturbationPair solve_linear(const LinearSystemAssembly& a, double lambda_reg, const SolveOptions& so) {
    if (!(lambda_reg > 0)) throw BadParameters("lambda_reg must be positive");
    const int n = a.dim, m = pair_unknowns(n);
    const long cols = a.design.cols();
    PerturbationPair out;
    Eigen::VectorXd u = Eigen::VectorXd::Zero(cols);
    if (a.rhs.norm() == 0.0 || cols == 0) {
        out.pair = GridPair(a.nodes, u);
        return out;
    }
    SparseRowMatrix L = gradient_operator(a.nodes, m);
    const double sl = std::sqrt(lambda_reg);

    // Column scaling of the stacked operator [D; sqrt(lambda) L].
    Eigen::VectorXd scale = Eigen::VectorXd::Zero(cols);
    for (long r = 0; r < a.design.rows(); ++r)
        for (SparseRowMatrix::InnerIterator it(a.design, r); it; ++it) scale[it.col()] += it.value() * it.value();
    for (long r = 0; r < L.rows(); ++r)
        for (SparseRowMatrix::InnerIterator it(L, r); it; ++it)
            scale[it.col()] += lambda_reg * it.value() * it.value();
    for (long j = 0; j < cols; ++j) scale[j] = scale[j] > 0 ? 1.0 / std::sqrt(scale[j]) : 0.0;

    Eigen::VectorXd tmp_d, tmp_l, t1, t2;
    auto K = [&](const Eigen::VectorXd& y, Eigen::VectorXd& qd, Eigen::VectorXd& ql) {
        Eigen::VectorXd x = scale.cwiseProduct(y);
        mul(a.design, x, qd);
        mul(L, x, ql);
        ql *= sl;
    };
    auto KT = [&](const Eigen::VectorXd& rd, const Eigen::VectorXd& rl, Eigen::VectorXd& s) {
        mul_t(a.design, rd, t1);
        mul_t(L, rl, t2);
        s = scale.cwiseProduct(t1 + sl * t2);
    };

    // CGLS on the scaled stack.
    Eigen::VectorXd y = Eigen::VectorXd::Zero(cols);
    Eigen::VectorXd rd = a.rhs, rl = Eigen::VectorXd::Zero(L.rows());
    Eigen::VectorXd s, p, qd, ql;
    KT(rd, rl, s);
    p = s;
    double gamma = s.squaredNorm(), gamma0 = gamma;
    int it = 0;
    double rel = 1.0;
    for (; it < so.max_iter; ++it) {
        rel = std::sqrt(gamma / gamma0);
        if (rel <= so.tol) break;
        K(p, qd, ql);
        double qq = qd.squaredNorm() + ql.squaredNorm();
        if (qq == 0.0) break;
        double alpha = gamma / qq;
        y += alpha * p;
        rd -= alpha * qd;
        rl -= alpha * ql;
        KT(rd, rl, s);
        double gnew = s.squaredNorm();
        p = s + (gnew / gamma) * p;
        gamma = gnew;
    }
    rel = std::sqrt(gamma / gamma0);
    if (rel > so.tol) {
        std::ostringstream os;
        os << "CGLS stopped after " << it << " iterations with relative normal residual " << rel;
        throw NoConvergence(os.str());
    }
    u = scale.cwiseProduct(y);
    out.iterations = it;
    out.normal_residual = rel;
    Eigen::VectorXd du;
    mul(a.design, u, du);
    out.misfit = (du - a.rhs).norm();
    out.pair = GridPair(a.nodes, std::move(u));
    return out;
}

GradientLift gradient_to_scalar(const Chart& chart, const std::vector<Vec>& phi, const std::vector<LiftRole>& roles) {
    const int n = chart.dim();
    const long N = chart.node_count();
    if (static_cast<long>(phi.size()) != N || static_cast<long>(roles.size()) != N)
        throw BadParameters("gradient_to_scalar needs one entry per chart node");
    std::vector<long> index(N, -1);
    long free = 0;
    for (long id = 0; id < N; ++id)
        if (roles[id] == LiftRole::Free) index[id] = free++;

    std::vector<Eigen::Triplet<double>> trip;
    std::vector<double> d;
    for (long id = 0; id < N; ++id) {
        if (roles[id] == LiftRole::Excluded) continue;
        std::array<int, kMaxDim> idx = chart.unravel(id);
        for (int k = 0; k < n; ++k) {
            if (idx[k] + 1 >= chart.nodes(k)) continue;
            std::array<int, kMaxDim> nb = idx;
            ++nb[k];
            long jd = chart.linear(nb);
            if (roles[jd] == LiftRole::Excluded) continue;
            if (index[id] < 0 && index[jd] < 0) continue;
            long row = static_cast<long>(d.size());
            if (index[jd] >= 0) trip.emplace_back(row, index[jd], 1.0);
            if (index[id] >= 0) trip.emplace_back(row, index[id], -1.0);
            d.push_back(0.5 * chart.spacing(k) * (phi[id][k] + phi[jd][k]));
        }
    }
    GradientLift out;
    out.h.assign(N, 0.0);
    Eigen::Map<const Eigen::VectorXd> dv(d.data(), static_cast<long>(d.size()));
    double dn = dv.norm();
    if (free == 0 || dn == 0.0) return out;

    Eigen::SparseMatrix<double> G(static_cast<long>(d.size()), free);
    G.setFromTriplets(trip.begin(), trip.end());
    Eigen::SparseMatrix<double> GtG = G.transpose() * G;
    Eigen::VectorXd rhs = G.transpose() * dv;
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg;
    cg.setTolerance(1e-12);
    cg.setMaxIterations(static_cast<int>(std::min<long>(20 * free + 100, 1000000)));
    cg.compute(GtG);
    Eigen::VectorXd h = cg.solve(rhs);
    for (long id = 0; id < N; ++id)
        if (index[id] >= 0) out.h[id] = h[index[id]];
    out.curl_residual = (G * h - dv).norm() / dn;
    return out;
}

NodeSet cap_nodes(const MagneticSystem& sys, const Localizer& loc, Basis basis) {
    ScalarFieldPtr rho = sys.boundary(), x = loc.x;
    return NodeSet::region(
        sys.chart(), [rho, x](const Vec& z) { return rho->value(z) >= 0 && x->value(z) > 0; }, basis);
}

std::vector<LiftRole> boundary_roles(const MagneticSystem& sys, const NodeSet& nodes) {
    const Chart& chart = sys.chart();
    std::vector<LiftRole> roles(chart.node_count(), LiftRole::Excluded);
    for (long id = 0; id < chart.node_count(); ++id) {
        if (nodes.slot(id) >= 0)
            roles[id] = LiftRole::Free;
        else if (sys.rho(chart.node_point(id)) < 0)
            roles[id] = LiftRole::Zero;
    }
    return roles;
}

namespace {

PhaseState unit_entry(const MagneticSystem& sys, const PhaseState& s) { return {s.z, s.v / sys.speed(s.z, s.v)}; }

}  // namespace

std::vector<Vec> lens_mismatch(const MagneticSystem& guess, const std::vector<LensRecord>& records,
                               const FlowOptions& o) {
    std::vector<Vec> out(records.size());
    FlowOptions fo = relaxed(o);
    parallel_for(static_cast<long>(records.size()), [&](long i) {
        const LensRecord& r = records[i];
        if (r.trapped || !(r.ell > 0)) return;
        try {
            PhaseState g = flow::flow_to(guess, unit_entry(guess, r.entry), r.ell, fo);
            out[i] = r.exit.v - g.v;
        } catch (const OutOfChart&) {
        } catch (const StepFailure&) {
        }
    });
    return out;
}

double lens_residual(const MagneticSystem& guess, const LensDataset& measured, const FlowOptions& o) {
    std::vector<Vec> mm = lens_mismatch(guess, measured.records, o);
    double sum = 0;
    long used = 0;
    for (const Vec& r : mm)
        if (r.size() > 0) {
            sum += r.squaredNorm();
            ++used;
        }
    return used ? std::sqrt(sum / used) : 0.0;
}

namespace {

// One linearized update of `state` from the records, with flows run in `guess`
// (the state's system, possibly carrying a probe or a modified boundary).
StepReport linearized_update(ReconstructionState& state, const MagneticSystem& guess,
                             const std::vector<LensRecord>& records, const NodeSet& nodes,
                             const std::vector<LiftRole>& roles, const NewtonOptions& opt, bool check_divergence) {
    const int n = guess.dim();
    const Chart& chart = guess.chart();
    StepReport rep;
    std::vector<Vec> mm = lens_mismatch(guess, records, opt.transform.flow);
    std::vector<RaySpec> rays;
    double sum = 0;
    bool any = false;
    for (size_t i = 0; i < records.size(); ++i) {
        if (mm[i].size() == 0) {
            ++rep.rays_dropped;
            continue;
        }
        sum += mm[i].squaredNorm();
        Vec rhs = mm[i];
        if (rhs.norm() < opt.noise_floor) rhs.setZero();
        any = any || rhs.norm() > 0;
        rays.push_back({records[i].id, unit_entry(guess, records[i].entry), records[i].ell, rhs});
    }
    rep.rays_used = static_cast<long>(rays.size());
    rep.residual = rays.empty() ? 0.0 : std::sqrt(sum / rays.size());
    state.residuals.push_back(rep.residual);
    const auto& res = state.residuals;
    if (check_divergence && res.size() >= 3 && res[res.size() - 1] > res[res.size() - 2] &&
        res[res.size() - 2] > res[res.size() - 3]) {
        std::ostringstream os;
        os << "lens residual rose twice in a row (" << res[res.size() - 3] << " -> " << res[res.size() - 2] << " -> "
           << res.back() << ")";
        state.steps.push_back(rep);
        throw DivergedStep(os.str());
    }
    ++state.iteration;
    if (!any) {
        state.steps.push_back(rep);
        return rep;
    }

    LinearSystemAssembly a = assemble(guess, nodes, rays, opt.transform);
    double lambda = opt.lambda_reg > 0 ? opt.lambda_reg : default_lambda(a, opt.lambda_scale);
    PerturbationPair sol = solve_linear(a, lambda, opt.solve);
    rep.cg_iterations = sol.iterations;

    std::vector<Vec> phi(chart.node_count(), Vec::Zero(n));
    std::vector<Mat> omega(chart.node_count(), Mat::Zero(n, n));
    for (long id = 0; id < chart.node_count(); ++id)
        if (roles[id] == LiftRole::Free || nodes.slot(id) >= 0) sol.pair.eval(chart.node_point(id), phi[id], omega[id]);
    GradientLift lift = gradient_to_scalar(chart, phi, roles);
    rep.curl_residual = lift.curl_residual;

    std::vector<double> q = state.log_c();
    std::vector<std::vector<double>> w = state.form_correction();
    for (long id = 0; id < chart.node_count(); ++id) {
        if (roles[id] != LiftRole::Free && nodes.slot(id) < 0) continue;
        double h = lift.h[id];
        const Mat& om = omega[id];
        rep.update_norm = std::max({rep.update_norm, std::abs(h), om.cwiseAbs().maxCoeff()});
        q[id] -= h;
        Mat base = state.base().form().value(chart.node_point(id));
        Mat next = std::exp(-2.0 * h) * state.omega_at(id) - om;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) w[pair_index(n, i, j)][id] = next(i, j) - base(i, j);
    }
    state.set(std::move(q), std::move(w));
    state.steps.push_back(rep);
    return rep;
}

}  // namespace

StepReport newton_step(ReconstructionState& state, const LensDataset& measured, const NodeSet& nodes,
                       const std::vector<LiftRole>& roles, const NewtonOptions& opt) {
    if (measured.records.empty()) throw EmptyFan("no measured records");
    MagneticSystem guess = state.system();
    return linearized_update(state, guess, measured.records, nodes, roles, opt, true);
}

// ---- convexity scan ----

namespace {

ScalarFieldPtr level_function(const ScalarField& f, double level) {
    const int n = f.dim();
    return std::make_shared<AnalyticScalarField>(n, [&f, level](const Vec& z, int order) {
        ScalarJet j = f.eval(z, order);
        j.value = level - j.value;
        if (order >= 1) j.grad = -j.grad;
        if (order >= 2) j.hess = -j.hess;
        return j;
    });
}

// g-orthonormal basis of {v : grad f . v = 0}.
std::vector<Vec> level_tangents(const Mat& g, const Vec& grad) {
    const int n = static_cast<int>(grad.size());
    std::vector<Vec> out;
    for (int i = 0; i < n && static_cast<int>(out.size()) < n - 1; ++i) {
        Vec e = Vec::Zero(n);
        e[i] = 1.0;
        Vec t = e - (grad.dot(e) / grad.squaredNorm()) * grad;
        // Keep tangency exact: Gram-Schmidt in g stays inside the kernel of grad.
        for (const Vec& u : out) t -= (u.dot(g * t)) * u;
        double len = std::sqrt(t.dot(g * t));
        if (len < 1e-8) continue;
        out.push_back(t / len);
    }
    return out;
}

}  // namespace

double level_margin(const MagneticSystem& sys, const ScalarField& f, double level, int points) {
    const Chart& chart = sys.chart();
    const int n = chart.dim();
    const double h = chart.max_spacing();
    std::vector<Vec> cand;
    for (long id = 0; id < chart.node_count(); ++id) {
        Vec z = chart.node_point(id);
        if (std::abs(f.value(z) - level) > h) continue;
        bool ok = false;
        for (int it = 0; it < 20; ++it) {
            ScalarJet j = f.eval(z, 1);
            if (j.grad.squaredNorm() < 1e-20) break;
            z -= ((j.value - level) / j.grad.squaredNorm()) * j.grad;
            if (std::abs(f.value(z) - level) < 1e-13) {
                ok = true;
                break;
            }
        }
        if (ok && chart.contains(z) && sys.rho(z) > 0) cand.push_back(z);
    }
    double best = std::numeric_limits<double>::infinity();
    if (cand.empty()) return best;
    const size_t stride = std::max<size_t>(1, (cand.size() + points - 1) / std::max(1, points));
    ScalarFieldPtr b = level_function(f, level);
    for (size_t k = 0; k < cand.size(); k += stride) {
        const Vec& z = cand[k];
        Mat g = sys.metric(z);
        std::vector<Vec> t = level_tangents(g, f.eval(z, 1).grad);
        std::vector<Vec> dirs;
        if (n == 2) {
            dirs = {t[0], Vec(-t[0])};
        } else {
            for (int a = 0; a < 8; ++a) {
                double th = 2 * M_PI * a / 8;
                dirs.push_back(std::cos(th) * t[0] + std::sin(th) * t[1]);
            }
        }
        for (Vec v : dirs) {
            v /= std::sqrt(v.dot(g * v));
            best = std::min(best, fields::convexity_margin(sys, *b, z, v, 1e-8));
        }
    }
    return best;
}

// ---- layer stripping ----

namespace {

// Smallest foliation value at which the system has been evaluated.
class DepthTracker : public AccessProbe {
public:
    explicit DepthTracker(ScalarFieldPtr f) : f_(std::move(f)) {}
    void touch(const Vec& z) const override {
        double v = f_->value(z);
        double cur = min_.load();
        while (v < cur && !min_.compare_exchange_weak(cur, v)) {
        }
    }
    double min() const { return min_.load(); }

private:
    ScalarFieldPtr f_;
    mutable std::atomic<double> min_{std::numeric_limits<double>::infinity()};
};

// Boundary of M cut at {f = stop}: flows stop at whichever surface comes first.
ScalarFieldPtr cut_boundary(ScalarFieldPtr rho, ScalarFieldPtr f, double stop) {
    return std::make_shared<AnalyticScalarField>(rho->dim(), [rho, f, stop](const Vec& z, int order) {
        ScalarJet a = rho->eval(z, order), b = f->eval(z, order);
        b.value -= stop;
        return a.value <= b.value ? a : b;
    });
}

// Copies values from the nodes marked known into the others, breadth first.
void extend_inward(const Chart& chart, const std::vector<char>& known, std::vector<double>& q,
                   std::vector<std::vector<double>>& w) {
    const int n = chart.dim();
    const long N = chart.node_count();
    std::vector<char> done = known;
    std::deque<long> queue;
    for (long id = 0; id < N; ++id)
        if (done[id]) queue.push_back(id);
    while (!queue.empty()) {
        long id = queue.front();
        queue.pop_front();
        std::array<int, kMaxDim> idx = chart.unravel(id);
        for (int k = 0; k < n; ++k)
            for (int step : {-1, 1}) {
                std::array<int, kMaxDim> nb = idx;
                nb[k] += step;
                if (nb[k] < 0 || nb[k] >= chart.nodes(k)) continue;
                long jd = chart.linear(nb);
                if (done[jd]) continue;
                done[jd] = 1;
                q[jd] = q[id];
                for (auto& comp : w) comp[jd] = comp[id];
                queue.push_back(jd);
            }
    }
}

}  // namespace

void layer_strip(ReconstructionState& state, const LensDataset& measured, ScalarFieldPtr f,
                 const LayerOptions& opt) {
    if (opt.shells < 1 || !(opt.t_top > opt.t_bottom)) throw BadParameters("need t_top > t_bottom and shells >= 1");
    if (measured.records.empty()) throw EmptyFan("no measured records");
    const MagneticSystem& base = state.base();
    const Chart& chart = base.chart();
    const int n = chart.dim();
    const long N = chart.node_count();
    const double h = chart.max_spacing();
    const double dt = (opt.t_top - opt.t_bottom) / opt.shells;
    const double reach = h * std::sqrt(static_cast<double>(n));

    std::vector<double> fnode(N), rnode(N);
    for (long id = 0; id < N; ++id) {
        Vec z = chart.node_point(id);
        fnode[id] = f->value(z);
        rnode[id] = base.rho(z);
    }
    const auto& records = measured.records;
    std::vector<char> retired(records.size(), 0);
    for (size_t i = 0; i < records.size(); ++i) retired[i] = records[i].trapped || !(records[i].ell > 0);

    for (int k = 0; k < opt.shells; ++k) {
        ShellRecord rec;
        rec.index = k;
        rec.t_hi = opt.t_top - k * dt;
        rec.t_lo = rec.t_hi - dt;
        const double t = rec.t_hi, lo = rec.t_lo;

        rec.min_margin = std::numeric_limits<double>::infinity();
        double failed_level = t;
        for (double level : {t, t - 0.5 * dt, lo}) {
            double m = level_margin(state.system(), *f, level, opt.convexity_points);
            if (m < rec.min_margin) {
                rec.min_margin = m;
                failed_level = level;
            }
        }
        if (!(rec.min_margin > 0)) {
            state.shells.push_back(rec);
            std::ostringstream os;
            os << "shell " << k << " (t = " << t << "): margin " << rec.min_margin << " at level " << failed_level;
            throw ConvexityLost(os.str());
        }

        NodeSet nodes(
            chart, [&](long id) { return rnode[id] >= 0 && fnode[id] >= lo - h && fnode[id] <= t; }, opt.basis);
        std::vector<LiftRole> roles(N, LiftRole::Excluded);
        for (long id = 0; id < N; ++id) {
            if (nodes.slot(id) >= 0)
                roles[id] = LiftRole::Free;
            else if (fnode[id] > t || rnode[id] < 0)
                roles[id] = LiftRole::Zero;
        }
        rec.nodes = nodes.size();

        auto tracker = std::make_shared<DepthTracker>(f);
        const double stop = lo - 0.25 * h;
        FlowOptions fo = relaxed(opt.newton.transform.flow);
        fo.exit_max_step = std::min(fo.exit_max_step, 0.5 * h);

        for (int it = 0; it < opt.newton_iters; ++it) {
            const MagneticSystem& cur = state.system();
            MagneticSystem view(chart, cur.background(), cur.conformal(), cur.form(),
                                cut_boundary(cur.boundary(), f, stop));
            view.set_probe(tracker);

            // Keep rays whose guess path reaches the shell without passing below it.
            std::vector<char> take(records.size(), 0);
            parallel_for(static_cast<long>(records.size()), [&](long i) {
                if (retired[i]) return;
                const LensRecord& r = records[i];
                PhaseState s = unit_entry(view, r.entry);
                try {
                    ExitEvent ev = flow::exit_event(view, s, fo);
                    if (f->value(ev.exit.z) - stop < base.rho(ev.exit.z)) return;  // stopped at the cut
                    Trajectory tr = flow::integrate(view, s, r.ell, fo);
                    double deepest = std::numeric_limits<double>::infinity();
                    for (int j = 0; j <= 64; ++j) deepest = std::min(deepest, f->value(tr.state(r.ell * j / 64).z));
                    if (deepest > t + 2 * reach) {
                        // The path stays where nothing changes any more.
                        retired[i] = 1;
                        return;
                    }
                    if (deepest <= t + reach) take[i] = 1;
                } catch (const Error&) {
                }
            });
            std::vector<LensRecord> chosen;
            for (size_t i = 0; i < records.size(); ++i)
                if (take[i]) chosen.push_back(records[i]);
            rec.rays = static_cast<long>(chosen.size());
            if (chosen.empty()) break;
            StepReport rep = linearized_update(state, view, chosen, nodes, roles, opt.newton, false);
            rec.residuals.push_back(rep.residual);
            rec.updates.push_back(rep.update_norm);
            if (rep.update_norm <= opt.update_tol) break;
        }

        std::vector<double> q = state.log_c();
        std::vector<std::vector<double>> w = state.form_correction();
        std::vector<char> known(N);
        for (long id = 0; id < N; ++id) known[id] = fnode[id] >= lo - h || rnode[id] < 0;
        extend_inward(chart, known, q, w);
        state.set(std::move(q), std::move(w));

        rec.deepest_read = tracker->min();
        rec.ahead_read = rec.deepest_read < lo - h;
        rec.completed = true;
        state.shells.push_back(rec);
    }
}

}  // namespace invert
}  // namespace maglens
