#include "maglens/grid.hpp"

#include <cmath>
#include <sstream>

namespace maglens {

Chart::Chart(const Vec& lo, const Vec& hi, const std::array<int, kMaxDim>& nodes)
    : n_(static_cast<int>(lo.size())), lo_(lo), hi_(hi) {
    if (n_ < 1 || n_ > kMaxDim || hi.size() != lo.size())
        throw BadParameters("chart dimension must be 1.." + std::to_string(kMaxDim));
    for (int a = 0; a < kMaxDim; ++a) {
        if (a >= n_) {
            nodes_[a] = 1;
            h_[a] = 1.0;
            continue;
        }
        if (nodes[a] < 4) throw BadParameters("chart needs at least 4 nodes per axis");
        if (!(hi[a] > lo[a])) throw BadParameters("chart box is empty");
        nodes_[a] = nodes[a];
        h_[a] = (hi[a] - lo[a]) / (nodes[a] - 1);
    }
}

Chart Chart::cube(int n, double half, int nodes) {
    Vec lo = Vec::Constant(n, -half);
    Vec hi = Vec::Constant(n, half);
    return Chart(lo, hi, {nodes, nodes, nodes});
}

double Chart::max_spacing() const {
    double h = 0.0;
    for (int a = 0; a < n_; ++a) h = std::max(h, h_[a]);
    return h;
}

long Chart::node_count() const {
    return static_cast<long>(nodes_[0]) * nodes_[1] * nodes_[2];
}

long Chart::linear(const std::array<int, kMaxDim>& idx) const {
    return idx[0] + static_cast<long>(nodes_[0]) * (idx[1] + static_cast<long>(nodes_[1]) * idx[2]);
}

std::array<int, kMaxDim> Chart::unravel(long id) const {
    std::array<int, kMaxDim> idx{0, 0, 0};
    idx[0] = static_cast<int>(id % nodes_[0]);
    id /= nodes_[0];
    idx[1] = static_cast<int>(id % nodes_[1]);
    idx[2] = static_cast<int>(id / nodes_[1]);
    return idx;
}

Vec Chart::node_point(const std::array<int, kMaxDim>& idx) const {
    Vec z(n_);
    for (int a = 0; a < n_; ++a) z[a] = lo_[a] + idx[a] * h_[a];
    return z;
}

Vec Chart::node_point(long id) const { return node_point(unravel(id)); }

bool Chart::contains(const Vec& z, double slack) const {
    if (z.size() != n_) return false;
    for (int a = 0; a < n_; ++a) {
        double tol = slack * (hi_[a] - lo_[a]);
        if (!(z[a] >= lo_[a] - tol && z[a] <= hi_[a] + tol)) return false;
    }
    return true;
}

void Chart::require(const Vec& z) const {
    if (!contains(z)) {
        std::ostringstream os;
        os << "point (" << z.transpose() << ") outside chart";
        throw OutOfChart(os.str());
    }
}

ScalarJet ConstantScalarField::eval(const Vec&, int order) const {
    ScalarJet j;
    j.value = value_;
    if (order >= 1) j.grad = Vec::Zero(n_);
    if (order >= 2) j.hess = Mat::Zero(n_, n_);
    return j;
}

std::vector<double> sample_nodes(const Chart& chart, const ScalarField& f) {
    std::vector<double> out(static_cast<size_t>(chart.node_count()));
    for (long id = 0; id < chart.node_count(); ++id) out[id] = f.eval(chart.node_point(id), 0).value;
    return out;
}

GridScalarField::GridScalarField(Chart chart, std::vector<double> values)
    : chart_(std::move(chart)), values_(std::move(values)) {
    if (static_cast<long>(values_.size()) != chart_.node_count())
        throw BadParameters("grid value count does not match chart");
    prefilter();
}

std::shared_ptr<GridScalarField> GridScalarField::sample(const Chart& chart, const ScalarField& f) {
    return std::make_shared<GridScalarField>(chart, sample_nodes(chart, f));
}

namespace {

// Solves c[i-1] + 4 c[i] + c[i+1] = 6 f[i] with natural end conditions,
// writing coefficients c[-1..N] to out[0..N+1].
void spline_line(const double* f, long fstride, int N, double* out, long ostride, std::vector<double>& work) {
    out[ostride * 1] = f[0];
    out[ostride * N] = f[fstride * (N - 1)];
    int m = N - 2;
    if (m > 0) {
        work.resize(2 * static_cast<size_t>(m));
        double* cp = work.data();
        double* d = work.data() + m;
        for (int i = 0; i < m; ++i) {
            double rhs = 6.0 * f[fstride * (i + 1)];
            if (i == 0) rhs -= f[0];
            if (i == m - 1) rhs -= f[fstride * (N - 1)];
            double denom = 4.0 - (i > 0 ? cp[i - 1] : 0.0);
            cp[i] = 1.0 / denom;
            d[i] = (rhs - (i > 0 ? d[i - 1] : 0.0)) / denom;
        }
        for (int i = m - 2; i >= 0; --i) d[i] -= cp[i] * d[i + 1];
        for (int i = 0; i < m; ++i) out[ostride * (i + 2)] = d[i];
    }
    out[0] = 2.0 * out[ostride * 1] - out[ostride * 2];
    out[ostride * (N + 1)] = 2.0 * out[ostride * N] - out[ostride * (N - 1)];
}

inline void bspline_weights(double t, double* w, double* dw, double* d2w) {
    double s = 1.0 - t;
    w[0] = s * s * s / 6.0;
    w[1] = (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0;
    w[2] = (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0;
    w[3] = t * t * t / 6.0;
    dw[0] = -0.5 * s * s;
    dw[1] = 1.5 * t * t - 2.0 * t;
    dw[2] = -1.5 * t * t + t + 0.5;
    dw[3] = 0.5 * t * t;
    d2w[0] = s;
    d2w[1] = 3.0 * t - 2.0;
    d2w[2] = -3.0 * t + 1.0;
    d2w[3] = t;
}

}  // namespace

void GridScalarField::prefilter() {
    const int n = chart_.dim();
    std::array<int, kMaxDim> dims{chart_.nodes(0), chart_.nodes(1), chart_.nodes(2)};
    std::vector<double> cur = values_;
    std::vector<double> work;
    for (int a = 0; a < n; ++a) {
        std::array<int, kMaxDim> nd = dims;
        nd[a] += 2;
        std::vector<double> next(static_cast<size_t>(nd[0]) * nd[1] * nd[2]);
        long in_stride = 1, out_stride = 1;
        for (int b = 0; b < a; ++b) {
            in_stride *= dims[b];
            out_stride *= nd[b];
        }
        std::array<int, kMaxDim> lines = dims;
        lines[a] = 1;
        for (int k = 0; k < lines[2]; ++k)
            for (int j = 0; j < lines[1]; ++j)
                for (int i = 0; i < lines[0]; ++i) {
                    long in_off = i + static_cast<long>(dims[0]) * (j + static_cast<long>(dims[1]) * k);
                    long out_off = i + static_cast<long>(nd[0]) * (j + static_cast<long>(nd[1]) * k);
                    spline_line(cur.data() + in_off, in_stride, dims[a], next.data() + out_off, out_stride, work);
                }
        cur.swap(next);
        dims = nd;
    }
    coef_.swap(cur);
    ext_ = dims;
}

ScalarJet GridScalarField::eval(const Vec& z, int order) const {
    const int n = chart_.dim();
    if (z.size() != n) throw BadParameters("point dimension mismatch");
    chart_.require(z);
    double w[kMaxDim][4], dw[kMaxDim][4], d2w[kMaxDim][4];
    int base[kMaxDim] = {0, 0, 0};
    int cnt[kMaxDim] = {1, 1, 1};
    for (int a = 0; a < kMaxDim; ++a) {
        if (a >= n) {
            w[a][0] = 1.0;
            dw[a][0] = 0.0;
            d2w[a][0] = 0.0;
            continue;
        }
        double h = chart_.spacing(a);
        double u = (z[a] - chart_.lo()[a]) / h;
        int N = chart_.nodes(a);
        int i = static_cast<int>(std::floor(u));
        i = std::min(std::max(i, 0), N - 2);
        double t = u - i;
        bspline_weights(t, w[a], dw[a], d2w[a]);
        for (int q = 0; q < 4; ++q) {
            dw[a][q] /= h;
            d2w[a][q] /= h * h;
        }
        base[a] = i;
        cnt[a] = 4;
    }
    const long M0 = ext_[0], M1 = ext_[1];
    double val = 0, g0 = 0, g1 = 0, g2 = 0;
    double h00 = 0, h01 = 0, h02 = 0, h11 = 0, h12 = 0, h22 = 0;
    for (int c = 0; c < cnt[2]; ++c) {
        for (int b = 0; b < cnt[1]; ++b) {
            const double* row = coef_.data() + base[0] + M0 * ((base[1] + b) + M1 * (base[2] + c));
            double s0 = 0, s1 = 0, s2 = 0;
            for (int a = 0; a < cnt[0]; ++a) {
                s0 += w[0][a] * row[a];
                s1 += dw[0][a] * row[a];
                s2 += d2w[0][a] * row[a];
            }
            double wbc = w[1][b] * w[2][c];
            val += s0 * wbc;
            if (order >= 1) {
                g0 += s1 * wbc;
                g1 += s0 * dw[1][b] * w[2][c];
                g2 += s0 * w[1][b] * dw[2][c];
            }
            if (order >= 2) {
                h00 += s2 * wbc;
                h01 += s1 * dw[1][b] * w[2][c];
                h02 += s1 * w[1][b] * dw[2][c];
                h11 += s0 * d2w[1][b] * w[2][c];
                h12 += s0 * dw[1][b] * dw[2][c];
                h22 += s0 * w[1][b] * d2w[2][c];
            }
        }
    }
    ScalarJet j;
    j.value = val;
    if (order >= 1) {
        j.grad.resize(n);
        double g[3] = {g0, g1, g2};
        for (int a = 0; a < n; ++a) j.grad[a] = g[a];
    }
    if (order >= 2) {
        double H[3][3] = {{h00, h01, h02}, {h01, h11, h12}, {h02, h12, h22}};
        j.hess.resize(n, n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) j.hess(a, b) = H[a][b];
    }
    return j;
}

}  // namespace maglens
