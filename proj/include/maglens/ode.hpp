#pragma once

#include "maglens/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace maglens::ode {

struct Options {
    double rtol = 1e-10;
    double atol = 1e-12;
    double initial_step = 0.0;  // 0 picks one automatically
    double max_step = std::numeric_limits<double>::infinity();
    long max_steps = 200000;
};

// Piecewise degree-7 interpolant produced by accepted steps.
class DenseOutput {
public:
    explicit DenseOutput(int dim = 0) : dim_(dim) {}

    int dim() const { return dim_; }
    bool empty() const { return t0_.empty(); }
    int segments() const { return static_cast<int>(t0_.size()); }
    double t_begin() const { return t0_.front(); }
    double t_end() const { return t1_.back(); }
    double segment_begin(int s) const { return t0_[s]; }
    double segment_end(int s) const { return t1_[s]; }

    // Appends coefficients r[0..7] of one step over [t0, t1].
    void append(double t0, double t1, const OdeState* r);
    OdeState eval(double t) const;
    OdeState eval_segment(int s, double t) const;
    int locate(double t) const;

private:
    int dim_;
    std::vector<double> t0_, t1_;
    std::vector<double> coef_;
};

enum class Status { Reached, Stopped, StepFailure };

struct Result {
    Status status = Status::Reached;
    double t = 0.0;
    OdeState y;
    long steps = 0;
    long evaluations = 0;
};

// View of one accepted step handed to observers.
struct StepView {
    double t0, t1;
    const OdeState* y0;
    const OdeState* y1;
    const OdeState* r;  // dense coefficients, null when dense output is off
    OdeState eval(double t) const;
};

namespace dop853 {
// clang-format off
constexpr double c2 = 0.526001519587677318785587544488e-01, c3 = 0.789002279381515978178381316732e-01,
    c4 = 0.118350341907227396726757197510e+00, c5 = 0.281649658092772603273242802490e+00,
    c6 = 0.333333333333333333333333333333e+00, c7 = 0.25e+00, c8 = 0.307692307692307692307692307692e+00,
    c9 = 0.651282051282051282051282051282e+00, c10 = 0.6e+00, c11 = 0.857142857142857142857142857142e+00,
    c14 = 0.1e+00, c15 = 0.2e+00, c16 = 0.777777777777777777777777777778e+00;
constexpr double a21 = 5.26001519587677318785587544488e-2, a31 = 1.97250569845378994544595329183e-2,
    a32 = 5.91751709536136983633785987549e-2, a41 = 2.95875854768068491816892993775e-2,
    a43 = 8.87627564304205475450678981324e-2, a51 = 2.41365134159266685502369798665e-1,
    a53 = -8.84549479328286085344864962717e-1, a54 = 9.24834003261792003115737966543e-1,
    a61 = 3.7037037037037037037037037037e-2, a64 = 1.70828608729473871279604482173e-1,
    a65 = 1.25467687566822425016691814123e-1, a71 = 3.7109375e-2, a74 = 1.70252211019544039314978060272e-1,
    a75 = 6.02165389804559606850219397283e-2, a76 = -1.7578125e-2, a81 = 3.70920001185047927108779319836e-2,
    a84 = 1.70383925712239993810214054705e-1, a85 = 1.07262030446373284651809199168e-1,
    a86 = -1.53194377486244017527936158236e-2, a87 = 8.27378916381402288758473766002e-3,
    a91 = 6.24110958716075717114429577812e-1, a94 = -3.36089262944694129406857109825e0,
    a95 = -8.68219346841726006818189891453e-1, a96 = 2.75920996994467083049415600797e1,
    a97 = 2.01540675504778934086186788979e1, a98 = -4.34898841810699588477366255144e1,
    a101 = 4.77662536438264365890433908527e-1, a104 = -2.48811461997166764192642586468e0,
    a105 = -5.90290826836842996371446475743e-1, a106 = 2.12300514481811942347288949897e1,
    a107 = 1.52792336328824235832596922938e1, a108 = -3.32882109689848629194453265587e1,
    a109 = -2.03312017085086261358222928593e-2, a111 = -9.3714243008598732571704021658e-1,
    a114 = 5.18637242884406370830023853209e0, a115 = 1.09143734899672957818500254654e0,
    a116 = -8.14978701074692612513997267357e0, a117 = -1.85200656599969598641566180701e1,
    a118 = 2.27394870993505042818970056734e1, a119 = 2.49360555267965238987089396762e0,
    a1110 = -3.0467644718982195003823669022e0, a121 = 2.27331014751653820792359768449e0,
    a124 = -1.05344954667372501984066689879e1, a125 = -2.00087205822486249909675718444e0,
    a126 = -1.79589318631187989172765950534e1, a127 = 2.79488845294199600508499808837e1,
    a128 = -2.85899827713502369474065508674e0, a129 = -8.87285693353062954433549289258e0,
    a1210 = 1.23605671757943030647266201528e1, a1211 = 6.43392746015763530355970484046e-1,
    a141 = 5.61675022830479523392909219681e-2, a147 = 2.53500210216624811088794765333e-1,
    a148 = -2.46239037470802489917441475441e-1, a149 = -1.24191423263816360469010140626e-1,
    a1410 = 1.5329179827876569731206322685e-1, a1411 = 8.20105229563468988491666602057e-3,
    a1412 = 7.56789766054569976138603589584e-3, a1413 = -8.298e-3,
    a151 = 3.18346481635021405060768473261e-2, a156 = 2.83009096723667755288322961402e-2,
    a157 = 5.35419883074385676223797384372e-2, a158 = -5.49237485713909884646569340306e-2,
    a1511 = -1.08347328697249322858509316994e-4, a1512 = 3.82571090835658412954920192323e-4,
    a1513 = -3.40465008687404560802977114492e-4, a1514 = 1.41312443674632500278074618366e-1,
    a161 = -4.28896301583791923408573538692e-1, a166 = -4.69762141536116384314449447206e0,
    a167 = 7.68342119606259904184240953878e0, a168 = 4.06898981839711007970213554331e0,
    a169 = 3.56727187455281109270669543021e-1, a1613 = -1.39902416515901462129418009734e-3,
    a1614 = 2.9475147891527723389556272149e0, a1615 = -9.15095847217987001081870187138e0;
constexpr double b1 = 5.42937341165687622380535766363e-2, b6 = 4.45031289275240888144113950566e0,
    b7 = 1.89151789931450038304281599044e0, b8 = -5.8012039600105847814672114227e0,
    b9 = 3.1116436695781989440891606237e-1, b10 = -1.52160949662516078556178806805e-1,
    b11 = 2.01365400804030348374776537501e-1, b12 = 4.47106157277725905176885569043e-2;
constexpr double bhh1 = 0.244094488188976377952755905512e+00, bhh2 = 0.733846688281611857341361741547e+00,
    bhh3 = 0.220588235294117647058823529412e-01;
constexpr double er1 = 0.1312004499419488073250102996e-01, er6 = -0.1225156446376204440720569753e+01,
    er7 = -0.4957589496572501915214079952e+00, er8 = 0.1664377182454986536961530415e+01,
    er9 = -0.3503288487499736816886487290e+00, er10 = 0.3341791187130174790297318841e+00,
    er11 = 0.8192320648511571246570742613e-01, er12 = -0.2235530786388629525884427845e-01;
constexpr double d41 = -0.84289382761090128651353491142e+01, d46 = 0.56671495351937776962531783590e+00,
    d47 = -0.30689499459498916912797304727e+01, d48 = 0.23846676565120698287728149680e+01,
    d49 = 0.21170345824450282767155149946e+01, d410 = -0.87139158377797299206789907490e+00,
    d411 = 0.22404374302607882758541771650e+01, d412 = 0.63157877876946881815570249290e+00,
    d413 = -0.88990336451333310820698117400e-01, d414 = 0.18148505520854727256656404962e+02,
    d415 = -0.91946323924783554000451984436e+01, d416 = -0.44360363875948939664310572000e+01;
constexpr double d51 = 0.10427508642579134603413151009e+02, d56 = 0.24228349177525818288430175319e+03,
    d57 = 0.16520045171727028198505394887e+03, d58 = -0.37454675472269020279518312152e+03,
    d59 = -0.22113666853125306036270938578e+02, d510 = 0.77334326684722638389603898808e+01,
    d511 = -0.30674084731089398182061213626e+02, d512 = -0.93321305264302278729567221706e+01,
    d513 = 0.15697238121770843886131091075e+02, d514 = -0.31139403219565177677282850411e+02,
    d515 = -0.93529243588444783865713862664e+01, d516 = 0.35816841486394083752465898540e+02;
constexpr double d61 = 0.19985053242002433820987653617e+02, d66 = -0.38703730874935176555105901742e+03,
    d67 = -0.18917813819516756882830838328e+03, d68 = 0.52780815920542364900561016686e+03,
    d69 = -0.11573902539959630126141871134e+02, d610 = 0.68812326946963000169666922661e+01,
    d611 = -0.10006050966910838403183860980e+01, d612 = 0.77771377980534432092869265740e+00,
    d613 = -0.27782057523535084065932004339e+01, d614 = -0.60196695231264120758267380846e+02,
    d615 = 0.84320405506677161018159903784e+02, d616 = 0.11992291136182789328035130030e+02;
constexpr double d71 = -0.25693933462703749003312586129e+02, d76 = -0.15418974869023643374053993627e+03,
    d77 = -0.23152937917604549567536039109e+03, d78 = 0.35763911791061412378285349910e+03,
    d79 = 0.93405324183624310003907691704e+02, d710 = -0.37458323136451633156875139351e+02,
    d711 = 0.10409964950896230045147246184e+03, d712 = 0.29840293426660503123344363579e+02,
    d713 = -0.43533456590011143754432175058e+02, d714 = 0.96324553959188282948394950600e+02,
    d715 = -0.39177261675615439165231486172e+02, d716 = -0.14972683625798562581422125276e+03;
// clang-format on
}  // namespace dop853

// Stage storage for one DOP853 step.
template <class Rhs>
class Stepper {
public:
    Stepper(Rhs& f, int dim) : f_(f), n_(dim) {
        for (auto& k : k_) k.resize(n_);
        tmp_.resize(n_);
    }

    // One step of size h from (t, y) with k1 = f(t, y) already in k(0).
    // Fills y1 and returns the scaled error norm (<= 1 means acceptable).
    double step(double t, const OdeState& y, double h, OdeState& y1, const Options& o) {
        using namespace dop853;
        auto& k1 = k_[0];
        auto stage = [&](double c, auto&& combo, OdeState& out) {
            tmp_ = y + h * combo();
            f_(t + c * h, tmp_, out);
        };
        stage(c2, [&] { return a21 * k1; }, k_[1]);
        stage(c3, [&] { return a31 * k1 + a32 * k_[1]; }, k_[2]);
        stage(c4, [&] { return a41 * k1 + a43 * k_[2]; }, k_[3]);
        stage(c5, [&] { return a51 * k1 + a53 * k_[2] + a54 * k_[3]; }, k_[4]);
        stage(c6, [&] { return a61 * k1 + a64 * k_[3] + a65 * k_[4]; }, k_[5]);
        stage(c7, [&] { return a71 * k1 + a74 * k_[3] + a75 * k_[4] + a76 * k_[5]; }, k_[6]);
        stage(c8, [&] { return a81 * k1 + a84 * k_[3] + a85 * k_[4] + a86 * k_[5] + a87 * k_[6]; }, k_[7]);
        stage(c9, [&] {
            return a91 * k1 + a94 * k_[3] + a95 * k_[4] + a96 * k_[5] + a97 * k_[6] + a98 * k_[7];
        }, k_[8]);
        stage(c10, [&] {
            return a101 * k1 + a104 * k_[3] + a105 * k_[4] + a106 * k_[5] + a107 * k_[6] + a108 * k_[7] +
                   a109 * k_[8];
        }, k_[9]);
        stage(c11, [&] {
            return a111 * k1 + a114 * k_[3] + a115 * k_[4] + a116 * k_[5] + a117 * k_[6] + a118 * k_[7] +
                   a119 * k_[8] + a1110 * k_[9];
        }, k_[10]);
        stage(1.0, [&] {
            return a121 * k1 + a124 * k_[3] + a125 * k_[4] + a126 * k_[5] + a127 * k_[6] + a128 * k_[7] +
                   a129 * k_[8] + a1210 * k_[9] + a1211 * k_[10];
        }, k_[11]);
        incr_ = b1 * k1 + b6 * k_[5] + b7 * k_[6] + b8 * k_[7] + b9 * k_[8] + b10 * k_[9] + b11 * k_[10] +
                b12 * k_[11];
        y1 = y + h * incr_;
        evaluations_ += 11;

        double err = 0.0, err2 = 0.0;
        for (int i = 0; i < n_; ++i) {
            double sk = o.atol + o.rtol * std::max(std::abs(y[i]), std::abs(y1[i]));
            double e3 = incr_[i] - bhh1 * k1[i] - bhh2 * k_[8][i] - bhh3 * k_[11][i];
            double e5 = er1 * k1[i] + er6 * k_[5][i] + er7 * k_[6][i] + er8 * k_[7][i] + er9 * k_[8][i] +
                        er10 * k_[9][i] + er11 * k_[10][i] + er12 * k_[11][i];
            err2 += (e3 / sk) * (e3 / sk);
            err += (e5 / sk) * (e5 / sk);
        }
        double deno = err + 0.01 * err2;
        if (deno <= 0.0) deno = 1.0;
        return std::abs(h) * err * std::sqrt(1.0 / (n_ * deno));
    }

    // After an accepted step: k(12) must hold f(t + h, y1). Fills r[0..7].
    void dense(double t, const OdeState& y, double h, const OdeState& y1, OdeState* r) {
        using namespace dop853;
        auto& k1 = k_[0];
        auto& k13 = k_[12];
        r[0] = y;
        r[1] = y1 - y;
        r[2] = h * k1 - r[1];
        r[3] = r[1] - h * k13 - r[2];
        r[4] = d41 * k1 + d46 * k_[5] + d47 * k_[6] + d48 * k_[7] + d49 * k_[8] + d410 * k_[9] + d411 * k_[10] +
               d412 * k_[11];
        r[5] = d51 * k1 + d56 * k_[5] + d57 * k_[6] + d58 * k_[7] + d59 * k_[8] + d510 * k_[9] + d511 * k_[10] +
               d512 * k_[11];
        r[6] = d61 * k1 + d66 * k_[5] + d67 * k_[6] + d68 * k_[7] + d69 * k_[8] + d610 * k_[9] + d611 * k_[10] +
               d612 * k_[11];
        r[7] = d71 * k1 + d76 * k_[5] + d77 * k_[6] + d78 * k_[7] + d79 * k_[8] + d710 * k_[9] + d711 * k_[10] +
               d712 * k_[11];
        tmp_ = y + h * (a141 * k1 + a147 * k_[6] + a148 * k_[7] + a149 * k_[8] + a1410 * k_[9] + a1411 * k_[10] +
                        a1412 * k_[11] + a1413 * k13);
        f_(t + c14 * h, tmp_, k_[13]);
        tmp_ = y + h * (a151 * k1 + a156 * k_[5] + a157 * k_[6] + a158 * k_[7] + a1511 * k_[10] +
                        a1512 * k_[11] + a1513 * k13 + a1514 * k_[13]);
        f_(t + c15 * h, tmp_, k_[14]);
        tmp_ = y + h * (a161 * k1 + a166 * k_[5] + a167 * k_[6] + a168 * k_[7] + a169 * k_[8] + a1613 * k13 +
                        a1614 * k_[13] + a1615 * k_[14]);
        f_(t + c16 * h, tmp_, k_[15]);
        evaluations_ += 3;
        r[4] = h * (r[4] + d413 * k13 + d414 * k_[13] + d415 * k_[14] + d416 * k_[15]);
        r[5] = h * (r[5] + d513 * k13 + d514 * k_[13] + d515 * k_[14] + d516 * k_[15]);
        r[6] = h * (r[6] + d613 * k13 + d614 * k_[13] + d615 * k_[14] + d616 * k_[15]);
        r[7] = h * (r[7] + d713 * k13 + d714 * k_[13] + d715 * k_[14] + d716 * k_[15]);
    }

    OdeState& k(int i) { return k_[i]; }
    long evaluations() const { return evaluations_; }
    void count(long e) { evaluations_ += e; }

private:
    Rhs& f_;
    int n_;
    OdeState k_[16];
    OdeState tmp_, incr_;
    long evaluations_ = 0;
};

inline OdeState dense_eval(const OdeState* r, double t0, double t1, double t) {
    double s = (t - t0) / (t1 - t0);
    double s1 = 1.0 - s;
    return r[0] + s * (r[1] + s1 * (r[2] + s * (r[3] + s1 * (r[4] + s * (r[5] + s1 * (r[6] + s * r[7]))))));
}

inline OdeState StepView::eval(double t) const { return dense_eval(r, t0, t1, t); }

template <class Rhs>
double initial_step(Rhs& f, double t, const OdeState& y, const OdeState& f0, double dir, const Options& o,
                    long& evals) {
    const int n = static_cast<int>(y.size());
    double dnf = 0, dny = 0;
    for (int i = 0; i < n; ++i) {
        double sk = o.atol + o.rtol * std::abs(y[i]);
        dnf += (f0[i] / sk) * (f0[i] / sk);
        dny += (y[i] / sk) * (y[i] / sk);
    }
    double h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : std::sqrt(dny / dnf) * 0.01;
    h = std::min(h, o.max_step);
    OdeState y1 = y + dir * h * f0;
    OdeState f1(n);
    f(t + dir * h, y1, f1);
    ++evals;
    double der2 = 0;
    for (int i = 0; i < n; ++i) {
        double sk = o.atol + o.rtol * std::abs(y[i]);
        der2 += ((f1[i] - f0[i]) / sk) * ((f1[i] - f0[i]) / sk);
    }
    der2 = std::sqrt(der2) / h;
    double der12 = std::max(std::abs(der2), std::sqrt(dnf));
    double h1 = der12 <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / der12, 1.0 / 8.0);
    return std::min({100.0 * h, h1, o.max_step});
}

// Integrates y' = f(t, y) from t0 to t_end (either direction). The observer is
// called after every accepted step and may return false to stop.
template <class Rhs, class Observer>
Result integrate(Rhs&& f, double t0, const OdeState& y0, double t_end, const Options& o, bool with_dense,
                 Observer&& observer) {
    const int n = static_cast<int>(y0.size());
    Result res;
    res.t = t0;
    res.y = y0;
    if (t_end == t0) return res;
    const double dir = t_end > t0 ? 1.0 : -1.0;
    Stepper<std::remove_reference_t<Rhs>> st(f, n);
    f(t0, y0, st.k(0));
    st.count(1);
    long extra = 0;
    double h = o.initial_step > 0 ? o.initial_step : initial_step(f, t0, y0, st.k(0), dir, o, extra);
    st.count(extra);
    double t = t0;
    OdeState y = y0, y1(n);
    OdeState r[8];
    bool reject = false;
    const double uround = 2.3e-16;
    while (true) {
        if (res.steps >= o.max_steps) {
            res.status = Status::StepFailure;
            break;
        }
        bool last = false;
        if ((t + dir * h - t_end) * dir >= 0.0 || std::abs(t_end - t - dir * h) < 1e-14 * std::abs(t_end)) {
            h = std::abs(t_end - t);
            last = true;
        }
        if (h < 10.0 * uround * std::max(1.0, std::abs(t))) {
            res.status = Status::StepFailure;
            break;
        }
        double err = st.step(t, y, dir * h, y1, o);
        if (!std::isfinite(err)) {
            h *= 0.1;
            reject = true;
            continue;
        }
        double fac11 = std::pow(err, 1.0 / 8.0);
        double fac = std::max(1.0 / 6.0, std::min(1.0 / 0.333, fac11 / 0.9));
        double hnew = h / fac;
        if (err <= 1.0) {
            ++res.steps;
            double t1 = last ? t_end : t + dir * h;
            f(t1, y1, st.k(12));
            st.count(1);
            if (with_dense) st.dense(t, y, dir * h, y1, r);
            StepView view{t, t1, &y, &y1, with_dense ? r : nullptr};
            bool go = observer(view);
            t = t1;
            y = y1;
            st.k(0) = st.k(12);
            if (!go) {
                res.status = Status::Stopped;
                break;
            }
            if (last) break;
            hnew = std::min(hnew, o.max_step);
            if (reject) hnew = std::min(hnew, h);
            reject = false;
            h = hnew;
        } else {
            h = h / std::min(1.0 / 0.333, fac11 / 0.9);
            reject = true;
        }
    }
    res.t = t;
    res.y = y;
    res.evaluations = st.evaluations();
    return res;
}

// Single fixed DOP853 step (no error control), used for event refinement.
template <class Rhs>
OdeState single_step(Rhs&& f, double t, const OdeState& y, double h) {
    const int n = static_cast<int>(y.size());
    if (h == 0.0) return y;
    Stepper<std::remove_reference_t<Rhs>> st(f, n);
    f(t, y, st.k(0));
    OdeState y1(n);
    Options o;
    st.step(t, y, h, y1, o);
    return y1;
}

}  // namespace maglens::ode
