#include "maglens/ode.hpp"

namespace maglens::ode {

void DenseOutput::append(double t0, double t1, const OdeState* r) {
    t0_.push_back(t0);
    t1_.push_back(t1);
    for (int q = 0; q < 8; ++q)
        for (int i = 0; i < dim_; ++i) coef_.push_back(r[q][i]);
}

int DenseOutput::locate(double t) const {
    const int S = segments();
    if (S == 0) throw BadParameters("empty dense output");
    bool forward = t1_.front() >= t0_.front();
    // Segments are contiguous and monotone in time.
    int lo = 0, hi = S - 1;
    while (lo < hi) {
        int mid = (lo + hi) / 2;
        bool beyond = forward ? (t > t1_[mid]) : (t < t1_[mid]);
        if (beyond)
            lo = mid + 1;
        else
            hi = mid;
    }
    return lo;
}

OdeState DenseOutput::eval_segment(int s, double t) const {
    OdeState r[8];
    const double* base = coef_.data() + static_cast<size_t>(s) * 8 * dim_;
    for (int q = 0; q < 8; ++q) r[q] = Eigen::Map<const Eigen::VectorXd>(base + q * dim_, dim_);
    return dense_eval(r, t0_[s], t1_[s], t);
}

OdeState DenseOutput::eval(double t) const { return eval_segment(locate(t), t); }

}  // namespace maglens::ode
