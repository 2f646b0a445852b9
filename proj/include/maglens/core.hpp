#pragma once

#include <Eigen/Dense>

#include <array>
#include <stdexcept>
#include <string>

namespace maglens {

// Fields and flows are capped at three dimensions so that the hot path stays
// on the stack. The symbol code in transform uses fully dynamic sizes.
inline constexpr int kMaxDim = 3;
inline constexpr int kMaxPhase = 2 * kMaxDim;
inline constexpr int kMaxOdeState = kMaxPhase + kMaxPhase * kMaxPhase;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;
using PhaseVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxPhase, 1>;
using PhaseMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxPhase, kMaxPhase>;
using OdeState = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxOdeState, 1>;

// Rank-3 and rank-4 arrays indexed as (i, j, k) / (m, i, j, k), all < n.
struct Tensor3 {
    int n = 0;
    std::array<double, kMaxDim * kMaxDim * kMaxDim> a{};
    explicit Tensor3(int dim = 0) : n(dim) {}
    double& operator()(int i, int j, int k) { return a[(i * kMaxDim + j) * kMaxDim + k]; }
    double operator()(int i, int j, int k) const { return a[(i * kMaxDim + j) * kMaxDim + k]; }
};

struct Tensor4 {
    int n = 0;
    std::array<double, kMaxDim * kMaxDim * kMaxDim * kMaxDim> a{};
    explicit Tensor4(int dim = 0) : n(dim) {}
    double& operator()(int m, int i, int j, int k) {
        return a[((m * kMaxDim + i) * kMaxDim + j) * kMaxDim + k];
    }
    double operator()(int m, int i, int j, int k) const {
        return a[((m * kMaxDim + i) * kMaxDim + j) * kMaxDim + k];
    }
};

// Unit-speed (or general) phase point (z, v).
struct PhaseState {
    Vec z;
    Vec v;
    int dim() const { return static_cast<int>(z.size()); }
};

class Error : public std::runtime_error {
public:
    Error(const std::string& kind, const std::string& msg)
        : std::runtime_error(kind + ": " + msg), kind_(kind) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

#define MAGLENS_ERROR(Name)                                                     \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& msg) : Error(#Name, msg) {}            \
    };

MAGLENS_ERROR(OutOfChart)
MAGLENS_ERROR(NotAntisymmetric)
MAGLENS_ERROR(NotOnBoundary)
MAGLENS_ERROR(NotTangent)
MAGLENS_ERROR(EmptyRegion)
MAGLENS_ERROR(StepFailure)
MAGLENS_ERROR(Trapped)
MAGLENS_ERROR(NotClosed)
MAGLENS_ERROR(NoConnection)
MAGLENS_ERROR(AmbiguousConnection)
MAGLENS_ERROR(NotUnitSpeed)
MAGLENS_ERROR(WeightFailure)
MAGLENS_ERROR(NonUnitReparamFailure)
MAGLENS_ERROR(BadParameters)
MAGLENS_ERROR(EmptyFan)
MAGLENS_ERROR(NoConvergence)
MAGLENS_ERROR(DivergedStep)
MAGLENS_ERROR(ConvexityLost)
MAGLENS_ERROR(ConfigError)
MAGLENS_ERROR(FormatError)

#undef MAGLENS_ERROR

// Index of the pair (i, j), i < j, in the packed list (0,1), (0,2), ..., (1,2), ...
inline int pair_index(int n, int i, int j) {
    return i * n - i * (i + 1) / 2 + (j - i - 1);
}

inline int pair_count(int n) { return n * (n - 1) / 2; }

}  // namespace maglens
