#pragma once

#include "maglens/core.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace maglens {

// Uniform node grid over an axis-aligned box. Node (i0, i1, i2) has linear
// index i0 + N0 * (i1 + N1 * i2), i.e. axis 0 varies fastest.
class Chart {
public:
    Chart() = default;
    Chart(const Vec& lo, const Vec& hi, const std::array<int, kMaxDim>& nodes);
    // Cube [-half, half]^n with `nodes` nodes per axis.
    static Chart cube(int n, double half, int nodes);

    int dim() const { return n_; }
    const Vec& lo() const { return lo_; }
    const Vec& hi() const { return hi_; }
    int nodes(int axis) const { return nodes_[axis]; }
    double spacing(int axis) const { return h_[axis]; }
    double max_spacing() const;
    long node_count() const;

    long linear(const std::array<int, kMaxDim>& idx) const;
    std::array<int, kMaxDim> unravel(long id) const;
    Vec node_point(long id) const;
    Vec node_point(const std::array<int, kMaxDim>& idx) const;

    bool contains(const Vec& z, double slack = 1e-12) const;
    void require(const Vec& z) const;

private:
    int n_ = 0;
    Vec lo_, hi_;
    std::array<int, kMaxDim> nodes_{1, 1, 1};
    std::array<double, kMaxDim> h_{1.0, 1.0, 1.0};
};

struct ScalarJet {
    double value = 0.0;
    Vec grad;
    Mat hess;
};

class ScalarField {
public:
    virtual ~ScalarField() = default;
    virtual int dim() const = 0;
    // order 0: value only; 1: adds the gradient; 2: adds the Hessian.
    virtual ScalarJet eval(const Vec& z, int order = 2) const = 0;
    double value(const Vec& z) const { return eval(z, 0).value; }
};

using ScalarFieldPtr = std::shared_ptr<const ScalarField>;

class ConstantScalarField : public ScalarField {
public:
    ConstantScalarField(int n, double value) : n_(n), value_(value) {}
    int dim() const override { return n_; }
    ScalarJet eval(const Vec& z, int order = 2) const override;

private:
    int n_;
    double value_;
};

// Field given by a closure that fills the jet up to the requested order.
class AnalyticScalarField : public ScalarField {
public:
    using Fn = std::function<ScalarJet(const Vec&, int)>;
    AnalyticScalarField(int n, Fn fn) : n_(n), fn_(std::move(fn)) {}
    int dim() const override { return n_; }
    ScalarJet eval(const Vec& z, int order = 2) const override { return fn_(z, order); }

private:
    int n_;
    Fn fn_;
};

// C2 interpolant of node values: tensor-product cubic B-spline with natural
// end conditions along every axis.
class GridScalarField : public ScalarField {
public:
    GridScalarField(Chart chart, std::vector<double> values);
    // Samples `f` at every node.
    static std::shared_ptr<GridScalarField> sample(const Chart& chart, const ScalarField& f);

    int dim() const override { return chart_.dim(); }
    ScalarJet eval(const Vec& z, int order = 2) const override;

    const Chart& chart() const { return chart_; }
    const std::vector<double>& values() const { return values_; }

private:
    void prefilter();

    Chart chart_;
    std::vector<double> values_;
    std::vector<double> coef_;
    std::array<int, kMaxDim> ext_{1, 1, 1};
};

std::vector<double> sample_nodes(const Chart& chart, const ScalarField& f);

}  // namespace maglens
