#pragma once

#include "maglens/fields.hpp"

#include <initializer_list>

namespace maglens::testing {

inline Vec vec(std::initializer_list<double> xs) {
    Vec v(static_cast<int>(xs.size()));
    int i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

// Constant b dz1 ^ dz2.
inline TwoFormField planar_field(int n, double b) {
    Mat w = Mat::Zero(n, n);
    w(0, 1) = b;
    w(1, 0) = -b;
    return TwoFormField::constant(w);
}

}  // namespace maglens::testing
