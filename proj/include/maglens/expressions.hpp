#pragma once

#include "maglens/fields.hpp"

namespace maglens::expr {

ScalarJet jet_sum(const ScalarJet& a, const ScalarJet& b, int order);
ScalarJet jet_product(const ScalarJet& a, const ScalarJet& b, int order);

ScalarFieldPtr constant(int n, double value);
// a . z + offset
ScalarFieldPtr affine(const Vec& a, double offset);
// 1 - |z|, the unit ball.
ScalarFieldPtr unit_ball_rho(int n);
// |z|, the radial foliation of the ball.
ScalarFieldPtr radius(int n);
// base + amp (1 - |z|^2)
ScalarFieldPtr radial_quadratic(int n, double base, double amp);
// base + amp exp(-|z - center|^2 / width^2)
ScalarFieldPtr gaussian(double base, double amp, const Vec& center, double width);
// base + amp exp(1 - 1 / (1 - |z - center|^2 / radius^2)), zero outside the ball.
ScalarFieldPtr bump(double base, double amp, const Vec& center, double radius);
// amp exp(-|z - center|^2 / (2 sigma^2)) cut off smoothly at distance `radius`.
ScalarFieldPtr windowed_gaussian(double amp, const Vec& center, double sigma, double radius);
// f(z1, z2) = amp exp(-(z1^2 + z2^2) / width^2), independent of the other coordinates.
ScalarFieldPtr planar_gaussian(int n, double amp, double width);
ScalarFieldPtr sum(ScalarFieldPtr a, ScalarFieldPtr b);
ScalarFieldPtr scaled(ScalarFieldPtr a, double s);

// Unit ball with Euclidean background inside the cube [-half, half]^n.
MagneticSystem ball_system(int n, double half, int nodes, ScalarFieldPtr c, TwoFormField omega);

}  // namespace maglens::expr
