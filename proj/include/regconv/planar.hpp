#pragma once

#include <cstddef>
#include <optional>

#include "regconv/tensor.hpp"

namespace regconv {

// Coordinate convention, used everywhere in the library:
//   x is the column, y is the row, origin at the top-left pixel centre.
//   Positive angles turn content counter-clockwise as the image is
//   displayed (y pointing down). In (x, y) components that is
//
//     turn(a) * (dx, dy) = ( cos a * dx + sin a * dy,
//                           -sin a * dx + cos a * dy )
//
//   which is the textbook rotation matrix with the sign of sin flipped,
//   because the y axis points down.

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

Vec2 turn(double angle, Vec2 v);

/// Geometric centre ((W-1)/2, (H-1)/2) of a tensor's spatial extent.
Vec2 geometric_center(const Tensor& t);

/// If angle is within 1e-12 (relative to pi/2) of a multiple of pi/2,
/// returns that multiple reduced mod 4.
std::optional<int> quarter_turns(double angle);

/// Bilinear interpolation on plane c with zero padding outside the grid.
double bilinear_sample(const Tensor& t, std::size_t c, double x, double y);

/// Inverse-mapping warp: out(p) = t(center + turn(-angle) * (p - center)).
/// Multiples of pi/2 about the geometric centre of a square tensor take an
/// exact permutation path.
Tensor rotate_planar(const Tensor& t, double angle, std::optional<Vec2> center = std::nullopt);

/// Adjoint (transpose) of rotate_planar with the same arguments: scatters
/// each value to the four bilinear neighbours it was sampled from.
Tensor rotate_planar_adjoint(const Tensor& g, double angle,
                             std::optional<Vec2> center = std::nullopt);

/// Exact rotation by q quarter turns of a square tensor about its centre.
Tensor rotate_quarter(const Tensor& t, int q);

/// Cross-correlation with zero padding. filters is (C_out, C_in, kH, kW),
/// t is any tensor with C_in planes. Output is (C_out, H_out, W_out).
Tensor conv2d_plain(const Tensor& t, const Tensor& filters, std::size_t stride = 1,
                    std::size_t padding = 0);

struct Conv2dGrads {
  Tensor input;
  Tensor filters;
};

/// Vector-Jacobian product of conv2d_plain for upstream gradient g.
Conv2dGrads conv2d_plain_backward(const Tensor& t, const Tensor& filters, const Tensor& g,
                                  std::size_t stride = 1, std::size_t padding = 0);

Tensor maxpool2d(const Tensor& t, std::size_t window = 2, std::size_t stride = 2);
Tensor maxpool2d_backward(const Tensor& t, const Tensor& g, std::size_t window = 2,
                          std::size_t stride = 2);

Tensor upsample_nearest(const Tensor& t, std::size_t factor = 2);
Tensor upsample_nearest_backward(const Tensor& g, std::size_t factor = 2);

}  // namespace regconv
