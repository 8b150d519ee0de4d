#pragma once

#include <cstddef>

#include "regconv/planar.hpp"
#include "regconv/tensor.hpp"

namespace regconv {

/// Cyclic rotation group C_N. Element k is the rotation by 2*pi*k/N.
class CyclicGroup {
 public:
  explicit CyclicGroup(int order);

  int order() const { return order_; }
  int compose(int a, int b) const;
  int inverse(int a) const;
  double angle_of(int a) const;
  /// Quarter turns for element a if its angle is a multiple of pi/2.
  std::optional<int> quarter_turns_of(int a) const;

  friend bool operator==(const CyclicGroup&, const CyclicGroup&) = default;

 private:
  void check(int a) const;
  int order_;
};

/// Regular feature field: values shaped (K, N, H, W), orientation channel
/// i associated with the rotation by 2*pi*i/N (0-based).
class RegularField {
 public:
  RegularField(CyclicGroup group, Tensor values);

  const CyclicGroup& group() const { return group_; }
  const Tensor& values() const { return values_; }
  std::size_t base_channels() const { return values_.dim(0); }
  std::size_t orientations() const { return values_.dim(1); }
  std::size_t height() const { return values_.dim(2); }
  std::size_t width() const { return values_.dim(3); }

  double at(std::size_t k, std::size_t i, std::size_t y, std::size_t x) const {
    return values_[((k * orientations() + i) * height() + y) * width() + x];
  }

 private:
  CyclicGroup group_;
  Tensor values_;
};

/// Rotated region of interest. Centre (x, y) and size in pixels; theta in
/// [0, 2*pi), turning the box counter-clockwise as displayed.
struct RRoI {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;
  double theta = 0.0;

  /// Point at box-local offset (u along width, v along height).
  Vec2 local_to_image(double u, double v) const;
};

double normalize_angle(double theta);

RRoI make_rroi(double x, double y, double w, double h, double theta);

/// Group action on a regular field: spatial rotation by 2*pi*k/N about the
/// centre and cyclic shift out[:, i] = rot(f[:, (i - k) mod N]).
RegularField act_on_field(const RegularField& f, int k);

/// Rotates the box centre about image_center and adds angle to theta.
RRoI act_on_rroi(const RRoI& b, double angle, Vec2 image_center);

}  // namespace regconv
