#include "regconv/group.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace regconv {

CyclicGroup::CyclicGroup(int order) : order_(order) {
  if (order < 1) throw Error("group order must be a positive integer");
}

void CyclicGroup::check(int a) const {
  if (a < 0 || a >= order_) {
    throw Error("group element " + std::to_string(a) + " out of range for C_" + std::to_string(order_));
  }
}

int CyclicGroup::compose(int a, int b) const {
  check(a);
  check(b);
  return (a + b) % order_;
}

int CyclicGroup::inverse(int a) const {
  check(a);
  return (order_ - a) % order_;
}

double CyclicGroup::angle_of(int a) const {
  check(a);
  return 2.0 * std::numbers::pi * a / order_;
}

std::optional<int> CyclicGroup::quarter_turns_of(int a) const {
  check(a);
  if ((4 * a) % order_ != 0) return std::nullopt;
  return (4 * a / order_) % 4;
}

RegularField::RegularField(CyclicGroup group, Tensor values)
    : group_(group), values_(std::move(values)) {
  if (values_.rank() != 4) {
    throw Error("regular field must be (K, N, H, W), got " + shape_string(values_.shape()));
  }
  if (static_cast<int>(values_.dim(1)) != group_.order()) {
    throw Error("field has " + std::to_string(values_.dim(1)) + " orientation channels but group order " +
                std::to_string(group_.order()));
  }
}

Vec2 RRoI::local_to_image(double u, double v) const {
  const Vec2 d = turn(theta, {u, v});
  return {x + d.x, y + d.y};
}

double normalize_angle(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double t = std::fmod(theta, two_pi);
  if (t < 0) t += two_pi;
  if (t >= two_pi) t -= two_pi;
  return t;
}

RRoI make_rroi(double x, double y, double w, double h, double theta) {
  if (!(w > 0.0) || !(h > 0.0)) throw Error("degenerate RRoI");
  return {x, y, w, h, normalize_angle(theta)};
}

RegularField act_on_field(const RegularField& f, int k) {
  const CyclicGroup& g = f.group();
  const double angle = g.angle_of(k);
  if (f.height() != f.width()) throw Error("group action needs a square field");
  const std::size_t kk = f.base_channels();
  const std::size_t n = f.orientations();
  const std::size_t plane = f.height() * f.width();
  // Shift first, then rotate all planes in one pass.
  Tensor shifted(f.values().shape());
  for (std::size_t c = 0; c < kk; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = (i + n - static_cast<std::size_t>(k)) % n;
      const double* from = f.values().data() + (c * n + src) * plane;
      double* to = shifted.data() + (c * n + i) * plane;
      std::copy(from, from + plane, to);
    }
  }
  if (auto q = g.quarter_turns_of(k)) return RegularField(g, rotate_quarter(shifted, *q));
  return RegularField(g, rotate_planar(shifted, angle));
}

RRoI act_on_rroi(const RRoI& b, double angle, Vec2 image_center) {
  const Vec2 d = turn(angle, {b.x - image_center.x, b.y - image_center.y});
  RRoI out = b;
  out.x = image_center.x + d.x;
  out.y = image_center.y + d.y;
  out.theta = normalize_angle(b.theta + angle);
  return out;
}

}  // namespace regconv
