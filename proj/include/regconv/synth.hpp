#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "regconv/group.hpp"

namespace regconv {

enum class ShapeClass { Rect = 0, Ellipse = 1, LShape = 2, TShape = 3 };

inline constexpr int kNumShapeClasses = 4;

std::string to_string(ShapeClass c);
ShapeClass shape_class_from_string(const std::string& name);

struct Annotation {
  RRoI box;
  ShapeClass label = ShapeClass::Rect;

  friend bool operator==(const Annotation& a, const Annotation& b) {
    return a.label == b.label && a.box.x == b.box.x && a.box.y == b.box.y && a.box.w == b.box.w &&
           a.box.h == b.box.h && a.box.theta == b.box.theta;
  }
};

struct SyntheticScene {
  Tensor image;  // (C, side, side)
  std::vector<Annotation> annotations;
  std::uint64_t seed = 0;

  std::size_t side() const { return image.width(); }
  friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

struct SceneOptions {
  std::size_t side = 64;
  std::size_t num_objects = 1;
  std::size_t channels = 1;  // 1 or 3
  bool noise = true;
  double noise_sigma = 0.02;
  std::optional<ShapeClass> forced_class;
  std::optional<double> forced_theta;  // e.g. 0 for upright-only data
  int supersample = 4;                 // per axis

  void validate() const;
};

/// Point-in-shape test in box-local coordinates (u along width, v along
/// height, both centred). L-shapes lack the (+u, -v) quarter; T-shapes lack
/// the two w/4 x h/2 corners at +v.
bool shape_contains(ShapeClass c, double w, double h, double u, double v);

/// Objects keep their circumscribed circle inside the disc of radius
/// side/2 - side/8 about the centre, so every rotated copy stays clear of
/// the border margin. Boxes may not overlap.
SyntheticScene gen_scene(std::uint64_t seed, const SceneOptions& opt);

/// Border margin ceil(side / 8) that objects must keep clear of.
std::size_t scene_margin(std::size_t side);

/// Joint rotation of image (rotate_planar about the centre) and boxes
/// (act_on_rroi). Throws "object not interior" if a rotated box would
/// leave the margin.
SyntheticScene rotate_scene(const SyntheticScene& s, int k, const CyclicGroup& g);
SyntheticScene rotate_scene_by(const SyntheticScene& s, double angle);

/// Rasterised box mask (pixel centres inside the RRoI).
Tensor rroi_mask(const RRoI& b, std::size_t side);

// Dataset file: a JSON header line, then per scene an RGT1 tensor followed
// by a JSON annotation line.
void write_dataset(std::ostream& os, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> read_dataset(std::istream& is);
void save_dataset(const std::string& path, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> load_dataset(const std::string& path);

/// 8-bit PNG of a (1 or 3, H, W) image, values clamped to [0, 1].
void save_png(const std::string& path, const Tensor& image);

}  // namespace regconv
