#pragma once

#include <array>
#include <string>

#include "regconv/autodiff.hpp"
#include "regconv/group.hpp"

namespace regconv {

enum class AlignTag { SpatialOnly, OrientationAligned, OrientationPooled };

std::string to_string(AlignTag tag);

/// Pooled RoI feature (K, N, s, s). Orientation-pooled features have N = 1.
struct AlignedRoIFeature {
  Tensor values;
  AlignTag tag = AlignTag::SpatialOnly;
  double theta = 0.0;

  std::size_t base_channels() const { return values.dim(0); }
  std::size_t orientations() const { return values.dim(1); }
  std::size_t bins() const { return values.dim(2); }
};

struct AlignSpec {
  std::size_t output_size = 7;
  std::size_t sampling = 2;      // sample points per bin axis
  int interpolation = 2;         // l: 1, 2 or 4 orientation channels

  void validate() const;
};

/// Maps an image-space box onto pyramid level `level` (stride 2^level,
/// pixel j covering image pixels [j*2^level, (j+1)*2^level)).
RRoI rroi_to_level(const RRoI& b, int level);

/// Bilinear warp of a rotated box into an s x s grid; every (K, N) plane
/// independently. Sample points sit at regular sub-bin positions and are
/// averaged per bin. Samples outside the map read zero.
AlignedRoIFeature rroi_align_spatial(const RegularField& f, const RRoI& b, const AlignSpec& spec);

/// Split of the normalised orientation into channel index and fraction:
/// r = floor(theta N / 2 pi), alpha = theta N / 2 pi - r. Values within
/// 1e-9 of an integer snap to it.
struct OrientationIndex {
  int r = 0;
  double alpha = 0.0;
};
OrientationIndex orientation_index(double theta, int n);

/// Interpolation weights over g^(i-1), g^(i), g^(i+1), g^(i+2).
/// l=1: nearest (floor) channel; l=2: (1-alpha, alpha) on i, i+1;
/// l=4: Keys cubic convolution (a = -0.5), normalised to sum 1.
std::array<double, 4> orientation_weights(double alpha, int l);

/// Circularly switches channels so channel r comes first, then interpolates
/// with the nearest l channels.
AlignedRoIFeature orientation_align(const AlignedRoIFeature& fr, double theta, const AlignSpec& spec);

AlignedRoIFeature riroi_align(const RegularField& f, const RRoI& b, const AlignSpec& spec);

/// Max over the orientation axis (the pooling baseline).
AlignedRoIFeature orientation_maxpool(const AlignedRoIFeature& fr);

namespace ad {

/// field is (K, N, H, W); result (K, N, s, s).
Var rroi_align_spatial(Var field, const RRoI& b, const AlignSpec& spec);
Var orientation_align(Var fr, double theta, const AlignSpec& spec);
Var riroi_align(Var field, const RRoI& b, const AlignSpec& spec);
Var orientation_maxpool(Var fr);

}  // namespace ad

}  // namespace regconv
