// Worked input/output cases for every library operation. Each expected
// value comes from a direct computation in this file, not from the
// library path under test.

#include <cmath>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "regconv/backbone.hpp"
#include "regconv/group.hpp"
#include "regconv/layers.hpp"
#include "regconv/ops.hpp"
#include "regconv/planar.hpp"
#include "regconv/roi_align.hpp"
#include "regconv/synth.hpp"
#include "regconv/train.hpp"
#include "regconv/verify.hpp"
#include "test_util.hpp"

namespace regconv {
namespace {

using testing::randn;
using testing::rel_l2;
constexpr double kPi = std::numbers::pi;

template <class F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

// Quarter turn counter-clockwise as displayed: out(y, x) = in(x, W-1-y).
Tensor quarter_turn_oracle(const Tensor& t) {
  Tensor out(t.shape());
  const std::size_t n = t.width();
  for (std::size_t c = 0; c < t.planes(); ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) out.at(c, y, x) = t.at(c, x, n - 1 - y);
  return out;
}

// ---- tensor-core --------------------------------------------------------

TEST(BilinearSample, ExactGridPoint) {
  Tensor t({1, 4, 5});
  t.at(0, 2, 3) = 7.0;
  EXPECT_EQ(bilinear_sample(t, 0, 3.0, 2.0), 7.0);
}

TEST(BilinearSample, ConstantInterior) {
  Tensor t({1, 4, 4}, 5.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(t, 0, 1.5, 1.5), 5.0);
}

TEST(BilinearSample, HalfWeightOnZeroPadding) {
  Tensor t({1, 1, 1}, 4.0);
  // 0.5 * 4 from the pixel, 0.5 * 0 from the padded neighbour
  EXPECT_DOUBLE_EQ(bilinear_sample(t, 0, 0.5, 0.0), 0.5 * 4.0 + 0.5 * 0.0);
}

TEST(BilinearSample, RejectsBadChannel) {
  Tensor t({2, 3, 3});
  EXPECT_EQ(error_of([&] { bilinear_sample(t, 2, 0, 0); }), "channel out of range");
}

TEST(RotatePlanar, ZeroAngleIsIdentity) {
  const Tensor t = randn({2, 7, 5}, 1);
  EXPECT_EQ(rotate_planar(t, 0.0), t);
}

TEST(RotatePlanar, QuarterTurnOfTwoByTwo) {
  const Tensor t({1, 2, 2}, {1, 2, 3, 4});
  const Tensor expected = quarter_turn_oracle(t);
  EXPECT_EQ(expected, Tensor({1, 2, 2}, {2, 4, 1, 3}));
  EXPECT_EQ(rotate_planar(t, kPi / 2), expected);
}

TEST(RotatePlanar, HalfTurnTwiceRestores) {
  const Tensor t = randn({3, 6, 6}, 2);
  EXPECT_EQ(rotate_planar(rotate_planar(t, kPi), kPi), t);
}

TEST(Conv2dPlain, IdentityFilter) {
  const Tensor t = randn({1, 5, 6}, 3);
  const Tensor w({1, 1, 1, 1}, 1.0);
  EXPECT_EQ(conv2d_plain(t, w), t);
}

TEST(Conv2dPlain, OnesFilterOnOnes) {
  const Tensor t({1, 5, 5}, 1.0);
  const Tensor w({1, 1, 3, 3}, 1.0);
  const Tensor out = conv2d_plain(t, w, 1, 1);
  double direct = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) direct += t.at(0, 2 + dy, 2 + dx);
  EXPECT_EQ(out.at(0, 2, 2), direct);
  EXPECT_EQ(out.at(0, 2, 2), 9.0);
}

TEST(Conv2dPlain, ShiftedInputShiftsOutput) {
  const Tensor t = randn({2, 9, 9}, 4);
  Tensor shifted({2, 9, 9});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 9; ++y)
      for (std::size_t x = 1; x < 9; ++x) shifted.at(c, y, x) = t.at(c, y, x - 1);
  const Tensor w = randn({3, 2, 3, 3}, 5);
  const Tensor a = conv2d_plain(t, w, 1, 1), b = conv2d_plain(shifted, w, 1, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 1; y < 8; ++y)
      for (std::size_t x = 2; x < 8; ++x) EXPECT_EQ(b.at(c, y, x), a.at(c, y, x - 1));
}

TEST(Conv2dPlain, RejectsEvenKernelAndChannelMismatch) {
  const Tensor t({2, 5, 5});
  EXPECT_THROW(conv2d_plain(t, Tensor({1, 2, 2, 2})), Error);
  EXPECT_THROW(conv2d_plain(t, Tensor({1, 3, 3, 3})), Error);
}

TEST(MaxPool, TwoByTwo) {
  const Tensor t({1, 2, 2}, {1, 2, 3, 4});
  const double direct = std::max({t[0], t[1], t[2], t[3]});
  EXPECT_EQ(maxpool2d(t), Tensor({1, 1, 1}, {direct}));
}

TEST(MaxPool, RejectsOddSize) { EXPECT_THROW(maxpool2d(Tensor({1, 3, 4})), Error); }

TEST(Upsample, OnePixel) {
  EXPECT_EQ(upsample_nearest(Tensor({1, 1, 1}, 1.0), 2), Tensor({1, 2, 2}, 1.0));
}

TEST(Upsample, PoolingInvertsUpsampling) {
  const Tensor t = randn({2, 3, 4}, 6);
  EXPECT_EQ(maxpool2d(upsample_nearest(t, 2), 2, 2), t);
}

TEST(TensorIO, RoundTripAndBadMagic) {
  const Tensor t = randn({2, 3, 4}, 7);
  std::stringstream ss;
  write_tensor(ss, t);
  EXPECT_EQ(read_tensor(ss), t);
  std::stringstream bad("XXXX0000");
  EXPECT_EQ(error_of([&] { read_tensor(bad); }), "bad magic");
}

// ---- group-algebra -------------------------------------------------------

TEST(ActOnField, IdentityElement) {
  const RegularField f(CyclicGroup(4), randn({2, 4, 6, 6}, 8));
  EXPECT_EQ(act_on_field(f, 0).values(), f.values());
}

TEST(ActOnField, FullCycleN4) {
  const RegularField f(CyclicGroup(4), randn({2, 4, 8, 8}, 9));
  RegularField g = f;
  for (int i = 0; i < 4; ++i) g = act_on_field(g, 1);
  EXPECT_LE(interior_relative_error(g.values(), f.values()), 1e-6);
}

TEST(ActOnField, FullCycleN8) {
  const std::size_t side = 128;
  const Tensor img = smooth_random_image(10, side, 8, 16.0).reshaped({1, 8, side, side});
  const RegularField f(CyclicGroup(8), img);
  RegularField g = f;
  for (int i = 0; i < 8; ++i) g = act_on_field(g, 1);
  EXPECT_LE(interior_relative_error(g.values(), f.values()), 2e-2);
}

TEST(ActOnField, ConstantsShiftCyclically) {
  const double c[4] = {10, 20, 30, 40};
  Tensor v({1, 4, 5, 5});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t p = 0; p < 25; ++p) v[i * 25 + p] = c[i];
  const RegularField out = act_on_field(RegularField(CyclicGroup(4), v), 1);
  for (std::size_t i = 0; i < 4; ++i) {
    const double expected = c[(i + 3) % 4];  // (i - 1) mod 4
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(out.at(0, i, y, x), expected);
  }
  EXPECT_EQ(out.at(0, 0, 0, 0), 40);
  EXPECT_EQ(out.at(0, 1, 0, 0), 10);
}

TEST(ActOnRRoI, ZeroAngle) {
  const RRoI b = make_rroi(3, 4, 5, 6, 1.0);
  const RRoI r = act_on_rroi(b, 0.0, {10, 10});
  EXPECT_DOUBLE_EQ(r.x, b.x);
  EXPECT_DOUBLE_EQ(r.y, b.y);
  EXPECT_DOUBLE_EQ(r.theta, b.theta);
}

TEST(ActOnRRoI, QuarterTurnAboutOrigin) {
  // With y pointing down, a counter-clockwise quarter turn as displayed
  // takes +x to -y.
  const RRoI r = act_on_rroi(make_rroi(10, 0, 4, 2, 0), kPi / 2, {0, 0});
  const double c = std::cos(kPi / 2), s = std::sin(kPi / 2);
  EXPECT_NEAR(r.x, c * 10 + s * 0, 1e-12);
  EXPECT_NEAR(r.y, -s * 10 + c * 0, 1e-12);
  EXPECT_NEAR(r.x, 0.0, 1e-12);
  EXPECT_NEAR(r.y, -10.0, 1e-12);
  EXPECT_EQ(r.w, 4);
  EXPECT_EQ(r.h, 2);
  EXPECT_NEAR(r.theta, kPi / 2, 1e-12);
}

TEST(ActOnRRoI, TwoHalfTurnsCompose) {
  const RRoI b = make_rroi(12, 7, 4, 3, 5.5);
  const RRoI r = act_on_rroi(act_on_rroi(b, kPi, {20, 20}), kPi, {20, 20});
  EXPECT_NEAR(r.x, b.x, 1e-12);
  EXPECT_NEAR(r.y, b.y, 1e-12);
  EXPECT_NEAR(r.theta, b.theta, 1e-12);
  EXPECT_GE(r.theta, 0.0);
  EXPECT_LT(r.theta, 2 * kPi);
}

TEST(CyclicGroupOps, ComposeInverseAngle) {
  for (int n : {1, 4, 8, 16}) {
    const CyclicGroup g(n);
    EXPECT_EQ(g.compose(1 % n, n - 1), 0);
    EXPECT_EQ(g.inverse(0), 0);
  }
  EXPECT_DOUBLE_EQ(CyclicGroup(8).angle_of(3), 2 * kPi * 3 / 8);
  EXPECT_DOUBLE_EQ(CyclicGroup(8).angle_of(3), 3 * kPi / 4);
  EXPECT_THROW(CyclicGroup(4).compose(4, 0), Error);
}

// ---- equivariant-layers --------------------------------------------------

TEST(ExpandLift, TrivialGroup) {
  const Tensor base = randn({3, 2, 3, 3}, 11);
  EXPECT_EQ(expand_lift_filters(base, CyclicGroup(1)), base);
}

TEST(ExpandLift, QuarterTurnMovesTopCentreToLeftCentre) {
  Tensor base({1, 1, 3, 3});
  base.at(0, 0, 1) = 1.0;  // top centre
  const Tensor e = expand_lift_filters(base, CyclicGroup(4));
  Tensor slice1({1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) slice1[i] = e[9 + i];
  Tensor left_centre({1, 3, 3});
  left_centre.at(0, 1, 0) = 1.0;
  EXPECT_EQ(slice1, left_centre);
  EXPECT_EQ(slice1, quarter_turn_oracle(base.reshaped({1, 3, 3})));
}

TEST(ExpandLift, SymmetricBaseGivesEqualSlices) {
  Tensor gauss({1, 1, 3, 3});
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) gauss[y * 3 + x] = std::exp(-((x - 1) * (x - 1) + (y - 1) * (y - 1)) / 2.0);
  const Tensor e4 = expand_lift_filters(gauss, CyclicGroup(4));
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(e4[r * 9 + i], e4[i]);

  // Off-axis turns mask the kernel corners, so the symmetric case for
  // larger groups is a centred delta.
  Tensor delta({1, 1, 3, 3});
  delta[4] = 1.0;
  const Tensor e8 = expand_lift_filters(delta, CyclicGroup(8));
  for (std::size_t r = 1; r < 8; ++r)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(e8[r * 9 + i], e8[i], 1e-6);
}

TEST(LiftForward, ConstantImageGivesEqualOrientations) {
  for (int n : {4, 8}) {
    SplitMix64 rng(12);
    const LiftConvLayer layer("lift", CyclicGroup(n), 1, 2, 3, rng);
    const Tensor img({1, 9, 9}, 1.5);
    const RegularField out = lift_forward(img, layer);
    for (std::size_t k = 0; k < 2; ++k) {
      // off-axis groups drop the taps outside the inscribed disc (corners)
      double mass = 0;
      for (std::size_t i = 0; i < 9; ++i) {
        const bool corner = i % 2 == 0 && i != 4;
        if (n == 8 && corner) continue;
        mass += layer.weight.value[k * 9 + i];
      }
      for (int r = 0; r < n; ++r)
        for (std::size_t y = 1; y < 8; ++y)
          for (std::size_t x = 1; x < 8; ++x) EXPECT_NEAR(out.at(k, r, y, x), 1.5 * mass, 1e-12);
    }
  }
}

TEST(LiftForward, QuarterTurnEquivariance) {
  SplitMix64 rng(13);
  const CyclicGroup g(4);
  const LiftConvLayer layer("lift", g, 1, 3, 3, rng);
  const Tensor img = smooth_random_image(14, 64, 1, 4.0);
  const RegularField a = lift_forward(rotate_planar(img, g.angle_of(1)), layer);
  const RegularField b = act_on_field(lift_forward(img, layer), 1);
  EXPECT_LE(interior_relative_error(a.values(), b.values()), 1e-5);
}

TEST(LiftForward, EighthTurnEquivariance) {
  SplitMix64 rng(15);
  const CyclicGroup g(8);
  const LiftConvLayer layer("lift", g, 1, 3, 3, rng);
  const Tensor img = smooth_random_image(16, 128, 1, 16.0);
  const RegularField a = lift_forward(rotate_planar(img, g.angle_of(1)), layer);
  const RegularField b = act_on_field(lift_forward(img, layer), 1);
  EXPECT_LE(interior_relative_error(a.values(), b.values()), 5e-2);
}

TEST(GConvForward, OneByOneIsCyclicCorrelation) {
  const int n = 4;
  const double w[n] = {0.5, -1.0, 2.0, 0.25};
  const double c[n] = {1.0, 3.0, -2.0, 5.0};
  GConvLayer layer;
  layer.group = CyclicGroup(n);
  layer.weight = Param("w", Tensor({1, 1, n, 1, 1}, std::vector<double>(w, w + n)));
  Tensor in({1, n, 3, 3});
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < 9; ++p) in[j * 9 + p] = c[j];
  const RegularField out = gconv_forward(RegularField(layer.group, in), layer);
  for (int r = 0; r < n; ++r) {
    double corr = 0;
    for (int j = 0; j < n; ++j) corr += w[((j - r) % n + n) % n] * c[j];
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) EXPECT_DOUBLE_EQ(out.at(0, r, y, x), corr);
  }
}

TEST(GConvForward, IdentityBase) {
  const int n = 4;
  GConvLayer layer;
  layer.group = CyclicGroup(n);
  Tensor base({1, 1, n, 1, 1});
  base[0] = 1.0;
  layer.weight = Param("w", base);
  const RegularField f(layer.group, randn({1, n, 5, 5}, 17));
  EXPECT_EQ(gconv_forward(f, layer).values(), f.values());
}

TEST(GConvForward, QuarterTurnEquivariance) {
  SplitMix64 rng(18);
  const CyclicGroup g(4);
  const GConvLayer layer("g", g, 2, 3, 3, rng);
  const Tensor img = smooth_random_image(19, 64, 8, 4.0).reshaped({2, 4, 64, 64});
  const RegularField f(g, img);
  const RegularField a = gconv_forward(act_on_field(f, 1), layer);
  const RegularField b = act_on_field(gconv_forward(f, layer), 1);
  EXPECT_LE(interior_relative_error(a.values(), b.values()), 1e-5);
}

TEST(GroupLayers, ReluOfNegativeIsZero) {
  Tensor v = randn({2, 4, 3, 3}, 20);
  for (auto& x : v.values()) x = -std::abs(x) - 0.1;
  EXPECT_EQ(grelu_forward(RegularField(CyclicGroup(4), v)).values(), Tensor({2, 4, 3, 3}));
}

TEST(GroupLayers, NormSharesStatisticsAcrossOrientations) {
  // K=1, N=4, 2x2; orientation channel i is the base plane cyclically
  // permuted by i.
  const double base[4] = {1.0, 4.0, -2.0, 3.0};
  Tensor v({1, 4, 2, 2});
  for (int i = 0; i < 4; ++i)
    for (int p = 0; p < 4; ++p) v[i * 4 + p] = base[(p + i) % 4];
  GroupBatchNorm bn("bn", 1);
  bn.gamma.value[0] = 1.5;
  bn.beta.value[0] = -0.5;
  const RegularField out = gbn_forward(RegularField(CyclicGroup(4), v), bn);

  // mean over all 16 values = mean of the base plane; same for variance
  const double mean = (1.0 + 4.0 - 2.0 + 3.0) / 4.0;
  double var = 0;
  for (double b : base) var += (b - mean) * (b - mean);
  var /= 4.0;
  for (int i = 0; i < 4; ++i)
    for (int p = 0; p < 4; ++p) {
      const double expected = 1.5 * (base[(p + i) % 4] - mean) / std::sqrt(var + bn.eps) - 0.5;
      EXPECT_NEAR(out.values()[i * 4 + p], expected, 1e-12);
      // still a permutation of channel 0
      EXPECT_EQ(out.values()[i * 4 + p], out.values()[(p + i) % 4]);
    }
}

TEST(GroupLayers, MaxPoolCommutesWithAction) {
  const RegularField f(CyclicGroup(4), randn({2, 4, 8, 8}, 21));
  EXPECT_EQ(gmaxpool_forward(act_on_field(f, 1)).values(), act_on_field(gmaxpool_forward(f), 1).values());
}

TEST(BackboneForward, StemOnlyIsLift) {
  BackboneConfig cfg;
  cfg.group_order = 4;
  cfg.widths = {};
  cfg.blocks = {};
  Backbone net(cfg, 22);
  SplitMix64 rng(22);
  const LiftConvLayer stem("stem", CyclicGroup(4), 1, cfg.stem_width, 3, rng);
  const Tensor img = randn({1, 12, 12}, 23);
  const auto levels = net.forward(img);
  ASSERT_EQ(levels.size(), 1u);
  EXPECT_EQ(levels[0].values(), lift_forward(img, stem).values());
}

TEST(BackboneForward, QuarterTurnEveryLevel) {
  BackboneConfig cfg;  // N=4, two stages of width 8
  Backbone net(cfg, 24);
  const CyclicGroup g(4);
  const Tensor img = smooth_random_image(25, 64, 1, 8.0);
  std::vector<double> per_level;
  equivariance_error(net, img, g, 1, &per_level);
  ASSERT_EQ(per_level.size(), 2u);
  for (double e : per_level) EXPECT_LE(e, 1e-4);
}

TEST(BackboneForward, LayerParameterCount) {
  SplitMix64 rng(26);
  const GConvLayer layer("g", CyclicGroup(8), 8, 8, 3, rng);
  const std::size_t plain = 64 * 64 * 3 * 3;
  EXPECT_EQ(plain, 36864u);
  EXPECT_EQ(layer.parameter_count(), 8u * 8 * 8 * 9);
  EXPECT_EQ(layer.parameter_count(), 4608u);
  EXPECT_EQ(plain_equivalent_parameters(layer), plain);
}

// ---- roi-warp ------------------------------------------------------------

// Axis-aligned RoI Align: regular s x s bins, n x n samples per bin at
// sub-bin centres, bilinear with zero padding.
double axis_aligned_bin(const Tensor& plane, double cx, double cy, double w, double h, std::size_t s,
                        std::size_t n, std::size_t p, std::size_t q) {
  auto pixel = [&](long y, long x) {
    if (y < 0 || x < 0 || y >= static_cast<long>(plane.height()) || x >= static_cast<long>(plane.width())) return 0.0;
    return plane.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  double acc = 0;
  for (std::size_t iy = 0; iy < n; ++iy)
    for (std::size_t ix = 0; ix < n; ++ix) {
      const double x = cx - w / 2 + (q + (ix + 0.5) / n) * w / s;
      const double y = cy - h / 2 + (p + (iy + 0.5) / n) * h / s;
      const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
      const double ax = x - x0, ay = y - y0;
      acc += (1 - ax) * (1 - ay) * pixel(y0, x0) + ax * (1 - ay) * pixel(y0, x0 + 1) +
             (1 - ax) * ay * pixel(y0 + 1, x0) + ax * ay * pixel(y0 + 1, x0 + 1);
    }
  return acc / static_cast<double>(n * n);
}

TEST(RRoIAlignSpatial, ConstantField) {
  const RegularField f(CyclicGroup(4), Tensor({2, 4, 20, 20}, 3.25));
  const AlignedRoIFeature r = rroi_align_spatial(f, make_rroi(10, 9, 7, 5, 0.8), AlignSpec{});
  EXPECT_EQ(r.tag, AlignTag::SpatialOnly);
  for (double v : r.values.values()) EXPECT_NEAR(v, 3.25, 1e-12);
}

TEST(RRoIAlignSpatial, ZeroAngleMatchesAxisAlignedSampler) {
  const Tensor v = randn({1, 2, 16, 16}, 27);
  const RegularField f(CyclicGroup(2), v);
  AlignSpec spec;
  spec.output_size = 4;
  const double cx = 7.3, cy = 8.1, w = 9.0, h = 6.5;
  const AlignedRoIFeature r = rroi_align_spatial(f, make_rroi(cx, cy, w, h, 0), spec);
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor plane({1, 16, 16});
    for (std::size_t p = 0; p < 256; ++p) plane[p] = v[i * 256 + p];
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t q = 0; q < 4; ++q)
        EXPECT_NEAR(r.values[(i * 4 + p) * 4 + q], axis_aligned_bin(plane, cx, cy, w, h, 4, 2, p, q), 1e-12);
  }
}

TEST(RRoIAlignSpatial, QuarterTurnBoxEqualsRotateThenAlign) {
  const Tensor v = randn({1, 1, 24, 24}, 28);
  const RegularField f(CyclicGroup(1), v);
  AlignSpec spec;
  spec.output_size = 5;
  const RRoI box = make_rroi(11, 12, 8, 6, kPi / 2);
  const AlignedRoIFeature turned = rroi_align_spatial(f, box, spec);
  const Tensor rotated = rotate_planar(v.reshaped({1, 24, 24}), -kPi / 2, Vec2{11, 12});
  const AlignedRoIFeature upright =
      rroi_align_spatial(RegularField(CyclicGroup(1), rotated.reshaped({1, 1, 24, 24})), make_rroi(11, 12, 8, 6, 0), spec);
  EXPECT_LE(max_abs_diff(turned.values, upright.values), 1e-6);
}

TEST(RRoIAlignSpatial, DegenerateBox) {
  const RegularField f(CyclicGroup(1), Tensor({1, 1, 8, 8}));
  RRoI b;
  b.x = 4;
  b.y = 4;
  b.w = 0;
  b.h = 2;
  EXPECT_EQ(error_of([&] { rroi_align_spatial(f, b, AlignSpec{}); }), "degenerate RRoI");
}

AlignedRoIFeature spatial_feature(const std::vector<double>& channels) {
  AlignedRoIFeature fr;
  fr.values = Tensor({1, channels.size(), 1, 1}, channels);
  return fr;
}

TEST(OrientationAlign, ZeroAngleIsIdentity) {
  AlignedRoIFeature fr;
  fr.values = randn({2, 8, 3, 3}, 29);
  for (int l : {1, 2, 4}) {
    AlignSpec spec;
    spec.interpolation = l;
    const AlignedRoIFeature out = orientation_align(fr, 0.0, spec);
    EXPECT_EQ(out.values, fr.values);
    EXPECT_EQ(out.tag, AlignTag::OrientationAligned);
  }
}

TEST(OrientationAlign, QuarterTurnShiftsEveryL) {
  const double a = 1.0, b = 2.0, c = 3.0, d = 4.0;
  for (int l : {1, 2, 4}) {
    AlignSpec spec;
    spec.interpolation = l;
    const AlignedRoIFeature out = orientation_align(spatial_feature({a, b, c, d}), kPi / 2, spec);
    EXPECT_EQ(out.values, Tensor({1, 4, 1, 1}, {b, c, d, a})) << "l=" << l;
  }
}

TEST(OrientationAlign, ThirdOfAChannelN8) {
  const std::vector<double> in{0.3, -1.2, 2.5, 0.7, -0.4, 1.9, -2.2, 0.05};
  AlignSpec spec;
  spec.interpolation = 2;
  const double theta = kPi / 3;
  const double pos = theta * 8 / (2 * kPi);  // 4/3
  const int r = static_cast<int>(std::floor(pos));
  const double alpha = pos - r;
  EXPECT_EQ(r, 1);
  EXPECT_NEAR(alpha, 1.0 / 3.0, 1e-12);
  const AlignedRoIFeature out = orientation_align(spatial_feature(in), theta, spec);
  for (int i = 0; i < 8; ++i) {
    const double g_i = in[(i + 1) % 8], g_next = in[(i + 2) % 8];
    EXPECT_NEAR(out.values[i], (2.0 / 3.0) * g_i + (1.0 / 3.0) * g_next, 1e-12);
  }
}

TEST(OrientationAlign, RejectsAlignedInput) {
  AlignedRoIFeature fr = spatial_feature({1, 2, 3, 4});
  fr.tag = AlignTag::OrientationAligned;
  EXPECT_THROW(orientation_align(fr, 0.5, AlignSpec{}), Error);
}

TEST(RiRoIAlign, ZeroAngleEqualsSpatial) {
  const RegularField f(CyclicGroup(8), randn({2, 8, 16, 16}, 30));
  const RRoI b = make_rroi(8, 7, 6, 5, 0);
  EXPECT_EQ(riroi_align(f, b, AlignSpec{}).values, rroi_align_spatial(f, b, AlignSpec{}).values);
}

// Pooled features of the first object, unrotated and turned by one group
// element with its box.
std::pair<Tensor, Tensor> riroi_pair(int n, std::uint64_t scene_seed) {
  Backbone net(toy_backbone_config(n), mix_seed(1, 1));
  SceneOptions opt;
  opt.side = 64;
  const SyntheticScene scene = gen_scene(scene_seed, opt);
  const CyclicGroup g(n);
  const SyntheticScene turned = rotate_scene(scene, 1, g);
  const AlignSpec spec;
  const Tensor a = riroi_align(net.forward(scene.image)[0], scene.annotations[0].box, spec).values;
  const Tensor b = riroi_align(net.forward(turned.image)[0], turned.annotations[0].box, spec).values;
  return {a, b};
}

TEST(RiRoIAlign, QuarterTurnedObjectN4) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto [a, b] = riroi_pair(4, mix_seed(31, s));
    EXPECT_LE(rel_l2(b, a), 1e-3);
  }
}

TEST(RiRoIAlign, EighthTurnedObjectN8) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto [a, b] = riroi_pair(8, mix_seed(32, s));
    EXPECT_LE(rel_l2(b, a), 8e-2);
  }
}

TEST(OrientationMaxPool, EqualChannels) {
  const AlignedRoIFeature out = orientation_maxpool(spatial_feature({2.5, 2.5, 2.5, 2.5}));
  EXPECT_EQ(out.values, Tensor({1, 1, 1, 1}, 2.5));
  EXPECT_EQ(out.tag, AlignTag::OrientationPooled);
}

TEST(OrientationMaxPool, DirectMax) {
  EXPECT_EQ(orientation_maxpool(spatial_feature({1, 5, 3, 2})).values[0], 5.0);
}

TEST(OrientationMaxPool, ShiftInvariant) {
  EXPECT_EQ(orientation_maxpool(spatial_feature({0.2, -1, 4, 1.5})).values,
            orientation_maxpool(spatial_feature({1.5, 0.2, -1, 4})).values);
}

// ---- autodiff -------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Var x = tape.constant(randn({2, 3, 4}, 33));
  tape.backward(ad::sum(x));
  EXPECT_EQ(x.grad(), Tensor({2, 3, 4}, 1.0));
}

TEST(Backward, IdentityConvGivesOnes) {
  Tape tape;
  Var x = tape.constant(randn({1, 5, 5}, 34));
  Var w = tape.constant(Tensor({1, 1, 1, 1}, 1.0));
  tape.backward(ad::sum(ad::conv2d(x, w)));
  EXPECT_EQ(x.grad(), Tensor({1, 5, 5}, 1.0));
}

TEST(Backward, RiRoIOfLiftWrtFilters) {
  SplitMix64 rng(35);
  LiftConvLayer layer("lift", CyclicGroup(4), 1, 2, 3, rng);
  const Tensor img = randn({1, 12, 12}, 36);
  AlignSpec spec;
  spec.output_size = 3;
  const RRoI b = make_rroi(5.6, 6.2, 6, 4, 0.9);
  const auto res = grad_check(
      [&](Tape& t) { return ad::sum(ad::riroi_align(ad::lift(t.constant(img), layer), b, spec)); }, {&layer.weight});
  EXPECT_LE(res.max_rel_error, 1e-4);
}

TEST(GradCheck, LinearMap) {
  // coefficients of order one and a value of order one keep every partial
  // well above the rounding floor of the difference quotient
  SplitMix64 rng(38);
  Param p("p", random_uniform({60}, rng, -0.1, 0.1));
  Tensor w({60});
  for (auto& v : w.values()) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.5, 2.0);
  const auto res = grad_check([&](Tape& t) { return ad::dot(t.param(p), w); }, {&p});
  EXPECT_GE(res.coordinates, 50u);
  EXPECT_LE(res.max_rel_error, 1e-10);
}

TEST(GradCheck, GConvNormReluStack) {
  SplitMix64 rng(39);
  const CyclicGroup g(4);
  GConvLayer conv("g", g, 2, 2, 3, rng);
  GroupBatchNorm bn("bn", 2);
  const Tensor x = randn({2, 4, 6, 6}, 40);
  const Tensor r = randn({2, 4, 6, 6}, 41);
  // keep every pre-activation clear of the relu kink
  const Tensor pre = gbn_forward(gconv_forward(RegularField(g, x), conv), bn).values();
  double closest = INFINITY;
  for (double v : pre.values()) closest = std::min(closest, std::abs(v));
  ASSERT_GT(closest, 1e-3);
  const auto res = grad_check(
      [&](Tape& t) { return ad::dot(ad::relu(ad::group_norm(ad::gconv(t.constant(x), conv), bn)), r); },
      {&conv.weight, &bn.gamma, &bn.beta});
  EXPECT_LE(res.max_rel_error, 1e-4);
}

TEST(GradCheck, OrientationAlignL2) {
  Param fr("fr", randn({2, 8, 3, 3}, 42));
  const Tensor r = randn({2, 8, 3, 3}, 43);
  AlignSpec spec;
  spec.interpolation = 2;
  const auto res = grad_check([&](Tape& t) { return ad::dot(ad::orientation_align(t.param(fr), 1.1, spec), r); }, {&fr});
  EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST(Sgd, ZeroGradientNoDecay) {
  Param p("p", randn({5}, 44));
  const Tensor before = p.value;
  sgd_step({&p}, 0.1, 0.9, 0.0);
  EXPECT_EQ(p.value, before);
}

TEST(Sgd, HandUpdate) {
  Param p("p", Tensor({1}, 1.0));
  p.grad[0] = 1.0;
  sgd_step({&p}, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.1 * 1.0);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Sgd, WeightDecayAddsToGradient) {
  Param p("p", Tensor({1}, 2.0));
  p.grad[0] = 0.5;
  sgd_step({&p}, 1.0, 0.0, 0.0001);
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 - 1.0 * (0.5 + 0.0001 * 2.0));
}

TEST(Sgd, RejectsNonPositiveRate) {
  Param p("p", Tensor({1}, 1.0));
  EXPECT_THROW(sgd_step({&p}, 0.0), Error);
}

// ---- verify ---------------------------------------------------------------

TEST(EquivarianceError, IdentityModel) {
  const FieldModel identity = [](const Tensor& img) {
    return std::vector<RegularField>{RegularField(CyclicGroup(1), img.reshaped({1, 1, img.height(), img.width()}))};
  };
  const Tensor img = smooth_random_image(45, 32, 1, 4.0);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(equivariance_error(identity, img, CyclicGroup(4), k), 0.0);
}

TEST(EquivarianceError, ToyBackboneAndPlainControl) {
  const CyclicGroup g(4);
  const Tensor img = smooth_random_image(46, 128, 1, 16.0);
  Backbone equi(toy_backbone_config(4), 47);
  Backbone plain(toy_backbone_config(4).plain_counterpart(), 48);
  EXPECT_LE(equivariance_error(equi, img, g, 1), 1e-4);
  EXPECT_GE(equivariance_error(plain, img, g, 1), 0.1);
}

TEST(RoIInvarianceError, TrivialGroup) {
  Backbone net(toy_backbone_config(1), 49);
  const SyntheticScene scene = gen_scene(50, SceneOptions{});
  const RoIInvariance r = roi_invariance_error(net, scene, 0, CyclicGroup(1), AlignMode::RiRoI, AlignSpec{});
  EXPECT_EQ(r.cov, 0.0);
  EXPECT_EQ(r.max_pairwise, 0.0);
}

TEST(RoIInvarianceError, ObjectNearBorder) {
  Backbone net(toy_backbone_config(4), 51);
  SyntheticScene scene;
  scene.image = Tensor({1, 64, 64});
  scene.annotations.push_back({make_rroi(6, 30, 10, 6, 0), ShapeClass::Rect});
  EXPECT_EQ(error_of([&] { roi_invariance_error(net, scene, 0, CyclicGroup(4), AlignMode::RiRoI, AlignSpec{}); }),
            "object not interior");
}

TEST(ParamRatio, SingleLayer) {
  SplitMix64 rng(52);
  const GConvLayer n8("g", CyclicGroup(8), 8, 8, 3, rng);
  EXPECT_EQ(param_ratio(n8, 64, 64, 3).ratio(), 4608.0 / 36864.0);
  EXPECT_EQ(param_ratio(n8, 64, 64, 3).ratio(), 1.0 / 8);
  const GConvLayer n4("g", CyclicGroup(4), 8, 8, 3, rng);
  EXPECT_EQ(param_ratio(n4, 32, 32, 3).ratio(), 1.0 / 4);
  const GConvLayer n1("g", CyclicGroup(1), 8, 8, 3, rng);
  EXPECT_EQ(param_ratio(n1, 8, 8, 3).ratio(), 1.0);
  EXPECT_THROW(param_ratio(n8, 32, 64, 3), Error);
}

TEST(AugmentationComparison, UntrainedModelsScoreChance) {
  ToyTaskConfig cfg;
  cfg.train_scenes = 2;
  cfg.test_scenes = 4;
  cfg.steps = 0;
  const auto report = augmentation_comparison(cfg, {Variant::Plain, Variant::RotAug, Variant::Equi}, {1});
  ASSERT_EQ(report.runs.size(), 3u);
  for (const auto& run : report.runs) EXPECT_DOUBLE_EQ(run.rotated_accuracy, 1.0 / kNumShapeClasses);
}

// ---- synth-data -----------------------------------------------------------

TEST(GenScene, Deterministic) {
  SceneOptions opt;
  opt.num_objects = 3;
  EXPECT_EQ(gen_scene(53, opt), gen_scene(53, opt));
}

TEST(GenScene, UprightRectangleMatchesBox) {
  SceneOptions opt;
  opt.forced_class = ShapeClass::Rect;
  opt.forced_theta = 0.0;
  opt.noise = false;
  const SyntheticScene s = gen_scene(54, opt);
  ASSERT_EQ(s.annotations.size(), 1u);
  const RRoI& b = s.annotations[0].box;
  EXPECT_EQ(b.theta, 0.0);
  // bounding box of the pixels that are mostly covered
  double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
  for (std::size_t y = 0; y < s.side(); ++y)
    for (std::size_t x = 0; x < s.side(); ++x)
      if (s.image.at(0, y, x) > 0.5) {
        x0 = std::min(x0, double(x));
        x1 = std::max(x1, double(x));
        y0 = std::min(y0, double(y));
        y1 = std::max(y1, double(y));
      }
  EXPECT_NEAR(x0, b.x - b.w / 2, 1.0);
  EXPECT_NEAR(x1, b.x + b.w / 2, 1.0);
  EXPECT_NEAR(y0, b.y - b.h / 2, 1.0);
  EXPECT_NEAR(y1, b.y + b.h / 2, 1.0);
}

TEST(GenScene, BlankScene) {
  SceneOptions opt;
  opt.num_objects = 0;
  opt.noise = false;
  const SyntheticScene s = gen_scene(55, opt);
  EXPECT_TRUE(s.annotations.empty());
  EXPECT_EQ(s.image, Tensor({1, 64, 64}));
}

TEST(RotateScene, IdentityElement) {
  const SyntheticScene s = gen_scene(56, SceneOptions{});
  EXPECT_EQ(rotate_scene(s, 0, CyclicGroup(4)), s);
}

TEST(RotateScene, HalfTurnMapsCentres) {
  SceneOptions opt;
  opt.num_objects = 2;
  const SyntheticScene s = gen_scene(57, opt);
  const SyntheticScene r = rotate_scene(s, 4, CyclicGroup(8));
  const double last = static_cast<double>(s.side()) - 1;
  for (std::size_t i = 0; i < s.annotations.size(); ++i) {
    EXPECT_NEAR(r.annotations[i].box.x, last - s.annotations[i].box.x, 1e-9);
    EXPECT_NEAR(r.annotations[i].box.y, last - s.annotations[i].box.y, 1e-9);
  }
}

TEST(RotateScene, FullCycleRestoresAnnotations) {
  SceneOptions opt;
  opt.num_objects = 2;
  const SyntheticScene s = gen_scene(58, opt);
  const CyclicGroup g(8);
  SyntheticScene r = s;
  for (int i = 0; i < 8; ++i) r = rotate_scene(r, 1, g);
  for (std::size_t i = 0; i < s.annotations.size(); ++i) {
    const RRoI &a = s.annotations[i].box, &b = r.annotations[i].box;
    EXPECT_NEAR(b.x, a.x, 1e-9);
    EXPECT_NEAR(b.y, a.y, 1e-9);
    const double dt = std::remainder(b.theta - a.theta, 2 * kPi);
    EXPECT_NEAR(dt, 0.0, 1e-9);
    EXPECT_EQ(r.annotations[i].label, s.annotations[i].label);
  }
}

TEST(DatasetIO, RoundTrip) {
  SceneOptions opt;
  opt.num_objects = 2;
  const std::vector<SyntheticScene> scenes{gen_scene(59, opt), gen_scene(60, opt)};
  std::stringstream ss;
  write_dataset(ss, scenes);
  EXPECT_EQ(read_dataset(ss), scenes);
}

TEST(DatasetIO, CorruptedMagic) {
  std::stringstream ss;
  write_dataset(ss, {gen_scene(61, SceneOptions{})});
  std::string bytes = ss.str();
  const auto pos = bytes.find("RGT1");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 4, "RGX1");
  std::stringstream bad(bytes);
  EXPECT_EQ(error_of([&] { read_dataset(bad); }), "bad magic");
}

TEST(DatasetIO, EmptyDataset) {
  std::stringstream ss;
  write_dataset(ss, {});
  EXPECT_TRUE(read_dataset(ss).empty());
}

}  // namespace
}  // namespace regconv
