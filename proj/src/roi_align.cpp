#include "regconv/roi_align.hpp"

#include <cmath>
#include <numbers>

namespace regconv {

namespace {

struct SampleTap {
  std::size_t bin;
  std::size_t index;
  double weight;  // bilinear weight already divided by samples per bin
};

// Flattened (bin, pixel, weight) list for one box on an H x W map.
std::vector<SampleTap> sampling_taps(std::size_t height, std::size_t width, const RRoI& b, const AlignSpec& spec) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) throw Error("degenerate RRoI");
  const std::size_t s = spec.output_size;
  const std::size_t n = spec.sampling;
  const double bin_w = b.w / static_cast<double>(s);
  const double bin_h = b.h / static_cast<double>(s);
  const double norm = 1.0 / static_cast<double>(n * n);
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  std::vector<SampleTap> taps;
  taps.reserve(s * s * n * n * 4);
  for (std::size_t p = 0; p < s; ++p) {
    for (std::size_t q = 0; q < s; ++q) {
      for (std::size_t iy = 0; iy < n; ++iy) {
        for (std::size_t ix = 0; ix < n; ++ix) {
          const double u = -b.w / 2.0 + (static_cast<double>(q) + (static_cast<double>(ix) + 0.5) / static_cast<double>(n)) * bin_w;
          const double v = -b.h / 2.0 + (static_cast<double>(p) + (static_cast<double>(iy) + 0.5) / static_cast<double>(n)) * bin_h;
          const Vec2 pt = b.local_to_image(u, v);
          const double fx = std::floor(pt.x), fy = std::floor(pt.y);
          const double ax = pt.x - fx, ay = pt.y - fy;
          const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
          const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
          const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
          const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
          for (int t = 0; t < 4; ++t) {
            if (ws[t] == 0.0 || xs[t] < 0 || ys[t] < 0 || xs[t] >= w || ys[t] >= h) continue;
            taps.push_back({p * s + q, static_cast<std::size_t>(ys[t] * w + xs[t]), ws[t] * norm});
          }
        }
      }
    }
  }
  return taps;
}

void check_field_tensor(const Tensor& t) {
  if (t.rank() != 4) throw Error("RoI align expects a (K, N, H, W) field, got " + shape_string(t.shape()));
}

Tensor spatial_forward(const Tensor& field, const std::vector<SampleTap>& taps, std::size_t s) {
  const std::size_t planes = field.dim(0) * field.dim(1);
  const std::size_t hw = field.dim(2) * field.dim(3);
  Tensor out({field.dim(0), field.dim(1), s, s});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = field.data() + pl * hw;
    double* dst = out.data() + pl * s * s;
    for (const auto& t : taps) dst[t.bin] += t.weight * src[t.index];
  }
  return out;
}

Tensor spatial_adjoint(const Shape& field_shape, const std::vector<SampleTap>& taps, const Tensor& g, std::size_t s) {
  Tensor out(field_shape);
  const std::size_t planes = field_shape[0] * field_shape[1];
  const std::size_t hw = field_shape[2] * field_shape[3];
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = g.data() + pl * s * s;
    double* dst = out.data() + pl * hw;
    for (const auto& t : taps) dst[t.index] += t.weight * src[t.bin];
  }
  return out;
}

double keys_cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
  if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
  return 0.0;
}

// out[c, i] = sum_m w[m] * in[c, (i + m - 1 + r) mod N]; transpose swaps roles.
Tensor orientation_mix(const Tensor& in, int r, const std::array<double, 4>& w, bool transpose) {
  const std::size_t k = in.dim(0), n = in.dim(1);
  const std::size_t plane = in.dim(2) * in.dim(3);
  Tensor out(in.shape());
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      for (int m = 0; m < 4; ++m) {
        if (w[m] == 0.0) continue;
        const auto j = static_cast<std::size_t>(((static_cast<long long>(i) + m - 1 + r) % static_cast<long long>(n) +
                                                 static_cast<long long>(n)) %
                                                static_cast<long long>(n));
        const double* src = in.data() + (c * n + (transpose ? i : j)) * plane;
        double* dst = out.data() + (c * n + (transpose ? j : i)) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += w[m] * src[p];
      }
    }
  }
  return out;
}

Tensor orientation_max(const Tensor& in) {
  const std::size_t k = in.dim(0), n = in.dim(1);
  const std::size_t plane = in.dim(2) * in.dim(3);
  Tensor out({k, 1, in.dim(2), in.dim(3)});
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      double m = in[c * n * plane + p];
      for (std::size_t i = 1; i < n; ++i) m = std::max(m, in[(c * n + i) * plane + p]);
      out[c * plane + p] = m;
    }
  }
  return out;
}

}  // namespace

std::string to_string(AlignTag tag) {
  switch (tag) {
    case AlignTag::SpatialOnly: return "spatial-only";
    case AlignTag::OrientationAligned: return "orientation-aligned";
    case AlignTag::OrientationPooled: return "orientation-pooled";
  }
  return "unknown";
}

void AlignSpec::validate() const {
  if (output_size < 1) throw Error("RoI output size must be >= 1");
  if (sampling < 1) throw Error("RoI sampling ratio must be >= 1");
  if (interpolation != 1 && interpolation != 2 && interpolation != 4) {
    throw Error("orientation interpolation l must be 1, 2 or 4");
  }
}

RRoI rroi_to_level(const RRoI& b, int level) {
  const double s = std::ldexp(1.0, level);
  RRoI out = b;
  out.x = (b.x + 0.5) / s - 0.5;
  out.y = (b.y + 0.5) / s - 0.5;
  out.w = b.w / s;
  out.h = b.h / s;
  return out;
}

AlignedRoIFeature rroi_align_spatial(const RegularField& f, const RRoI& b, const AlignSpec& spec) {
  spec.validate();
  const auto taps = sampling_taps(f.height(), f.width(), b, spec);
  return {spatial_forward(f.values(), taps, spec.output_size), AlignTag::SpatialOnly, normalize_angle(b.theta)};
}

OrientationIndex orientation_index(double theta, int n) {
  const double t = normalize_angle(theta) * n / (2.0 * std::numbers::pi);
  double r = std::floor(t);
  double alpha = t - r;
  if (alpha > 1.0 - 1e-9) {
    r += 1.0;
    alpha = 0.0;
  } else if (alpha < 1e-9) {
    alpha = 0.0;
  }
  return {static_cast<int>(r) % n, alpha};
}

std::array<double, 4> orientation_weights(double alpha, int l) {
  switch (l) {
    case 1: return {0.0, 1.0, 0.0, 0.0};
    case 2: return {0.0, 1.0 - alpha, alpha, 0.0};
    case 4: {
      std::array<double, 4> w{keys_cubic(1.0 + alpha), keys_cubic(alpha), keys_cubic(1.0 - alpha), keys_cubic(2.0 - alpha)};
      const double s = w[0] + w[1] + w[2] + w[3];
      for (auto& v : w) v /= s;
      return w;
    }
    default: throw Error("orientation interpolation l must be 1, 2 or 4");
  }
}

AlignedRoIFeature orientation_align(const AlignedRoIFeature& fr, double theta, const AlignSpec& spec) {
  spec.validate();
  if (fr.tag != AlignTag::SpatialOnly) throw Error("orientation alignment needs a spatial-only RoI feature");
  const auto n = static_cast<int>(fr.orientations());
  const auto idx = orientation_index(theta, n);
  return {orientation_mix(fr.values, idx.r, orientation_weights(idx.alpha, spec.interpolation), false),
          AlignTag::OrientationAligned, normalize_angle(theta)};
}

AlignedRoIFeature riroi_align(const RegularField& f, const RRoI& b, const AlignSpec& spec) {
  return orientation_align(rroi_align_spatial(f, b, spec), b.theta, spec);
}

AlignedRoIFeature orientation_maxpool(const AlignedRoIFeature& fr) {
  if (fr.tag != AlignTag::SpatialOnly) throw Error("orientation pooling needs a spatial-only RoI feature");
  return {orientation_max(fr.values), AlignTag::OrientationPooled, fr.theta};
}

namespace ad {

Var rroi_align_spatial(Var field, const RRoI& b, const AlignSpec& spec) {
  spec.validate();
  const Tensor& f = field.value();
  check_field_tensor(f);
  auto taps = sampling_taps(f.dim(2), f.dim(3), b, spec);
  const std::size_t s = spec.output_size;
  Tensor out = spatial_forward(f, taps, s);
  const Shape shape = f.shape();
  return field.tape().record("rroi_align", std::move(out), {field},
                             [taps = std::move(taps), shape, s](const Tensor& g, std::vector<Tensor>& gi) {
                               gi[0] = spatial_adjoint(shape, taps, g, s);
                             });
}

Var orientation_align(Var fr, double theta, const AlignSpec& spec) {
  spec.validate();
  const Tensor& x = fr.value();
  check_field_tensor(x);
  const auto idx = orientation_index(theta, static_cast<int>(x.dim(1)));
  const auto w = orientation_weights(idx.alpha, spec.interpolation);
  const int r = idx.r;
  return fr.tape().record("orientation_align", orientation_mix(x, r, w, false), {fr},
                          [r, w](const Tensor& g, std::vector<Tensor>& gi) { gi[0] = orientation_mix(g, r, w, true); });
}

Var riroi_align(Var field, const RRoI& b, const AlignSpec& spec) {
  return orientation_align(rroi_align_spatial(field, b, spec), b.theta, spec);
}

Var orientation_maxpool(Var fr) {
  const Tensor& x = fr.value();
  check_field_tensor(x);
  Tape* t = &fr.tape();
  const std::size_t xi = fr.id();
  return t->record("orientation_maxpool", orientation_max(x), {fr}, [t, xi](const Tensor& g, std::vector<Tensor>& gi) {
    const Tensor& in = t->value(xi);
    const std::size_t k = in.dim(0), n = in.dim(1), plane = in.dim(2) * in.dim(3);
    Tensor d(in.shape());
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i) {
          if (in[(c * n + i) * plane + p] > in[(c * n + best) * plane + p]) best = i;
        }
        d[(c * n + best) * plane + p] = g[c * plane + p];
      }
    }
    gi[0] = std::move(d);
  });
}

}  // namespace ad

}  // namespace regconv
