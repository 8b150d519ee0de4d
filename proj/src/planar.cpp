#include "regconv/planar.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace regconv {

namespace {

// Four bilinear taps of a continuous point; taps outside the grid get
// index -1 and are skipped (zero padding).
struct Taps {
  std::array<std::ptrdiff_t, 4> index{-1, -1, -1, -1};
  std::array<double, 4> weight{};
};

Taps bilinear_taps(std::size_t height, std::size_t width, double x, double y) {
  Taps taps;
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const double ax = x - fx;
  const double ay = y - fy;
  const auto x0 = static_cast<std::ptrdiff_t>(fx);
  const auto y0 = static_cast<std::ptrdiff_t>(fy);
  const std::array<std::ptrdiff_t, 4> xs{x0, x0 + 1, x0, x0 + 1};
  const std::array<std::ptrdiff_t, 4> ys{y0, y0, y0 + 1, y0 + 1};
  const std::array<double, 4> ws{(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  for (int i = 0; i < 4; ++i) {
    if (xs[i] >= 0 && xs[i] < w && ys[i] >= 0 && ys[i] < h && ws[i] != 0.0) {
      taps.index[i] = ys[i] * w + xs[i];
      taps.weight[i] = ws[i];
    }
  }
  return taps;
}

void check_spatial(const Tensor& t) {
  if (t.rank() < 3) throw Error("planar tensor needs rank >= 3, got " + shape_string(t.shape()));
}

bool is_center(const Tensor& t, const std::optional<Vec2>& center) {
  if (!center) return true;
  const Vec2 g = geometric_center(t);
  return center->x == g.x && center->y == g.y;
}

// Warp table: one set of taps per output pixel.
std::vector<Taps> rotation_taps(const Tensor& t, double angle, Vec2 c) {
  const std::size_t h = t.height();
  const std::size_t w = t.width();
  std::vector<Taps> table(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Vec2 d = turn(-angle, {static_cast<double>(x) - c.x, static_cast<double>(y) - c.y});
      table[y * w + x] = bilinear_taps(h, w, c.x + d.x, c.y + d.y);
    }
  }
  return table;
}

}  // namespace

Vec2 turn(double angle, Vec2 v) {
  double c = std::cos(angle);
  double s = std::sin(angle);
  if (auto q = quarter_turns(angle)) {
    constexpr double cs[4] = {1.0, 0.0, -1.0, 0.0};
    c = cs[*q];
    s = cs[(*q + 3) % 4];
  }
  return {c * v.x + s * v.y, -s * v.x + c * v.y};
}

Vec2 geometric_center(const Tensor& t) {
  return {(static_cast<double>(t.width()) - 1.0) / 2.0, (static_cast<double>(t.height()) - 1.0) / 2.0};
}

std::optional<int> quarter_turns(double angle) {
  const double q = angle / (std::numbers::pi / 2.0);
  const double r = std::round(q);
  if (std::abs(q - r) > 1e-12 * std::max(1.0, std::abs(q))) return std::nullopt;
  return static_cast<int>(((static_cast<long long>(r) % 4) + 4) % 4);
}

double bilinear_sample(const Tensor& t, std::size_t c, double x, double y) {
  check_spatial(t);
  if (c >= t.planes()) throw Error("channel out of range");
  const Taps taps = bilinear_taps(t.height(), t.width(), x, y);
  const double* plane = t.data() + c * t.height() * t.width();
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) {
    if (taps.index[i] >= 0) acc += taps.weight[i] * plane[taps.index[i]];
  }
  return acc;
}

Tensor rotate_quarter(const Tensor& t, int q) {
  check_spatial(t);
  const std::size_t n = t.width();
  if (t.height() != n) throw Error("quarter-turn rotation needs a square tensor");
  q = ((q % 4) + 4) % 4;
  if (q == 0) return t;
  Tensor out(t.shape());
  const std::size_t planes = t.planes();
  const std::size_t m = n - 1;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = t.data() + p * n * n;
    double* dst = out.data() + p * n * n;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        std::size_t sx = 0;
        std::size_t sy = 0;
        switch (q) {
          case 1: sx = m - y; sy = x; break;
          case 2: sx = m - x; sy = m - y; break;
          default: sx = y; sy = m - x; break;
        }
        dst[y * n + x] = src[sy * n + sx];
      }
    }
  }
  return out;
}

Tensor rotate_planar(const Tensor& t, double angle, std::optional<Vec2> center) {
  check_spatial(t);
  if (!std::isfinite(angle)) throw Error("rotation angle must be finite");
  if (auto q = quarter_turns(angle); q && t.height() == t.width() && is_center(t, center)) {
    return rotate_quarter(t, *q);
  }
  const Vec2 c = center.value_or(geometric_center(t));
  const auto table = rotation_taps(t, angle, c);
  const std::size_t hw = t.height() * t.width();
  Tensor out(t.shape());
  for (std::size_t p = 0; p < t.planes(); ++p) {
    const double* src = t.data() + p * hw;
    double* dst = out.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const Taps& tp = table[i];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (tp.index[k] >= 0) acc += tp.weight[k] * src[tp.index[k]];
      }
      dst[i] = acc;
    }
  }
  return out;
}

Tensor rotate_planar_adjoint(const Tensor& g, double angle, std::optional<Vec2> center) {
  check_spatial(g);
  if (auto q = quarter_turns(angle); q && g.height() == g.width() && is_center(g, center)) {
    // The inverse of a permutation is its transpose.
    return rotate_quarter(g, 4 - *q);
  }
  const Vec2 c = center.value_or(geometric_center(g));
  const auto table = rotation_taps(g, angle, c);
  const std::size_t hw = g.height() * g.width();
  Tensor out(g.shape());
  for (std::size_t p = 0; p < g.planes(); ++p) {
    const double* src = g.data() + p * hw;
    double* dst = out.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const Taps& tp = table[i];
      for (int k = 0; k < 4; ++k) {
        if (tp.index[k] >= 0) dst[tp.index[k]] += tp.weight[k] * src[i];
      }
    }
  }
  return out;
}

namespace {

struct ConvGeometry {
  std::size_t c_in, c_out, h, w, kh, kw, ho, wo;
};

ConvGeometry conv_geometry(const Tensor& t, const Tensor& filters, std::size_t stride,
                           std::size_t padding) {
  check_spatial(t);
  if (filters.rank() != 4) throw Error("filters must be (C_out, C_in, kH, kW)");
  if (stride < 1) throw Error("stride must be >= 1");
  ConvGeometry g{};
  g.c_out = filters.dim(0);
  g.c_in = filters.dim(1);
  g.kh = filters.dim(2);
  g.kw = filters.dim(3);
  g.h = t.height();
  g.w = t.width();
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw Error("even kernel sizes are not supported");
  if (t.planes() != g.c_in) {
    throw Error("channel mismatch: input has " + std::to_string(t.planes()) +
                " channels, filters expect " + std::to_string(g.c_in));
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) throw Error("kernel larger than padded input");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

// Output columns ox for which ix = ox*stride + kx - pad lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_range(std::size_t wo, std::size_t w, std::size_t k,
                                                std::size_t stride, std::size_t pad) {
  const auto lo_num = static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(k);
  std::size_t lo = lo_num <= 0 ? 0 : (static_cast<std::size_t>(lo_num) + stride - 1) / stride;
  const auto hi_num = static_cast<std::ptrdiff_t>(w + pad) - static_cast<std::ptrdiff_t>(k);
  std::size_t hi = hi_num <= 0 ? 0 : (static_cast<std::size_t>(hi_num) + stride - 1) / stride;
  hi = std::min(hi, wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

}  // namespace

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Output rows per im2col tile, keeping the column buffer around 4 MB.
std::size_t tile_rows(const ConvGeometry& g) {
  const std::size_t per_row = g.c_in * g.kh * g.kw * g.wo;
  return std::clamp<std::size_t>((std::size_t{1} << 19) / std::max<std::size_t>(per_row, 1), 1, g.ho);
}

// col(ci*kh*kw + ky*kw + kx, (oy - oy0)*wo + ox) = padded input at the tap.
void im2col(const double* in, const ConvGeometry& g, std::size_t stride, std::size_t padding,
            std::size_t oy0, std::size_t rows, double* col) {
  const std::size_t npix = rows * g.wo;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    const double* iplane = in + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* dst = col + ((ci * g.kh + ky) * g.kw + kx) * npix;
        const auto [ox_lo, ox_hi] = valid_range(g.wo, g.w, kx, stride, padding);
        for (std::size_t r = 0; r < rows; ++r) {
          double* drow = dst + r * g.wo;
          const std::size_t iy = (oy0 + r) * stride + ky;
          if (iy < padding || iy - padding >= g.h) {
            std::fill(drow, drow + g.wo, 0.0);
            continue;
          }
          const double* irow = iplane + (iy - padding) * g.w;
          std::fill(drow, drow + ox_lo, 0.0);
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) drow[ox] = irow[ox * stride + kx - padding];
          std::fill(drow + ox_hi, drow + g.wo, 0.0);
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, std::size_t stride, std::size_t padding,
            std::size_t oy0, std::size_t rows, double* dx) {
  const std::size_t npix = rows * g.wo;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    double* dplane = dx + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* src = col + ((ci * g.kh + ky) * g.kw + kx) * npix;
        const auto [ox_lo, ox_hi] = valid_range(g.wo, g.w, kx, stride, padding);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t iy = (oy0 + r) * stride + ky;
          if (iy < padding || iy - padding >= g.h) continue;
          double* drow = dplane + (iy - padding) * g.w;
          const double* srow = src + r * g.wo;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) drow[ox * stride + kx - padding] += srow[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_plain(const Tensor& t, const Tensor& filters, std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(t, filters, stride, padding);
  Tensor out({g.c_out, g.ho, g.wo});
  const std::size_t depth = g.c_in * g.kh * g.kw;
  const ConstMap w(filters.data(), static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(depth));
  const std::size_t tile = tile_rows(g);
  std::vector<double> col(depth * tile * g.wo);
  RowMatrix prod;
  for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += tile) {
    const std::size_t rows = std::min(tile, g.ho - oy0);
    const std::size_t npix = rows * g.wo;
    im2col(t.data(), g, stride, padding, oy0, rows, col.data());
    prod.noalias() = w * ConstMap(col.data(), static_cast<Eigen::Index>(depth), static_cast<Eigen::Index>(npix));
    for (std::size_t co = 0; co < g.c_out; ++co) {
      std::copy_n(prod.row(static_cast<Eigen::Index>(co)).data(), npix, out.data() + co * g.ho * g.wo + oy0 * g.wo);
    }
  }
  return out;
}

Conv2dGrads conv2d_plain_backward(const Tensor& t, const Tensor& filters, const Tensor& grad,
                                  std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(t, filters, stride, padding);
  if (grad.size() != g.c_out * g.ho * g.wo) throw Error("conv2d gradient has wrong size");
  Conv2dGrads out{Tensor(t.shape()), Tensor(filters.shape())};
  const std::size_t depth = g.c_in * g.kh * g.kw;
  const auto co_rows = static_cast<Eigen::Index>(g.c_out);
  const ConstMap w(filters.data(), co_rows, static_cast<Eigen::Index>(depth));
  MutMap dw(out.filters.data(), co_rows, static_cast<Eigen::Index>(depth));
  const std::size_t tile = tile_rows(g);
  std::vector<double> col(depth * tile * g.wo);
  RowMatrix gtile, dcol;
  for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += tile) {
    const std::size_t rows = std::min(tile, g.ho - oy0);
    const auto npix = static_cast<Eigen::Index>(rows * g.wo);
    gtile.resize(co_rows, npix);
    for (std::size_t co = 0; co < g.c_out; ++co) {
      std::copy_n(grad.data() + co * g.ho * g.wo + oy0 * g.wo, npix, gtile.row(static_cast<Eigen::Index>(co)).data());
    }
    im2col(t.data(), g, stride, padding, oy0, rows, col.data());
    const ConstMap c(col.data(), static_cast<Eigen::Index>(depth), npix);
    dw.noalias() += gtile * c.transpose();
    dcol.noalias() = w.transpose() * gtile;
    col2im(dcol.data(), g, stride, padding, oy0, rows, out.input.data());
  }
  return out;
}

namespace {

Shape with_spatial(const Shape& s, std::size_t h, std::size_t w) {
  Shape out = s;
  out[out.size() - 2] = h;
  out[out.size() - 1] = w;
  return out;
}

void check_pool(const Tensor& t, std::size_t window, std::size_t stride) {
  check_spatial(t);
  if (window < 1 || stride < 1) throw Error("pooling window and stride must be >= 1");
  if (t.height() % stride != 0 || t.width() % stride != 0) {
    throw Error("spatial dims " + std::to_string(t.height()) + "x" + std::to_string(t.width()) +
                " not divisible by pooling stride " + std::to_string(stride));
  }
  if (t.height() < window || t.width() < window) throw Error("pooling window larger than input");
}

}  // namespace

Tensor maxpool2d(const Tensor& t, std::size_t window, std::size_t stride) {
  check_pool(t, window, stride);
  const std::size_t h = t.height(), w = t.width();
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  Tensor out(with_spatial(t.shape(), ho, wo));
  for (std::size_t p = 0; p < t.planes(); ++p) {
    const double* src = t.data() + p * h * w;
    double* dst = out.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double m = src[oy * stride * w + ox * stride];
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            m = std::max(m, src[(oy * stride + dy) * w + ox * stride + dx]);
          }
        }
        dst[oy * wo + ox] = m;
      }
    }
  }
  return out;
}

Tensor maxpool2d_backward(const Tensor& t, const Tensor& grad, std::size_t window, std::size_t stride) {
  check_pool(t, window, stride);
  const std::size_t h = t.height(), w = t.width();
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  if (grad.size() != t.planes() * ho * wo) throw Error("maxpool gradient has wrong size");
  Tensor out(t.shape());
  for (std::size_t p = 0; p < t.planes(); ++p) {
    const double* src = t.data() + p * h * w;
    const double* g = grad.data() + p * ho * wo;
    double* dst = out.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        // First maximal element in scan order takes the gradient.
        std::size_t best = oy * stride * w + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t i = (oy * stride + dy) * w + ox * stride + dx;
            if (src[i] > src[best]) best = i;
          }
        }
        dst[best] += g[oy * wo + ox];
      }
    }
  }
  return out;
}

Tensor upsample_nearest(const Tensor& t, std::size_t factor) {
  check_spatial(t);
  if (factor < 1) throw Error("upsampling factor must be >= 1");
  const std::size_t h = t.height(), w = t.width();
  Tensor out(with_spatial(t.shape(), h * factor, w * factor));
  const std::size_t wo = w * factor;
  for (std::size_t p = 0; p < t.planes(); ++p) {
    const double* src = t.data() + p * h * w;
    double* dst = out.data() + p * h * w * factor * factor;
    for (std::size_t y = 0; y < h * factor; ++y) {
      for (std::size_t x = 0; x < wo; ++x) dst[y * wo + x] = src[(y / factor) * w + x / factor];
    }
  }
  return out;
}

Tensor upsample_nearest_backward(const Tensor& grad, std::size_t factor) {
  check_spatial(grad);
  if (factor < 1) throw Error("upsampling factor must be >= 1");
  if (grad.height() % factor != 0 || grad.width() % factor != 0) {
    throw Error("gradient dims not divisible by upsampling factor");
  }
  const std::size_t ho = grad.height(), wo = grad.width();
  const std::size_t h = ho / factor, w = wo / factor;
  Tensor out(with_spatial(grad.shape(), h, w));
  for (std::size_t p = 0; p < grad.planes(); ++p) {
    const double* src = grad.data() + p * ho * wo;
    double* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) dst[(y / factor) * w + x / factor] += src[y * wo + x];
    }
  }
  return out;
}

}  // namespace regconv
