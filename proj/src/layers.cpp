#include "regconv/layers.hpp"

#include <cmath>
#include <tuple>

#include "regconv/ops.hpp"

namespace regconv {

namespace {

struct KernelEntry {
  std::size_t src;
  std::size_t dst;
  double weight;
};

// Sparse linear map of one k x k plane onto its turned copy.
std::vector<KernelEntry> kernel_map(std::size_t k, double angle, bool disk_mask) {
  std::vector<KernelEntry> map;
  const double c = (static_cast<double>(k) - 1.0) / 2.0;
  auto masked = [&](std::size_t y, std::size_t x) {
    if (!disk_mask) return false;
    const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
    return std::sqrt(dx * dx + dy * dy) > c + 1e-9;
  };
  if (auto q = quarter_turns(angle)) {
    // Same index law as rotate_quarter: dst(y, x) <- src(sy, sx).
    const std::size_t m = k - 1;
    for (std::size_t y = 0; y < k; ++y) {
      for (std::size_t x = 0; x < k; ++x) {
        std::size_t sx = x, sy = y;
        switch (*q) {
          case 0: break;
          case 1: sx = m - y; sy = x; break;
          case 2: sx = m - x; sy = m - y; break;
          default: sx = y; sy = m - x; break;
        }
        if (!masked(sy, sx)) map.push_back({sy * k + sx, y * k + x, 1.0});
      }
    }
    return map;
  }
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t x = 0; x < k; ++x) {
      if (masked(y, x)) continue;
      const Vec2 d = turn(angle, {static_cast<double>(x) - c, static_cast<double>(y) - c});
      const double tx = c + d.x, ty = c + d.y;
      const double fx = std::floor(tx), fy = std::floor(ty);
      const double ax = tx - fx, ay = ty - fy;
      const std::tuple<double, double, double> taps[4] = {
          {fx, fy, (1 - ax) * (1 - ay)}, {fx + 1, fy, ax * (1 - ay)}, {fx, fy + 1, (1 - ax) * ay}, {fx + 1, fy + 1, ax * ay}};
      for (const auto& [px, py, w] : taps) {
        if (w == 0.0 || px < 0 || py < 0 || px > static_cast<double>(k - 1) || py > static_cast<double>(k - 1)) continue;
        map.push_back({y * k + x, static_cast<std::size_t>(py) * k + static_cast<std::size_t>(px), w});
      }
    }
  }
  return map;
}

void check_square_kernel(const Tensor& t) {
  if (t.rank() < 2 || t.height() != t.width()) throw Error("kernels must be square, got " + shape_string(t.shape()));
  if (t.width() % 2 == 0) throw Error("even kernel sizes are not supported");
}

// Applies map (or its transpose) to a single plane.
void apply_map(const std::vector<KernelEntry>& map, const double* in, double* out, bool transpose) {
  for (const auto& e : map) {
    if (transpose) {
      out[e.src] += e.weight * in[e.dst];
    } else {
      out[e.dst] += e.weight * in[e.src];
    }
  }
}

Tensor rotate_kernel_impl(const Tensor& kernel, double angle, bool disk_mask, bool transpose) {
  check_square_kernel(kernel);
  const std::size_t k = kernel.width();
  const auto map = kernel_map(k, angle, disk_mask);
  Tensor out(kernel.shape());
  for (std::size_t p = 0; p < kernel.size() / (k * k); ++p) {
    apply_map(map, kernel.data() + p * k * k, out.data() + p * k * k, transpose);
  }
  return out;
}

std::size_t same_padding(std::size_t kernel, std::size_t stride) {
  if (kernel % 2 == 0) throw Error("even kernel sizes are not supported");
  if (stride < 1) throw Error("stride must be >= 1");
  return (kernel - 1) / 2;
}

// Expansion as an explicit (N, dst plane, src plane) plan shared by the
// forward map and its adjoint.
struct Expansion {
  std::size_t k;
  std::vector<std::vector<KernelEntry>> maps;  // one per r
};

Expansion plan(const CyclicGroup& g, std::size_t k) {
  Expansion e{k, {}};
  const bool mask = needs_disk_mask(g);
  for (int r = 0; r < g.order(); ++r) e.maps.push_back(kernel_map(k, g.angle_of(r), mask));
  return e;
}

Tensor lift_expand_impl(const Tensor& src, const CyclicGroup& g, bool transpose) {
  // Forward: src is base (Ko, Ci, k, k); adjoint: src is expanded grad.
  const std::size_t n = static_cast<std::size_t>(g.order());
  const std::size_t k = src.dim(3);
  const Expansion e = plan(g, k);
  const std::size_t kk = k * k;
  if (!transpose) {
    const std::size_t ko = src.dim(0), ci = src.dim(1);
    Tensor out({ko * n, ci, k, k});
    for (std::size_t o = 0; o < ko; ++o)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ci; ++c)
          apply_map(e.maps[r], src.data() + (o * ci + c) * kk, out.data() + ((o * n + r) * ci + c) * kk, false);
    return out;
  }
  const std::size_t ko = src.dim(0) / n, ci = src.dim(1);
  Tensor out({ko, ci, k, k});
  for (std::size_t o = 0; o < ko; ++o)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < ci; ++c)
        apply_map(e.maps[r], src.data() + ((o * n + r) * ci + c) * kk, out.data() + (o * ci + c) * kk, true);
  return out;
}

Tensor gconv_expand_impl(const Tensor& src, const CyclicGroup& g, bool transpose) {
  const std::size_t n = static_cast<std::size_t>(g.order());
  const std::size_t k = src.dim(src.rank() - 1);
  const Expansion e = plan(g, k);
  const std::size_t kk = k * k;
  const std::size_t ko = transpose ? src.dim(0) / n : src.dim(0);
  const std::size_t ki = transpose ? src.dim(1) / n : src.dim(1);
  Tensor out = transpose ? Tensor({ko, ki, n, k, k}) : Tensor({ko * n, ki * n, k, k});
  for (std::size_t o = 0; o < ko; ++o) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < ki; ++c) {
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t jb = (j + n - r) % n;
          const std::size_t base_off = ((o * ki + c) * n + jb) * kk;
          const std::size_t exp_off = ((o * n + r) * (ki * n) + c * n + j) * kk;
          if (transpose) {
            apply_map(e.maps[r], src.data() + exp_off, out.data() + base_off, true);
          } else {
            apply_map(e.maps[r], src.data() + base_off, out.data() + exp_off, false);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

bool needs_disk_mask(const CyclicGroup& g) { return 4 % g.order() != 0; }

Tensor rotate_kernel(const Tensor& kernel, double angle, bool disk_mask) {
  return rotate_kernel_impl(kernel, angle, disk_mask, false);
}

Tensor rotate_kernel_adjoint(const Tensor& kernel, double angle, bool disk_mask) {
  return rotate_kernel_impl(kernel, angle, disk_mask, true);
}

LiftConvLayer::LiftConvLayer(std::string name, CyclicGroup g, std::size_t c_in, std::size_t k_out,
                             std::size_t kernel, SplitMix64& rng, std::size_t s)
    : group(g), stride(s), padding(same_padding(kernel, s)) {
  const double fan_in = static_cast<double>(c_in * kernel * kernel);
  weight = Param(std::move(name), random_normal({k_out, c_in, kernel, kernel}, rng, std::sqrt(2.0 / fan_in)));
}

GConvLayer::GConvLayer(std::string name, CyclicGroup g, std::size_t k_in, std::size_t k_out,
                       std::size_t kernel, SplitMix64& rng, std::size_t s)
    : group(g), stride(s), padding(same_padding(kernel, s)) {
  const auto n = static_cast<std::size_t>(g.order());
  const double fan_in = static_cast<double>(k_in * n * kernel * kernel);
  weight = Param(std::move(name), random_normal({k_out, k_in, n, kernel, kernel}, rng, std::sqrt(2.0 / fan_in)));
}

GroupBatchNorm::GroupBatchNorm(std::string name, std::size_t channels, double e)
    : gamma(name + ".gamma", Tensor({channels}, 1.0)),
      beta(name + ".beta", Tensor({channels}, 0.0)),
      running_mean({channels}, 0.0),
      running_var({channels}, 1.0),
      eps(e) {}

Tensor expand_lift_filters(const Tensor& base, const CyclicGroup& group) {
  if (base.rank() != 4) throw Error("lift filters must be (K_out, C_in, k, k)");
  check_square_kernel(base);
  return lift_expand_impl(base, group, false);
}

Tensor expand_lift_filters(const LiftConvLayer& layer) { return expand_lift_filters(layer.weight.value, layer.group); }

Tensor expand_gconv_filters(const Tensor& base, const CyclicGroup& group) {
  if (base.rank() != 5 || static_cast<int>(base.dim(2)) != group.order()) {
    throw Error("group filters must be (K_out, K_in, N, k, k), got " + shape_string(base.shape()));
  }
  check_square_kernel(base);
  return gconv_expand_impl(base, group, false);
}

Tensor expand_gconv_filters(const GConvLayer& layer) { return expand_gconv_filters(layer.weight.value, layer.group); }

std::size_t plain_equivalent_parameters(const GConvLayer& layer) {
  const auto n = static_cast<std::size_t>(layer.group.order());
  const Tensor& w = layer.weight.value;
  return (w.dim(0) * n) * (w.dim(1) * n) * w.dim(3) * w.dim(4);
}

std::size_t plain_equivalent_parameters(const LiftConvLayer& layer) {
  const auto n = static_cast<std::size_t>(layer.group.order());
  const Tensor& w = layer.weight.value;
  return (w.dim(0) * n) * w.dim(1) * w.dim(2) * w.dim(3);
}

namespace ad {

Var expand_lift(Var base, const CyclicGroup& group) {
  Tensor out = expand_lift_filters(base.value(), group);
  return base.tape().record("expand_lift", std::move(out), {base}, [group](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = lift_expand_impl(g, group, true);
  });
}

Var expand_gconv(Var base, const CyclicGroup& group) {
  Tensor out = expand_gconv_filters(base.value(), group);
  return base.tape().record("expand_gconv", std::move(out), {base}, [group](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = gconv_expand_impl(g, group, true);
  });
}

Var lift(Var image, LiftConvLayer& layer) {
  Tape& t = image.tape();
  Var w = expand_lift(t.param(layer.weight), layer.group);
  Var out = conv2d(image, w, layer.stride, layer.padding);
  const Tensor& v = out.value();
  const auto n = static_cast<std::size_t>(layer.group.order());
  return reshape(out, {v.dim(0) / n, n, v.dim(1), v.dim(2)});
}

Var gconv(Var field, GConvLayer& layer) {
  Tape& t = field.tape();
  const Tensor& in = field.value();
  const auto n = static_cast<std::size_t>(layer.group.order());
  if (in.rank() != 4 || in.dim(1) != n) {
    throw Error("group conv input must be (K, " + std::to_string(n) + ", H, W), got " + shape_string(in.shape()));
  }
  if (in.dim(0) != layer.weight.value.dim(1)) {
    throw Error("group conv expects " + std::to_string(layer.weight.value.dim(1)) + " base channels, got " +
                std::to_string(in.dim(0)));
  }
  Var w = expand_gconv(t.param(layer.weight), layer.group);
  Var out = conv2d(field, w, layer.stride, layer.padding);
  const Tensor& v = out.value();
  return reshape(out, {v.dim(0) / n, n, v.dim(1), v.dim(2)});
}

Var group_norm(Var field, GroupBatchNorm& bn) {
  Tape& t = field.tape();
  Var gamma = t.param(bn.gamma);
  Var beta = t.param(bn.beta);
  const Tensor& x = field.value();
  const std::size_t k = bn.gamma.value.size();
  if (x.rank() < 3 || x.dim(0) != k) {
    throw Error("group norm over " + std::to_string(k) + " channels got " + shape_string(x.shape()));
  }
  const std::size_t m = x.size() / k;
  Tensor xhat(x.shape());
  Tensor inv_std({k});
  Tensor y(x.shape());
  for (std::size_t c = 0; c < k; ++c) {
    const double* xc = x.data() + c * m;
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += xc[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + bn.eps);
    inv_std[c] = is;
    for (std::size_t i = 0; i < m; ++i) {
      xhat[c * m + i] = (xc[i] - mean) * is;
      y[c * m + i] = bn.gamma.value[c] * xhat[c * m + i] + bn.beta.value[c];
    }
  }
  Tape* tp = &t;
  const std::size_t gi_id = gamma.id();
  return t.record("group_norm", std::move(y), {field, gamma, beta},
                  [tp, gi_id, xhat, inv_std, k, m](const Tensor& g, std::vector<Tensor>& gi) {
                    const Tensor& gam = tp->value(gi_id);
                    Tensor dx(xhat.shape()), dgamma({k}), dbeta({k});
                    for (std::size_t c = 0; c < k; ++c) {
                      double sg = 0.0, sgx = 0.0;
                      for (std::size_t i = 0; i < m; ++i) {
                        sg += g[c * m + i];
                        sgx += g[c * m + i] * xhat[c * m + i];
                      }
                      dbeta[c] = sg;
                      dgamma[c] = sgx;
                      const double mg = sg / static_cast<double>(m), mgx = sgx / static_cast<double>(m);
                      const double s = gam[c] * inv_std[c];
                      for (std::size_t i = 0; i < m; ++i) {
                        dx[c * m + i] = s * (g[c * m + i] - mg - xhat[c * m + i] * mgx);
                      }
                    }
                    gi[0] = std::move(dx);
                    gi[1] = std::move(dgamma);
                    gi[2] = std::move(dbeta);
                  });
}

Var gmaxpool(Var field) {
  const Tensor& x = field.value();
  if (x.height() % 2 != 0 || x.width() % 2 != 0) {
    throw Error("group max pooling needs even spatial dims, got " + shape_string(x.shape()));
  }
  return maxpool2d(field, 2, 2);
}

}  // namespace ad

RegularField lift_forward(const Tensor& image, const LiftConvLayer& layer) {
  Tape t(false);
  LiftConvLayer copy = layer;
  return RegularField(layer.group, ad::lift(t.constant(image), copy).value());
}

RegularField gconv_forward(const RegularField& f, const GConvLayer& layer) {
  if (!(f.group() == layer.group)) throw Error("field group does not match layer group");
  Tape t(false);
  GConvLayer copy = layer;
  return RegularField(layer.group, ad::gconv(t.constant(f.values()), copy).value());
}

RegularField gbn_forward(const RegularField& f, const GroupBatchNorm& bn, bool use_running_stats) {
  if (!use_running_stats) {
    Tape t(false);
    GroupBatchNorm copy = bn;
    return RegularField(f.group(), ad::group_norm(t.constant(f.values()), copy).value());
  }
  const std::size_t k = f.base_channels();
  if (bn.gamma.value.size() != k) throw Error("batch norm channel count mismatch");
  Tensor y = f.values();
  const std::size_t m = y.size() / k;
  for (std::size_t c = 0; c < k; ++c) {
    const double s = bn.gamma.value[c] / std::sqrt(bn.running_var[c] + bn.eps);
    for (std::size_t i = 0; i < m; ++i) {
      y[c * m + i] = s * (y[c * m + i] - bn.running_mean[c]) + bn.beta.value[c];
    }
  }
  return RegularField(f.group(), std::move(y));
}

RegularField grelu_forward(const RegularField& f) {
  Tensor y = f.values();
  for (auto& v : y.values()) v = std::max(v, 0.0);
  return RegularField(f.group(), std::move(y));
}

RegularField gmaxpool_forward(const RegularField& f) {
  Tape t(false);
  return RegularField(f.group(), ad::gmaxpool(t.constant(f.values())).value());
}

}  // namespace regconv
