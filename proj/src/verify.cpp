#include "regconv/verify.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "regconv/ops.hpp"
#include "regconv/parallel.hpp"
#include "regconv/random.hpp"

namespace regconv {

namespace {

struct SquaredNorms {
  double diff = 0.0;
  double ref = 0.0;
};

SquaredNorms interior_norms(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t h = a.height(), w = a.width();
  const std::size_t m = interior_margin(std::min(h, w));
  SquaredNorms s;
  for (std::size_t p = 0; p < a.planes(); ++p) {
    const double* pa = a.data() + p * h * w;
    const double* pb = b.data() + p * h * w;
    for (std::size_t y = m; y + m < h; ++y) {
      for (std::size_t x = m; x + m < w; ++x) {
        const double d = pa[y * w + x] - pb[y * w + x];
        s.diff += d * d;
        s.ref += pb[y * w + x] * pb[y * w + x];
      }
    }
  }
  return s;
}

double ratio(const SquaredNorms& s, double eps) { return std::sqrt(s.diff) / std::max(std::sqrt(s.ref), eps); }

Tensor gaussian_blur(const Tensor& t, double sigma) {
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    total += k[static_cast<std::size_t>(i + r)] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
  }
  for (auto& v : k) v /= total;
  const auto h = static_cast<std::ptrdiff_t>(t.height()), w = static_cast<std::ptrdiff_t>(t.width());
  Tensor tmp(t.shape()), out(t.shape());
  for (std::size_t p = 0; p < t.planes(); ++p) {
    const double* src = t.data() + p * t.height() * t.width();
    double* mid = tmp.data() + p * t.height() * t.width();
    double* dst = out.data() + p * t.height() * t.width();
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = std::max(-r, -x); i <= std::min(r, w - 1 - x); ++i) {
          acc += k[static_cast<std::size_t>(i + r)] * src[y * w + x + i];
        }
        mid[y * w + x] = acc;
      }
    }
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = std::max(-r, -y); i <= std::min(r, h - 1 - y); ++i) {
          acc += k[static_cast<std::size_t>(i + r)] * mid[(y + i) * w + x];
        }
        dst[y * w + x] = acc;
      }
    }
  }
  return out;
}

double pairwise_rel(const Tensor& a, const Tensor& b) {
  return l2_norm(a - b) / std::max({l2_norm(a), l2_norm(b), 1e-12});
}

}  // namespace

std::size_t interior_margin(std::size_t side) { return (side + 7) / 8; }

double interior_relative_error(const Tensor& a, const Tensor& b, double eps) {
  return ratio(interior_norms(a, b), eps);
}

Tensor smooth_random_image(std::uint64_t seed, std::size_t side, std::size_t channels, double sigma) {
  if (side < 2 || channels < 1) throw Error("test image needs side >= 2 and at least one channel");
  if (!(sigma > 0)) throw Error("blur width must be > 0");
  SplitMix64 rng(seed);
  Tensor img = gaussian_blur(random_normal({channels, side, side}, rng), sigma);
  const double c = (static_cast<double>(side) - 1.0) / 2.0;
  const double radius = static_cast<double>(side) / 2.0 - 1.0;
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double r = std::hypot(static_cast<double>(x) - c, static_cast<double>(y) - c) / radius;
      const double fade = r <= 0.5 ? 1.0 : r >= 1.0 ? 0.0 : 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * (r - 0.5));
      for (std::size_t ch = 0; ch < channels; ++ch) img.at(ch, y, x) *= fade;
    }
  }
  const double rms = l2_norm(img) / std::sqrt(static_cast<double>(img.size()));
  if (rms > 0) img *= 1.0 / rms;
  return img;
}

RegularField transform_field(const RegularField& f, const CyclicGroup& g, int k) {
  const int m = f.group().order();
  const int n = g.order();
  if (m == 1) return RegularField(f.group(), rotate_planar(f.values(), g.angle_of(k)));
  if ((k * m) % n != 0) {
    throw Error("rotation " + std::to_string(k) + " of C" + std::to_string(n) + " does not act on a C" +
                std::to_string(m) + " field");
  }
  if (m == n) return act_on_field(f, k);
  const int shift = k * m / n;
  const std::size_t kk = f.base_channels(), nn = f.orientations(), plane = f.height() * f.width();
  Tensor shifted(f.values().shape());
  for (std::size_t c = 0; c < kk; ++c) {
    for (std::size_t i = 0; i < nn; ++i) {
      const std::size_t src = (i + nn - static_cast<std::size_t>(shift) % nn) % nn;
      std::copy_n(f.values().data() + (c * nn + src) * plane, plane, shifted.data() + (c * nn + i) * plane);
    }
  }
  return RegularField(f.group(), rotate_planar(shifted, g.angle_of(k)));
}

double equivariance_error(const FieldModel& model, const Tensor& img, const CyclicGroup& g, int k,
                          std::vector<double>* per_level) {
  if (img.rank() != 3 || img.height() != img.width()) throw Error("equivariance test needs a square (C, H, W) image");
  const auto rotated = model(rotate_planar(img, g.angle_of(k)));
  const auto plain = model(img);
  if (rotated.size() != plain.size()) throw Error("model returned a different number of levels");
  SquaredNorms total;
  if (per_level) per_level->clear();
  for (std::size_t l = 0; l < plain.size(); ++l) {
    const auto expected = transform_field(plain[l], g, k);
    const auto s = interior_norms(rotated[l].values(), expected.values());
    total.diff += s.diff;
    total.ref += s.ref;
    if (per_level) per_level->push_back(ratio(s, 1e-12));
  }
  return ratio(total, 1e-12);
}

double equivariance_error(Backbone& model, const Tensor& img, const CyclicGroup& g, int k,
                          std::vector<double>* per_level) {
  return equivariance_error([&model](const Tensor& t) { return model.forward(t); }, img, g, k, per_level);
}

EquivarianceReport equivariance_suite(const BackboneConfig& cfg, const EquivarianceOptions& opt) {
  if (opt.trials < 1) throw Error("trial count must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  const CyclicGroup g(cfg.group_order);
  const int n = g.order();
  Backbone equi(cfg, mix_seed(opt.seed, 1));
  Backbone plain(cfg.plain_counterpart(), mix_seed(opt.seed, 2));

  EquivarianceReport r;
  r.group_order = n;
  r.trials = opt.trials;
  r.seed = opt.seed;
  r.margin = interior_margin(opt.side);
  std::vector<std::vector<double>> err(opt.trials, std::vector<double>(static_cast<std::size_t>(n), 0.0));
  std::vector<std::vector<double>> plain_err = err;
  parallel_for(opt.trials, [&](std::size_t t) {
    const Tensor img = smooth_random_image(mix_seed(opt.seed, 100 + t), opt.side, cfg.in_channels, opt.sigma);
    // Reference outputs once per trial; rotated inputs once per k.
    const auto eq_ref = equi.forward(img);
    const auto pl_ref = plain.forward(img);
    for (int k = 1; k < n; ++k) {
      const Tensor rot = rotate_planar(img, g.angle_of(k));
      SquaredNorms se, sp;
      const auto eq_rot = equi.forward(rot);
      const auto pl_rot = plain.forward(rot);
      for (std::size_t l = 0; l < eq_ref.size(); ++l) {
        const auto a = interior_norms(eq_rot[l].values(), transform_field(eq_ref[l], g, k).values());
        se.diff += a.diff;
        se.ref += a.ref;
        const auto b = interior_norms(pl_rot[l].values(), transform_field(pl_ref[l], g, k).values());
        sp.diff += b.diff;
        sp.ref += b.ref;
      }
      err[t][static_cast<std::size_t>(k)] = ratio(se, 1e-12);
      plain_err[t][static_cast<std::size_t>(k)] = ratio(sp, 1e-12);
    }
  });

  r.mean_by_k.assign(static_cast<std::size_t>(n), 0.0);
  r.max_by_k.assign(static_cast<std::size_t>(n), 0.0);
  r.plain_min_error = n > 1 ? 1e300 : 0.0;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    double worst = 0.0, pworst = 0.0, pbest = n > 1 ? 1e300 : 0.0;
    for (int k = 1; k < n; ++k) {
      const auto ki = static_cast<std::size_t>(k);
      r.mean_by_k[ki] += err[t][ki] / static_cast<double>(opt.trials);
      r.max_by_k[ki] = std::max(r.max_by_k[ki], err[t][ki]);
      worst = std::max(worst, err[t][ki]);
      pworst = std::max(pworst, plain_err[t][ki]);
      pbest = std::min(pbest, plain_err[t][ki]);
    }
    r.trial_max.push_back(worst);
    r.plain_trial_max.push_back(pworst);
    r.plain_trial_min.push_back(pbest);
    r.max_error = std::max(r.max_error, worst);
    r.plain_min_error = std::min(r.plain_min_error, pbest);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::string to_string(AlignMode m) {
  switch (m) {
    case AlignMode::SpatialOnly: return "spatial";
    case AlignMode::MaxPool: return "maxpool";
    case AlignMode::RiRoI: return "riroi";
  }
  return "unknown";
}

std::vector<AlignedRoIFeature> roi_features(Backbone& model, const SyntheticScene& scene, std::size_t object,
                                            const CyclicGroup& g, AlignMode mode, const AlignSpec& spec, int level) {
  if (object >= scene.annotations.size()) throw Error("scene has no object " + std::to_string(object));
  const int n = g.order();
  std::vector<SyntheticScene> copies;
  for (int k = 0; k < n; ++k) copies.push_back(rotate_scene(scene, k, g));
  std::vector<AlignedRoIFeature> feats(copies.size());
  parallel_for(copies.size(), [&](std::size_t k) {
    const auto levels = model.forward(copies[k].image);
    if (level < 0 || static_cast<std::size_t>(level) >= levels.size()) {
      throw Error("no pyramid level " + std::to_string(level));
    }
    const RRoI box = rroi_to_level(copies[k].annotations[object].box, level);
    const auto sp = rroi_align_spatial(levels[static_cast<std::size_t>(level)], box, spec);
    switch (mode) {
      case AlignMode::SpatialOnly: feats[k] = sp; break;
      case AlignMode::MaxPool: feats[k] = orientation_maxpool(sp); break;
      case AlignMode::RiRoI: feats[k] = orientation_align(sp, box.theta, spec); break;
    }
  });
  return feats;
}

RoIInvariance roi_invariance(const std::vector<AlignedRoIFeature>& copies) {
  RoIInvariance r;
  if (copies.empty()) return r;
  const auto n = static_cast<double>(copies.size());
  std::vector<double> norms;
  for (const auto& f : copies) norms.push_back(l2_norm(f.values));
  double mean = 0.0, var = 0.0;
  for (double v : norms) mean += v;
  mean /= n;
  for (double v : norms) var += (v - mean) * (v - mean);
  var /= n;
  r.cov = mean > 0 ? std::sqrt(var) / mean : 0.0;
  Tensor centre = Tensor::zeros_like(copies[0].values);
  for (const auto& f : copies) centre += f.values;
  centre *= 1.0 / n;
  double dev = 0.0;
  for (const auto& f : copies) dev += std::pow(l2_norm(f.values - centre), 2);
  const double centre_norm = l2_norm(centre);
  r.feature_cov = centre_norm > 0 ? std::sqrt(dev / n) / centre_norm : 0.0;
  for (std::size_t a = 0; a < copies.size(); ++a) {
    for (std::size_t b = a + 1; b < copies.size(); ++b) {
      r.max_pairwise = std::max(r.max_pairwise, pairwise_rel(copies[a].values, copies[b].values));
    }
  }
  return r;
}

RoIInvariance roi_invariance_error(Backbone& model, const SyntheticScene& scene, std::size_t object,
                                   const CyclicGroup& g, AlignMode mode, const AlignSpec& spec, int level) {
  return roi_invariance(roi_features(model, scene, object, g, mode, spec, level));
}

ParamComparison param_ratio(const GConvLayer& layer, std::size_t c_in, std::size_t c_out, std::size_t kernel) {
  const auto n = static_cast<std::size_t>(layer.group.order());
  const Tensor& w = layer.weight.value;
  if (w.dim(1) * n != c_in || w.dim(0) * n != c_out || w.dim(3) != kernel) {
    throw Error("mismatched channel budgets: K_in*N=" + std::to_string(w.dim(1) * n) + ", K_out*N=" +
                std::to_string(w.dim(0) * n) + " vs plain " + std::to_string(c_in) + "->" + std::to_string(c_out));
  }
  return {layer.weight.name, layer.parameter_count(), c_in * c_out * kernel * kernel};
}

ParamComparison param_ratio(const BackboneConfig& cfg) {
  const Backbone equi(cfg, 0);
  const Backbone plain(cfg.plain_counterpart(), 0);
  return {"TOTAL", equi.parameter_count(), plain.parameter_count()};
}

double AugmentationReport::mean_accuracy(Variant v) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.variant == v) {
      total += r.rotated_accuracy;
      ++n;
    }
  }
  if (n == 0) throw Error("no runs of variant " + to_string(v));
  return total / static_cast<double>(n);
}

AugmentationReport augmentation_comparison(const ToyTaskConfig& cfg, const std::vector<Variant>& variants,
                                           const std::vector<std::uint64_t>& seeds) {
  if (variants.empty() || seeds.empty()) throw Error("comparison needs at least one variant and one seed");
  AugmentationReport rep;
  for (const auto seed : seeds) {
    const auto data = std::make_shared<const ToyData>(make_toy_data(cfg, seed));
    for (const auto v : variants) {
      const auto r = train_toy(cfg, v, seed, data);
      rep.runs.push_back({v, seed, r.accuracy, r.upright_accuracy, r.seconds, r.curve});
    }
  }
  return rep;
}

std::vector<GradCheckEntry> gradient_checks(std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<GradCheckEntry> out;
  auto check = [&](const std::string& name, const std::function<Var(Tape&)>& f, const std::vector<Param*>& ps) {
    const auto r = grad_check(f, ps, 1e-5, 64, rng.next());
    out.push_back({name, r.max_rel_error, r.coordinates});
  };
  // Inputs kept away from the kinks of relu and max.
  auto away_from_zero = [&rng](const Shape& s) {
    Tensor t = random_normal(s, rng);
    for (auto& v : t.values()) v += v < 0 ? -0.1 : 0.1;
    return t;
  };
  auto distinct = [&rng](const Shape& s) {
    Tensor t(s);
    std::vector<std::size_t> order(t.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
    for (std::size_t i = 0; i < order.size(); ++i) t[order[i]] = 0.1 * static_cast<double>(i) - 0.05 * order.size();
    return t;
  };

  {
    Param x("x", random_normal({2, 7, 7}, rng));
    Param w("w", random_normal({3, 2, 3, 3}, rng));
    const Tensor r = random_normal({3, 7, 7}, rng);
    check("conv2d_plain", [&](Tape& t) { return ad::dot(ad::conv2d(t.param(x), t.param(w), 1, 1), r); }, {&x, &w});
  }
  for (int n : {4, 8}) {
    const CyclicGroup g(n);
    const auto nn = static_cast<std::size_t>(n);
    const std::string suffix = " N=" + std::to_string(n);
    {
      Param img("image", random_normal({2, 9, 9}, rng));
      LiftConvLayer layer("lift", g, 2, 2, 3, rng);
      const Tensor r = random_normal({2, nn, 9, 9}, rng);
      check("lift" + suffix, [&](Tape& t) { return ad::dot(ad::lift(t.param(img), layer), r); }, {&img, &layer.weight});
    }
    {
      Param field("field", random_normal({2, nn, 8, 8}, rng));
      GConvLayer layer("gconv", g, 2, 2, 3, rng);
      const Tensor r = random_normal({2, nn, 8, 8}, rng);
      check("gconv" + suffix, [&](Tape& t) { return ad::dot(ad::gconv(t.param(field), layer), r); },
            {&field, &layer.weight});
    }
  }
  {
    Param field("field", random_normal({3, 4, 5, 5}, rng));
    GroupBatchNorm bn("gbn", 3);
    bn.gamma.value = random_uniform({3}, rng, 0.5, 1.5);
    bn.beta.value = random_normal({3}, rng);
    const Tensor r = random_normal({3, 4, 5, 5}, rng);
    check("gbn", [&](Tape& t) { return ad::dot(ad::group_norm(t.param(field), bn), r); },
          {&field, &bn.gamma, &bn.beta});
  }
  {
    Param field("field", away_from_zero({2, 4, 5, 5}));
    const Tensor r = random_normal({2, 4, 5, 5}, rng);
    check("grelu", [&](Tape& t) { return ad::dot(ad::relu(t.param(field)), r); }, {&field});
  }
  {
    Param field("field", distinct({2, 4, 6, 6}));
    const Tensor r = random_normal({2, 4, 3, 3}, rng);
    check("gmaxpool", [&](Tape& t) { return ad::dot(ad::gmaxpool(t.param(field)), r); }, {&field});
  }
  const RRoI box = make_rroi(5.3, 4.6, 6.0, 4.0, 0.7);
  {
    AlignSpec spec;
    spec.output_size = 3;
    Param field("field", random_normal({2, 4, 10, 10}, rng));
    const Tensor r = random_normal({2, 4, 3, 3}, rng);
    check("rroi_align_spatial", [&](Tape& t) { return ad::dot(ad::rroi_align_spatial(t.param(field), box, spec), r); },
          {&field});
  }
  for (int l : {1, 2, 4}) {
    AlignSpec spec;
    spec.output_size = 3;
    spec.interpolation = l;
    Param fr("fr", random_normal({2, 8, 3, 3}, rng));
    const Tensor r = random_normal({2, 8, 3, 3}, rng);
    check("orientation_align l=" + std::to_string(l),
          [&](Tape& t) { return ad::dot(ad::orientation_align(t.param(fr), 1.1, spec), r); }, {&fr});
  }
  {
    AlignSpec spec;
    spec.output_size = 3;
    Param field("field", random_normal({2, 8, 10, 10}, rng));
    const Tensor r = random_normal({2, 8, 3, 3}, rng);
    check("riroi_align", [&](Tape& t) { return ad::dot(ad::riroi_align(t.param(field), box, spec), r); }, {&field});
  }
  return out;
}

}  // namespace regconv
