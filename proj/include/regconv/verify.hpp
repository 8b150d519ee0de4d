#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "regconv/backbone.hpp"
#include "regconv/roi_align.hpp"
#include "regconv/synth.hpp"
#include "regconv/train.hpp"

namespace regconv {

/// Border width ceil(side / 8) excluded from every equivariance
/// measurement; zero padding breaks equivariance near the crop boundary.
std::size_t interior_margin(std::size_t side);

/// ||a - b|| / max(||b||, eps) over the interior of the last two dims.
double interior_relative_error(const Tensor& a, const Tensor& b, double eps = 1e-12);

/// Random test image: white noise blurred with a Gaussian of width sigma,
/// faded to zero outside the inscribed disc (so rotated copies lose no
/// content) and scaled to unit RMS. Shape (channels, side, side).
Tensor smooth_random_image(std::uint64_t seed, std::size_t side, std::size_t channels, double sigma);

using FieldModel = std::function<std::vector<RegularField>(const Tensor&)>;

/// Rotation by g.angle_of(k) of a field under C_M: planes turned about the
/// centre, orientation channels shifted by k*M/N. M = 1 gives the plain
/// spatial rotation; M = N is act_on_field.
RegularField transform_field(const RegularField& f, const CyclicGroup& g, int k);

/// ||Phi(T_k I) - T_k Phi(I)|| / max(||T_k Phi(I)||, eps) over the
/// interior of every output level (sums of squares pooled across levels).
/// per_level, when given, receives the same ratio for each level alone.
double equivariance_error(const FieldModel& model, const Tensor& img, const CyclicGroup& g, int k,
                          std::vector<double>* per_level = nullptr);
double equivariance_error(Backbone& model, const Tensor& img, const CyclicGroup& g, int k,
                          std::vector<double>* per_level = nullptr);

struct EquivarianceOptions {
  std::size_t trials = 20;
  std::size_t side = 128;
  double sigma = 16.0;
  std::uint64_t seed = 1;
};

struct EquivarianceReport {
  int group_order = 0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::size_t margin = 0;
  std::vector<double> mean_by_k, max_by_k;  // index k = 1 .. N-1 stored at k
  std::vector<double> trial_max;            // worst k per trial
  std::vector<double> plain_trial_max;      // same for the plain counterpart
  std::vector<double> plain_trial_min;      // best k per trial for the plain counterpart
  double max_error = 0.0;
  double plain_min_error = 0.0;
  double seconds = 0.0;
};

/// Runs equivariance_error for every non-identity k on `trials` smooth
/// random inputs, for the model built from cfg and its plain counterpart.
EquivarianceReport equivariance_suite(const BackboneConfig& cfg, const EquivarianceOptions& opt);

enum class AlignMode { SpatialOnly, MaxPool, RiRoI };

std::string to_string(AlignMode m);

struct RoIInvariance {
  double cov = 0.0;           // std / mean of the feature norms
  double feature_cov = 0.0;   // RMS deviation from the mean feature / norm of the mean feature
  double max_pairwise = 0.0;  // max over pairs of ||a - b|| / max(||a||, ||b||)
};

/// Pooled features of one object in each of the N rotated copies of the
/// scene, in order k = 0 .. N-1.
std::vector<AlignedRoIFeature> roi_features(Backbone& model, const SyntheticScene& scene, std::size_t object,
                                            const CyclicGroup& g, AlignMode mode, const AlignSpec& spec,
                                            int level = 0);
RoIInvariance roi_invariance(const std::vector<AlignedRoIFeature>& copies);

/// Renders the scene at all N rotations of g (rotate_scene), runs the
/// model and pools the object's rotated box with the given mode.
/// spec.interpolation selects l for RiRoI. Throws "object not interior"
/// when a rotated copy would leave the margin.
RoIInvariance roi_invariance_error(Backbone& model, const SyntheticScene& scene, std::size_t object,
                                   const CyclicGroup& g, AlignMode mode, const AlignSpec& spec, int level = 0);

struct ParamComparison {
  std::string name;
  std::size_t equivariant = 0;
  std::size_t plain = 0;
  double ratio() const { return static_cast<double>(equivariant) / static_cast<double>(plain); }
};

/// Equivariant layer against a plain k x k conv with c_in -> c_out
/// channels; the budgets must match (K_in N = c_in, K_out N = c_out).
ParamComparison param_ratio(const GConvLayer& layer, std::size_t c_in, std::size_t c_out, std::size_t kernel);
/// Whole backbone against its plain counterpart.
ParamComparison param_ratio(const BackboneConfig& cfg);

struct AugmentationRun {
  Variant variant = Variant::Plain;
  std::uint64_t seed = 0;
  double rotated_accuracy = 0.0;
  double upright_accuracy = 0.0;
  double seconds = 0.0;
  std::vector<CurvePoint> curve;
};

struct AugmentationReport {
  std::vector<AugmentationRun> runs;
  /// Mean rotated-test accuracy of a variant over its runs.
  double mean_accuracy(Variant v) const;
};

/// Trains each variant once per seed on upright scenes (one dataset per
/// seed, shared by the variants) and evaluates on rotated test scenes.
AugmentationReport augmentation_comparison(const ToyTaskConfig& cfg, const std::vector<Variant>& variants,
                                           const std::vector<std::uint64_t>& seeds);

struct GradCheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Central-difference checks (64-bit, eps 1e-5) of every differentiable
/// library op at random smooth points.
std::vector<GradCheckEntry> gradient_checks(std::uint64_t seed = 7);

}  // namespace regconv
