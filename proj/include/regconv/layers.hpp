#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "regconv/autodiff.hpp"
#include "regconv/group.hpp"
#include "regconv/random.hpp"

namespace regconv {

// Filter expansion convention. Slice r of an expanded bank is the base
// filter turned by +2*pi*r/N (content moves counter-clockwise as displayed).
// Paired with act_on_field's shift out[:, i] = rot(f[:, (i - k) mod N]),
// this makes lift and group convolutions commute with the group action;
// the equivariance tests pin the pair.
//
// Turns that are not multiples of pi/2 splat each tap bilinearly onto its
// turned position (the transpose of bilinear resampling). Splatting keeps
// the filter's sum and centroid exact; taps outside the inscribed disk are
// masked for such groups so nothing lands outside the support.

/// Whether filters of this group need the inscribed-disk support mask.
bool needs_disk_mask(const CyclicGroup& g);

/// Turns a single k x k kernel (any leading dims, last two spatial).
Tensor rotate_kernel(const Tensor& kernel, double angle, bool disk_mask);
Tensor rotate_kernel_adjoint(const Tensor& kernel, double angle, bool disk_mask);

struct LiftConvLayer {
  LiftConvLayer() = default;
  /// Base filters (K_out, C_in, k, k), zero-mean normal init with variance
  /// 2 / (C_in * k * k).
  LiftConvLayer(std::string name, CyclicGroup group, std::size_t c_in, std::size_t k_out,
                std::size_t kernel, SplitMix64& rng, std::size_t stride = 1);

  CyclicGroup group{1};
  Param weight;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t parameter_count() const { return weight.value.size(); }
};

struct GConvLayer {
  GConvLayer() = default;
  /// Base filters (K_out, K_in, N, k, k), variance 2 / (K_in * N * k * k).
  GConvLayer(std::string name, CyclicGroup group, std::size_t k_in, std::size_t k_out,
             std::size_t kernel, SplitMix64& rng, std::size_t stride = 1);

  CyclicGroup group{1};
  Param weight;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t parameter_count() const { return weight.value.size(); }
};

/// Normalisation with statistics shared over (N, H, W) per base channel.
struct GroupBatchNorm {
  GroupBatchNorm() = default;
  GroupBatchNorm(std::string name, std::size_t channels, double eps = 1e-5);

  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  std::size_t parameter_count() const { return gamma.value.size() + beta.value.size(); }
};

/// (K_out, C_in, k, k) -> (K_out * N, C_in, k, k), row o*N + r is slice r.
Tensor expand_lift_filters(const Tensor& base, const CyclicGroup& group);
Tensor expand_lift_filters(const LiftConvLayer& layer);

/// (K_out, K_in, N, k, k) -> (K_out * N, K_in * N, k, k) with
/// out[o*N + r, c*N + j] = turn_r(base[o, c, (j - r) mod N]).
Tensor expand_gconv_filters(const Tensor& base, const CyclicGroup& group);
Tensor expand_gconv_filters(const GConvLayer& layer);

/// Parameters of the ordinary convolution with the same effective channel
/// budget (K * N channels in and out).
std::size_t plain_equivalent_parameters(const GConvLayer& layer);
std::size_t plain_equivalent_parameters(const LiftConvLayer& layer);

RegularField lift_forward(const Tensor& image, const LiftConvLayer& layer);
RegularField gconv_forward(const RegularField& f, const GConvLayer& layer);
/// Normalises with per-sample statistics over (N, H, W). With
/// use_running_stats the stored running mean/var are applied instead.
RegularField gbn_forward(const RegularField& f, const GroupBatchNorm& bn, bool use_running_stats = false);
RegularField grelu_forward(const RegularField& f);
RegularField gmaxpool_forward(const RegularField& f);

namespace ad {

Var expand_lift(Var base, const CyclicGroup& group);
Var expand_gconv(Var base, const CyclicGroup& group);

/// Tape versions. Field-valued Vars hold (K, N, H, W) tensors.
Var lift(Var image, LiftConvLayer& layer);
Var gconv(Var field, GConvLayer& layer);
Var group_norm(Var field, GroupBatchNorm& bn);
Var gmaxpool(Var field);

}  // namespace ad

}  // namespace regconv
