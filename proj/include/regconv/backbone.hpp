#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "regconv/layers.hpp"

namespace regconv {

struct BackboneConfig {
  int group_order = 4;
  std::size_t in_channels = 1;
  std::size_t stem_width = 8;
  std::vector<std::size_t> widths{8, 8};  // base channels K per stage
  std::vector<std::size_t> blocks{1, 1};  // residual blocks per stage
  std::size_t fpn_width = 8;
  std::size_t kernel = 3;

  void validate() const;
  std::size_t stages() const { return widths.size(); }
  /// Same topology with N = 1 and every width multiplied by N, i.e. the
  /// ordinary CNN with the same effective channel budget.
  BackboneConfig plain_counterpart() const;
};

/// The small two-stage configuration used by the verification suites and
/// the toy task: stem 4, stage widths {4, 4}, one block each, FPN width 4.
BackboneConfig toy_backbone_config(int group_order);

/// Miniature rotation-equivariant ResNet + FPN.
///
///   stem:    lift conv
///   stage s: [gmaxpool if s > 0], blocks of
///            gconv-gnorm-relu-gconv-gnorm + skip (1x1 gconv + gnorm when
///            the width changes), relu
///   FPN:     1x1 lateral gconv per stage, nearest 2x top-down upsampling
///            and addition, 3x3 gconv smoothing
///
/// Downsampling uses 2x2 max pooling: stride-2 sampling of an even grid is
/// not symmetric about the centre, which would break exact C4 equivariance.
/// A config with no stages is the stem alone, i.e. a single lift conv.
class Backbone {
 public:
  Backbone(BackboneConfig cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  CyclicGroup group() const { return CyclicGroup(cfg_.group_order); }

  /// One output per pyramid level, level s at stride 2^s. When trace is
  /// given, every intermediate field is appended in evaluation order.
  std::vector<Var> forward(Var image, std::vector<Var>* trace = nullptr);
  std::vector<RegularField> forward(const Tensor& image);

  std::vector<Param*> parameters();
  std::size_t parameter_count() const;

  struct LayerCount {
    std::string name;
    std::size_t equivariant = 0;
    std::size_t plain_equivalent = 0;
  };
  /// Per-layer trainable counts next to the ordinary-conv equivalent with
  /// the same effective channel budget.
  std::vector<LayerCount> layer_counts() const;

 private:
  struct Block {
    GConvLayer conv1, conv2;
    GroupBatchNorm bn1, bn2;
    bool has_projection = false;
    GConvLayer projection;
    GroupBatchNorm projection_bn;
  };

  BackboneConfig cfg_;
  LiftConvLayer stem_;
  GroupBatchNorm stem_bn_;
  std::vector<std::vector<Block>> stages_;
  std::vector<GConvLayer> laterals_;
  std::vector<GConvLayer> smoothers_;
};

}  // namespace regconv
