#include "regconv/backbone.hpp"

#include "regconv/ops.hpp"

namespace regconv {

void BackboneConfig::validate() const {
  if (group_order < 1) throw Error("group order must be a positive integer");
  if (in_channels < 1 || stem_width < 1 || fpn_width < 1) throw Error("backbone widths must be >= 1");
  if (widths.size() != blocks.size()) throw Error("backbone needs one block count per stage");
  for (auto w : widths) {
    if (w < 1) throw Error("backbone widths must be >= 1");
  }
  if (kernel % 2 == 0) throw Error("even kernel sizes are not supported");
}

BackboneConfig BackboneConfig::plain_counterpart() const {
  BackboneConfig p = *this;
  const auto n = static_cast<std::size_t>(group_order);
  p.group_order = 1;
  p.stem_width *= n;
  p.fpn_width *= n;
  for (auto& w : p.widths) w *= n;
  return p;
}

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  SplitMix64 rng(seed);
  const CyclicGroup g(cfg_.group_order);
  const std::size_t k = cfg_.kernel;
  stem_ = LiftConvLayer("stem.conv", g, cfg_.in_channels, cfg_.stem_width, k, rng);
  stem_bn_ = GroupBatchNorm("stem.norm", cfg_.stem_width);
  std::size_t width = cfg_.stem_width;
  for (std::size_t s = 0; s < cfg_.stages(); ++s) {
    std::vector<Block> blocks;
    for (std::size_t b = 0; b < cfg_.blocks[s]; ++b) {
      const std::string name = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const std::size_t out = cfg_.widths[s];
      Block blk;
      blk.conv1 = GConvLayer(name + ".conv1", g, width, out, k, rng);
      blk.bn1 = GroupBatchNorm(name + ".norm1", out);
      blk.conv2 = GConvLayer(name + ".conv2", g, out, out, k, rng);
      blk.bn2 = GroupBatchNorm(name + ".norm2", out);
      if (width != out) {
        blk.has_projection = true;
        blk.projection = GConvLayer(name + ".proj", g, width, out, 1, rng);
        blk.projection_bn = GroupBatchNorm(name + ".proj_norm", out);
      }
      blocks.push_back(std::move(blk));
      width = out;
    }
    stages_.push_back(std::move(blocks));
    laterals_.emplace_back("fpn.lateral" + std::to_string(s), g, cfg_.widths[s], cfg_.fpn_width, 1, rng);
    smoothers_.emplace_back("fpn.smooth" + std::to_string(s), g, cfg_.fpn_width, cfg_.fpn_width, k, rng);
  }
}

std::vector<Var> Backbone::forward(Var image, std::vector<Var>* trace) {
  const Tensor& img = image.value();
  if (img.rank() != 3 || img.dim(0) != cfg_.in_channels) {
    throw Error("backbone expects a (" + std::to_string(cfg_.in_channels) + ", H, W) image, got " +
                shape_string(img.shape()));
  }
  if (img.height() != img.width()) throw Error("backbone input must be square");
  const std::size_t div = std::size_t{1} << cfg_.stages();
  if (img.height() % div != 0) {
    throw Error("input side " + std::to_string(img.height()) + " not divisible by " + std::to_string(div));
  }
  auto keep = [trace](Var v) {
    if (trace) trace->push_back(v);
    return v;
  };

  Var x = keep(ad::lift(image, stem_));
  if (stages_.empty()) return {x};
  x = keep(ad::relu(ad::group_norm(x, stem_bn_)));

  std::vector<Var> stage_out;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) x = keep(ad::gmaxpool(x));
    for (auto& blk : stages_[s]) {
      Var y = keep(ad::relu(ad::group_norm(ad::gconv(x, blk.conv1), blk.bn1)));
      y = keep(ad::group_norm(ad::gconv(y, blk.conv2), blk.bn2));
      Var skip = blk.has_projection ? keep(ad::group_norm(ad::gconv(x, blk.projection), blk.projection_bn)) : x;
      x = keep(ad::relu(ad::add(y, skip)));
    }
    stage_out.push_back(x);
  }

  std::vector<Var> merged(stage_out.size());
  for (std::size_t s = stage_out.size(); s-- > 0;) {
    Var lat = keep(ad::gconv(stage_out[s], laterals_[s]));
    merged[s] = s + 1 < stage_out.size() ? keep(ad::add(lat, ad::upsample_nearest(merged[s + 1], 2))) : lat;
  }
  std::vector<Var> out;
  for (std::size_t s = 0; s < merged.size(); ++s) out.push_back(keep(ad::gconv(merged[s], smoothers_[s])));
  return out;
}

std::vector<RegularField> Backbone::forward(const Tensor& image) {
  Tape tape(false);
  auto vars = forward(tape.constant(image));
  std::vector<RegularField> out;
  for (const auto& v : vars) out.emplace_back(group(), v.value());
  return out;
}

std::vector<Param*> Backbone::parameters() {
  std::vector<Param*> ps{&stem_.weight};
  if (stages_.empty()) return ps;
  ps.push_back(&stem_bn_.gamma);
  ps.push_back(&stem_bn_.beta);
  for (auto& stage : stages_) {
    for (auto& b : stage) {
      for (Param* p : {&b.conv1.weight, &b.bn1.gamma, &b.bn1.beta, &b.conv2.weight, &b.bn2.gamma, &b.bn2.beta}) {
        ps.push_back(p);
      }
      if (b.has_projection) {
        for (Param* p : {&b.projection.weight, &b.projection_bn.gamma, &b.projection_bn.beta}) ps.push_back(p);
      }
    }
  }
  for (auto& l : laterals_) ps.push_back(&l.weight);
  for (auto& l : smoothers_) ps.push_back(&l.weight);
  return ps;
}

std::size_t Backbone::parameter_count() const {
  std::size_t total = 0;
  for (const auto& c : layer_counts()) total += c.equivariant;
  return total;
}

std::vector<Backbone::LayerCount> Backbone::layer_counts() const {
  const auto n = static_cast<std::size_t>(cfg_.group_order);
  std::vector<LayerCount> out;
  auto norm = [&](const GroupBatchNorm& bn) {
    out.push_back({bn.gamma.name.substr(0, bn.gamma.name.size() - 6), bn.parameter_count(), bn.parameter_count() * n});
  };
  out.push_back({stem_.weight.name, stem_.parameter_count(), plain_equivalent_parameters(stem_)});
  if (stages_.empty()) return out;
  norm(stem_bn_);
  for (const auto& stage : stages_) {
    for (const auto& b : stage) {
      out.push_back({b.conv1.weight.name, b.conv1.parameter_count(), plain_equivalent_parameters(b.conv1)});
      norm(b.bn1);
      out.push_back({b.conv2.weight.name, b.conv2.parameter_count(), plain_equivalent_parameters(b.conv2)});
      norm(b.bn2);
      if (b.has_projection) {
        out.push_back({b.projection.weight.name, b.projection.parameter_count(), plain_equivalent_parameters(b.projection)});
        norm(b.projection_bn);
      }
    }
  }
  for (const auto& l : laterals_) out.push_back({l.weight.name, l.parameter_count(), plain_equivalent_parameters(l)});
  for (const auto& l : smoothers_) out.push_back({l.weight.name, l.parameter_count(), plain_equivalent_parameters(l)});
  return out;
}

BackboneConfig toy_backbone_config(int group_order) {
  BackboneConfig c;
  c.group_order = group_order;
  c.stem_width = 4;
  c.widths = {4, 4};
  c.blocks = {1, 1};
  c.fpn_width = 4;
  return c;
}

}  // namespace regconv
