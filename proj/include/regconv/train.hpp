#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "regconv/backbone.hpp"
#include "regconv/roi_align.hpp"
#include "regconv/synth.hpp"

namespace regconv {

/// plain: ordinary CNN; rotaug: ordinary CNN trained with random C_N
/// rotations of each scene; equi: rotation-equivariant backbone with
/// orientation-aligned RoI features.
enum class Variant { Plain, RotAug, Equi };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);

/// Toy oriented-object classification task: upright training scenes,
/// arbitrarily rotated test scenes, ground-truth rotated boxes.
struct ToyTaskConfig {
  BackboneConfig backbone = toy_backbone_config(4);  // ordinary variants use its plain counterpart
  AlignSpec align;
  int level = 0;            // pyramid level the RoIs are pooled from
  std::size_t side = 64;
  std::size_t train_scenes = 1000;
  std::size_t test_scenes = 100;
  std::size_t objects_per_scene = 2;
  std::size_t steps = 2000;
  std::size_t batch_scenes = 1;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;   // global gradient L2 norm cap; 0 disables
  std::size_t eval_every = 500;
  Precision precision = Precision::F32;

  void validate() const;
  int group_order() const { return backbone.group_order; }
};

struct ToyData {
  std::vector<SyntheticScene> train;  // every object upright (theta = 0)
  std::vector<SyntheticScene> test;   // uniformly random theta
  std::vector<SyntheticScene> test_upright;  // same generator as test, theta = 0
};

ToyData make_toy_data(const ToyTaskConfig& cfg, std::uint64_t seed);

/// Backbone + RoI pooling + linear head over 4 shape classes. The head
/// starts at zero so an untrained model scores exactly chance.
class RoIClassifier {
 public:
  RoIClassifier(Variant v, const ToyTaskConfig& cfg, std::uint64_t seed);

  Variant variant() const { return variant_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }

  /// Pooled feature of one box: riroi_align for equi, spatial RRoI align
  /// otherwise. Shape (K, N, s, s) (N = 1 for ordinary variants).
  Var roi_feature(Var level, const RRoI& box) const;
  /// (boxes, classes) logits.
  Var logits(Tape& tape, const Tensor& image, const std::vector<RRoI>& boxes);

  std::vector<Param*> parameters();

 private:
  Variant variant_;
  int level_;
  AlignSpec align_;
  Backbone backbone_;
  Param head_w_, head_b_;
};

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;      // mean training loss since the previous point
  double accuracy = 0.0;  // rotated test accuracy
};

/// Owns the model and optimiser state. The scene for step t and its
/// augmentation depend only on (seed, t), so a resumed run continues
/// exactly where the saved one stopped.
class Trainer {
 public:
  Trainer(const ToyTaskConfig& cfg, Variant v, std::uint64_t seed, std::shared_ptr<const ToyData> data);

  /// One SGD step; returns the mean loss of the batch.
  double step();
  std::size_t steps_done() const { return step_; }
  RoIClassifier& model() { return model_; }
  const ToyData& data() const { return *data_; }
  Variant variant() const { return variant_; }
  std::uint64_t seed() const { return seed_; }

  /// Fraction of correctly classified objects; ties in the argmax earn
  /// 1 / (tied classes).
  double evaluate(const std::vector<SyntheticScene>& scenes);

  /// Checkpoint "regconv-ckpt-v1": one JSON manifest line, then value and
  /// velocity tensors of every parameter in manifest order.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  double learning_rate(std::size_t t) const;

  ToyTaskConfig cfg_;
  Variant variant_;
  std::uint64_t seed_;
  std::shared_ptr<const ToyData> data_;
  RoIClassifier model_;
  std::size_t step_ = 0;
};

struct TrainResult {
  Variant variant = Variant::Plain;
  std::uint64_t seed = 0;
  double accuracy = 0.0;          // rotated test scenes
  double upright_accuracy = 0.0;  // upright test scenes
  double seconds = 0.0;
  std::vector<CurvePoint> curve;
};

/// Continues training from trainer.steps_done() up to cfg.steps with the
/// same evaluation schedule. A non-finite loss aborts with
/// "non-finite loss at step t".
TrainResult continue_training(Trainer& trainer, const ToyTaskConfig& cfg);

/// Runs cfg.steps steps, evaluating every cfg.eval_every steps and at the end.
TrainResult train_toy(const ToyTaskConfig& cfg, Variant v, std::uint64_t seed, std::shared_ptr<const ToyData> data);

}  // namespace regconv
