#include "regconv/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "regconv/ops.hpp"
#include "regconv/parallel.hpp"
#include "regconv/random.hpp"

namespace regconv {

namespace {

constexpr const char* kCheckpointVersion = "regconv-ckpt-v1";

// Stream tags keep data, init, ordering and augmentation independent.
constexpr std::uint64_t kTrainData = 1, kTestData = 2, kInit = 3, kOrder = 4, kAugment = 5,
                        kUprightTest = 6;

BackboneConfig backbone_for(Variant v, const BackboneConfig& cfg) {
  return v == Variant::Equi ? cfg : cfg.plain_counterpart();
}

std::size_t feature_size(const ToyTaskConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.group_order());
  return cfg.backbone.fpn_width * n * cfg.align.output_size * cfg.align.output_size;
}

std::vector<int> labels_of(const SyntheticScene& s) {
  std::vector<int> out;
  for (const auto& a : s.annotations) out.push_back(static_cast<int>(a.label));
  return out;
}

std::vector<RRoI> boxes_of(const SyntheticScene& s) {
  std::vector<RRoI> out;
  for (const auto& a : s.annotations) out.push_back(a.box);
  return out;
}

void round_params(const std::vector<Param*>& ps, Precision p) {
  for (Param* q : ps) {
    round_to(q->value, p);
    round_to(q->velocity, p);
  }
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Plain: return "plain";
    case Variant::RotAug: return "rotaug";
    case Variant::Equi: return "equi";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  if (name == "plain") return Variant::Plain;
  if (name == "rotaug") return Variant::RotAug;
  if (name == "equi" || name == "equivariant") return Variant::Equi;
  throw Error("unknown variant '" + name + "' (expected plain, rotaug or equi)");
}

void ToyTaskConfig::validate() const {
  backbone.validate();
  align.validate();
  if (backbone.in_channels != 1) throw Error("toy task scenes have one channel");
  if (level < 0 || static_cast<std::size_t>(level) > (backbone.stages() == 0 ? 0 : backbone.stages() - 1)) {
    throw Error("RoI level " + std::to_string(level) + " is not a pyramid level");
  }
  if (side < 64) throw Error("scene side must be >= 64");
  if (train_scenes < 1 || test_scenes < 1) throw Error("toy task needs at least one train and one test scene");
  if (objects_per_scene < 1 || objects_per_scene > 8) throw Error("objects per scene must be in [1, 8]");
  if (batch_scenes < 1) throw Error("batch must hold at least one scene");
  if (!(lr > 0)) throw Error("learning rate must be > 0");
  if (!(grad_clip >= 0)) throw Error("gradient clip must be >= 0");
  if (eval_every < 1) throw Error("evaluation interval must be >= 1");
}

ToyData make_toy_data(const ToyTaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SceneOptions opt;
  opt.side = cfg.side;
  opt.num_objects = cfg.objects_per_scene;
  ToyData d;
  d.train.resize(cfg.train_scenes);
  d.test.resize(cfg.test_scenes);
  d.test_upright.resize(cfg.test_scenes);
  const std::uint64_t train_seed = mix_seed(seed, kTrainData), test_seed = mix_seed(seed, kTestData);
  const std::uint64_t upright_seed = mix_seed(seed, kUprightTest);
  parallel_for(cfg.train_scenes + 2 * cfg.test_scenes, [&](std::size_t i) {
    SceneOptions o = opt;
    if (i < cfg.train_scenes) {
      o.forced_theta = 0.0;
      d.train[i] = gen_scene(mix_seed(train_seed, i), o);
    } else if (i >= cfg.train_scenes + cfg.test_scenes) {
      const std::size_t j = i - cfg.train_scenes - cfg.test_scenes;
      o.forced_theta = 0.0;
      d.test_upright[j] = gen_scene(mix_seed(upright_seed, j), o);
    } else {
      const std::size_t j = i - cfg.train_scenes;
      d.test[j] = gen_scene(mix_seed(test_seed, j), o);
    }
  });
  return d;
}

RoIClassifier::RoIClassifier(Variant v, const ToyTaskConfig& cfg, std::uint64_t seed)
    : variant_(v),
      level_(cfg.level),
      align_(cfg.align),
      backbone_(backbone_for(v, cfg.backbone), mix_seed(seed, kInit)),
      head_w_("head.weight", Tensor({static_cast<std::size_t>(kNumShapeClasses), feature_size(cfg)})),
      head_b_("head.bias", Tensor({static_cast<std::size_t>(kNumShapeClasses)})) {}

Var RoIClassifier::roi_feature(Var level, const RRoI& box) const {
  const RRoI b = rroi_to_level(box, level_);
  return variant_ == Variant::Equi ? ad::riroi_align(level, b, align_) : ad::rroi_align_spatial(level, b, align_);
}

Var RoIClassifier::logits(Tape& tape, const Tensor& image, const std::vector<RRoI>& boxes) {
  if (boxes.empty()) throw Error("classifier needs at least one box");
  const auto levels = backbone_.forward(tape.constant(image, "image"));
  std::vector<Var> feats;
  for (const auto& b : boxes) feats.push_back(roi_feature(levels[static_cast<std::size_t>(level_)], b));
  // 1/sqrt(F) input scaling keeps logit steps independent of the feature size.
  const Var x = ad::scale(ad::stack(feats), 1.0 / std::sqrt(static_cast<double>(head_w_.value.dim(1))));
  return ad::linear(x, tape.param(head_w_), tape.param(head_b_));
}

std::vector<Param*> RoIClassifier::parameters() {
  auto ps = backbone_.parameters();
  ps.push_back(&head_w_);
  ps.push_back(&head_b_);
  return ps;
}

Trainer::Trainer(const ToyTaskConfig& cfg, Variant v, std::uint64_t seed, std::shared_ptr<const ToyData> data)
    : cfg_(cfg), variant_(v), seed_(seed), data_(std::move(data)), model_(v, cfg, seed) {
  cfg_.validate();
  if (!data_ || data_->train.empty()) throw Error("trainer needs training scenes");
  round_params(model_.parameters(), cfg_.precision);
}

double Trainer::learning_rate(std::size_t t) const {
  const double progress = static_cast<double>(t) / static_cast<double>(std::max<std::size_t>(cfg_.steps, 1));
  return cfg_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

double Trainer::step() {
  const std::size_t b = cfg_.batch_scenes;
  const CyclicGroup g(cfg_.group_order());
  std::vector<std::unique_ptr<Tape>> tapes(b);
  std::vector<double> losses(b);
  parallel_for(b, [&](std::size_t j) {
    const std::uint64_t key = step_ * b + j;
    const auto& src = data_->train[mix_seed(mix_seed(seed_, kOrder), key) % data_->train.size()];
    SyntheticScene scene = src;
    if (variant_ == Variant::RotAug) {
      const int k = static_cast<int>(mix_seed(mix_seed(seed_, kAugment), key) % static_cast<std::uint64_t>(g.order()));
      scene = rotate_scene(src, k, g);
    }
    auto tape = std::make_unique<Tape>(true, cfg_.precision);
    Var loss = ad::scale(ad::softmax_cross_entropy(model_.logits(*tape, scene.image, boxes_of(scene)), labels_of(scene)),
                         1.0 / static_cast<double>(b));
    tape->backward(loss);
    losses[j] = loss.value()[0];
    tapes[j] = std::move(tape);
  });
  // Fixed reduction order keeps the step deterministic for any thread count.
  double total = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    tapes[j]->accumulate_param_grads();
    total += losses[j];
  }
  const auto params = model_.parameters();
  if (cfg_.grad_clip > 0) {
    double sq = 0.0;
    for (const auto* p : params) {
      if (!p->grad.empty()) sq += l2_norm(p->grad) * l2_norm(p->grad);
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) {
      for (auto* p : params) {
        if (!p->grad.empty()) p->grad *= cfg_.grad_clip / norm;
      }
    }
  }
  sgd_step(params, learning_rate(step_), cfg_.momentum, cfg_.weight_decay);
  round_params(params, cfg_.precision);
  ++step_;
  return total;
}

double Trainer::evaluate(const std::vector<SyntheticScene>& scenes) {
  std::vector<double> credit(scenes.size()), count(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto& s = scenes[i];
    if (s.annotations.empty()) return;
    Tape tape(false, cfg_.precision);
    const Tensor z = model_.logits(tape, s.image, boxes_of(s)).value();
    const std::size_t classes = z.dim(1);
    for (std::size_t o = 0; o < s.annotations.size(); ++o) {
      double best = z[o * classes];
      for (std::size_t c = 1; c < classes; ++c) best = std::max(best, z[o * classes + c]);
      std::size_t ties = 0;
      for (std::size_t c = 0; c < classes; ++c) ties += z[o * classes + c] == best;
      if (z[o * classes + static_cast<std::size_t>(s.annotations[o].label)] == best) {
        credit[i] += 1.0 / static_cast<double>(ties);
      }
      count[i] += 1.0;
    }
  });
  double c = 0.0, n = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    c += credit[i];
    n += count[i];
  }
  if (n == 0.0) throw Error("evaluation set has no objects");
  return c / n;
}

void Trainer::save(const std::string& path) const {
  auto params = const_cast<RoIClassifier&>(model_).parameters();
  nlohmann::json layers = nlohmann::json::array();
  for (const Param* p : params) layers.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  const nlohmann::json manifest{{"version", kCheckpointVersion}, {"variant", to_string(variant_)},
                                {"group_order", cfg_.group_order()},  {"step", step_},
                                {"seed", seed_},                      {"layers", layers}};
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << manifest.dump() << '\n';
  for (const Param* p : params) {
    write_tensor(os, p->value);
    write_tensor(os, p->velocity);
  }
  if (!os) throw Error("failed to write checkpoint " + path);
}

void Trainer::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw Error("truncated checkpoint " + path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw Error("bad magic: " + path + " is not a checkpoint");
  }
  if (!m.is_object() || m.value("version", "") != kCheckpointVersion) {
    throw Error("checkpoint version mismatch: expected " + std::string(kCheckpointVersion));
  }
  if (m.at("variant").get<std::string>() != to_string(variant_) || m.at("group_order").get<int>() != cfg_.group_order()) {
    throw Error("checkpoint was written for a different model");
  }
  auto params = model_.parameters();
  const auto& layers = m.at("layers");
  if (layers.size() != params.size()) throw Error("checkpoint layer count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (layers[i].at("name").get<std::string>() != params[i]->name ||
        layers[i].at("shape").get<Shape>() != params[i]->value.shape()) {
      throw Error("checkpoint layer " + std::to_string(i) + " does not match " + params[i]->name);
    }
    Tensor value = read_tensor(is);
    Tensor velocity = read_tensor(is);
    if (value.shape() != params[i]->value.shape() || velocity.shape() != value.shape()) {
      throw Error("checkpoint tensor shape mismatch for " + params[i]->name);
    }
    params[i]->value = std::move(value);
    params[i]->velocity = std::move(velocity);
    params[i]->zero_grad();
  }
  step_ = m.at("step").get<std::size_t>();
}

TrainResult continue_training(Trainer& trainer, const ToyTaskConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  TrainResult r;
  r.variant = trainer.variant();
  r.seed = trainer.seed();
  double loss_sum = 0.0;
  std::size_t loss_n = 0;
  auto record = [&] {
    r.curve.push_back({trainer.steps_done(), loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0,
                       trainer.evaluate(trainer.data().test)});
    loss_sum = 0.0;
    loss_n = 0;
  };
  while (trainer.steps_done() < cfg.steps) {
    const std::size_t t = trainer.steps_done();
    double loss = 0.0;
    try {
      loss = trainer.step();
    } catch (const Error& e) {
      throw Error("non-finite loss at step " + std::to_string(t) + " (" + e.what() + ")");
    }
    if (!std::isfinite(loss)) throw Error("non-finite loss at step " + std::to_string(t));
    loss_sum += loss;
    ++loss_n;
    if (trainer.steps_done() % cfg.eval_every == 0 && trainer.steps_done() < cfg.steps) record();
  }
  record();
  r.accuracy = r.curve.back().accuracy;
  r.upright_accuracy = trainer.data().test_upright.empty() ? r.accuracy : trainer.evaluate(trainer.data().test_upright);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

TrainResult train_toy(const ToyTaskConfig& cfg, Variant v, std::uint64_t seed, std::shared_ptr<const ToyData> data) {
  const auto start = std::chrono::steady_clock::now();
  Trainer trainer(cfg, v, seed, std::move(data));
  TrainResult r = continue_training(trainer, cfg);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace regconv
