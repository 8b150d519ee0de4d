#include "regconv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regconv/random.hpp"

namespace regconv {

Param::Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
  grad = Tensor::zeros_like(value);
  velocity = Tensor::zeros_like(value);
}

void Param::zero_grad() {
  if (grad.shape() != value.shape()) grad = Tensor::zeros_like(value);
  std::fill(grad.values().begin(), grad.values().end(), 0.0);
}

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Tensor value, std::string name) {
  round_to(value, precision_);
  nodes_.push_back(Node{std::move(name), std::move(value), {}, {}, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Param& p) {
  Tensor v = p.value;
  round_to(v, precision_);
  nodes_.push_back(Node{"param:" + p.name, std::move(v), {}, {}, {}, &p});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  round_to(value, precision_);
  Node node{std::move(op), std::move(value), {}, {}, {}, nullptr};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw Error("input recorded on a different tape");
    node.inputs.push_back(v.id());
  }
  if (record_) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (!record_) throw Error("tape was created without backward recording");
  if (&loss.tape() != this) throw Error("loss recorded on a different tape");
  const std::size_t root = loss.id();
  if (nodes_[root].value.size() != 1) {
    throw Error("loss must be scalar, got shape " + shape_string(nodes_[root].value.shape()));
  }

  std::vector<char> live(nodes_.size(), 0);
  live[root] = 1;
  for (std::size_t id = root + 1; id-- > 0;) {
    if (!live[id]) continue;
    for (auto in : nodes_[id].inputs) live[in] = 1;
  }
  for (std::size_t id = 0; id <= root; ++id) {
    if (live[id] && !nodes_[id].value.all_finite()) {
      throw Error("non-finite value at node " + std::to_string(id) + " (" + nodes_[id].op + ")");
    }
  }

  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[root].grad = Tensor(nodes_[root].value.shape(), 1.0);

  std::vector<Tensor> grad_in;
  for (std::size_t id = root + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!live[id] || node.grad.empty()) continue;
    if (!node.grad.all_finite()) {
      throw Error("non-finite gradient at node " + std::to_string(id) + " (" + node.op + ")");
    }
    if (!node.backward || node.inputs.empty()) continue;
    grad_in.assign(node.inputs.size(), Tensor());
    node.backward(node.grad, grad_in);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (grad_in[j].empty()) continue;
      round_to(grad_in[j], precision_);
      Node& src = nodes_[node.inputs[j]];
      if (grad_in[j].size() != src.value.size()) {
        throw Error("gradient size mismatch flowing from node " + std::to_string(id) + " (" + node.op + ")");
      }
      if (src.grad.empty()) {
        src.grad = grad_in[j].reshaped(src.value.shape());
      } else {
        for (std::size_t i = 0; i < src.grad.size(); ++i) src.grad[i] += grad_in[j][i];
      }
    }
  }
}

void Tape::accumulate_param_grads() {
  for (auto& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
    n.param->grad += n.grad;
  }
}

void sgd_step(const std::vector<Param*>& params, double lr, double momentum, double weight_decay) {
  if (!(lr > 0.0)) throw Error("learning rate must be > 0");
  for (Param* p : params) {
    if (p->velocity.shape() != p->value.shape()) p->velocity = Tensor::zeros_like(p->value);
    if (p->grad.shape() != p->value.shape()) p->zero_grad();
    auto v = p->velocity.values();
    auto w = p->value.values();
    auto g = p->grad.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + (g[i] + weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
    p->zero_grad();
  }
}

GradCheckResult grad_check(const std::function<Var(Tape&)>& build, const std::vector<Param*>& params,
                           double eps, std::size_t samples, std::uint64_t seed) {
  std::vector<Tensor> saved;
  for (Param* p : params) {
    saved.push_back(p->grad);
    p->zero_grad();
  }
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
    tape.accumulate_param_grads();
  }
  std::vector<Tensor> analytic;
  for (std::size_t i = 0; i < params.size(); ++i) {
    analytic.push_back(params[i]->grad);
    params[i]->grad = saved[i];
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i]->value.size(); ++j) coords.emplace_back(i, j);
  }
  SplitMix64 rng(seed);
  // Partial Fisher-Yates: the first `samples` entries become the sample.
  const std::size_t take = std::min(samples, coords.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(coords.size() - i));
    std::swap(coords[i], coords[j]);
  }

  auto eval = [&] {
    Tape tape(false);
    const double v = build(tape).value()[0];
    if (!std::isfinite(v)) throw Error("grad_check: function value is not finite");
    return v;
  };

  GradCheckResult result;
  result.coordinates = take;
  for (std::size_t s = 0; s < take; ++s) {
    const auto [pi, ci] = coords[s];
    double& x = params[pi]->value[ci];
    const double orig = x;
    x = orig + eps;
    const double xp = x;
    const double fp = eval();
    x = orig - eps;
    const double xm = x;
    const double fm = eval();
    x = orig;
    // divide by the step actually taken, not the nominal 2 eps
    const double numeric = (fp - fm) / (xp - xm);
    const double a = analytic[pi][ci];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = std::max(result.max_rel_error, rel);
      if (rel >= result.max_rel_error) result.worst = params[pi]->name + "[" + std::to_string(ci) + "]";
    }
  }
  return result;
}

}  // namespace regconv
