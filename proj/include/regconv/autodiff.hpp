#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "regconv/tensor.hpp"

namespace regconv {

/// Trainable tensor with its gradient and momentum buffer.
struct Param {
  Param() = default;
  Param(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;

  void zero_grad();
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the upstream gradient and fills one gradient per input
/// (left empty when an input gets no contribution).
using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor>& grad_in)>;

/// Reverse-mode record. Nodes are appended in evaluation order, which is a
/// topological order, so backward walks the vector in reverse.
/// With Precision::F32 every stored value and gradient is rounded to single
/// precision; arithmetic inside an op stays in double.
class Tape {
 public:
  explicit Tape(bool record_backward = true, Precision precision = Precision::F64)
      : record_(record_backward), precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  Precision precision() const { return precision_; }

  Var constant(Tensor value, std::string name = "const");
  /// Leaf bound to a parameter; backward leaves its gradient on the node
  /// until accumulate_param_grads() is called.
  Var param(Param& p);
  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws on non-scalar loss or
  /// on the first node whose gradient is not finite.
  void backward(Var loss);

  /// Adds leaf gradients into each bound Param::grad.
  void accumulate_param_grads();

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Param* param = nullptr;
  };
  std::vector<Node> nodes_;
  bool record_;
  Precision precision_;
};

/// Classic momentum SGD with weight decay added to the gradient:
///   v = momentum * v + (g + weight_decay * p);  p -= lr * v
/// Gradients are zeroed afterwards.
void sgd_step(const std::vector<Param*>& params, double lr, double momentum = 0.9,
              double weight_decay = 0.0001);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param>[<index>]"
};

/// Central-difference check of build() wrt the given params. build must be a
/// pure function of the parameter values returning a scalar Var. Samples at
/// least min(samples, total) coordinates; the relative error denominator is
/// max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::function<Var(Tape&)>& build, const std::vector<Param*>& params,
                           double eps = 1e-5, std::size_t samples = 64, std::uint64_t seed = 7);

}  // namespace regconv
