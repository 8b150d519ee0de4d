#pragma once

#include <vector>

#include "regconv/autodiff.hpp"
#include "regconv/planar.hpp"

// Differentiable wrappers over the planar kernels. Each records its value
// and vector-Jacobian product on the inputs' tape.
namespace regconv::ad {

Var sum(Var x);
/// sum_i weights[i] * x[i]; a random projection makes a well-conditioned
/// scalar for gradient checks.
Var dot(Var x, const Tensor& weights);
Var add(Var a, Var b);
Var add_n(const std::vector<Var>& xs);
Var scale(Var x, double s);
Var reshape(Var x, Shape shape);
Var relu(Var x);

Var conv2d(Var x, Var filters, std::size_t stride = 1, std::size_t padding = 0);
Var maxpool2d(Var x, std::size_t window = 2, std::size_t stride = 2);
Var upsample_nearest(Var x, std::size_t factor = 2);
Var rotate(Var x, double angle);

/// Adds bias[c] to every plane of leading index c; x is (C, ..., H, W).
Var channel_bias(Var x, Var bias);

/// Dense layer on the flattened input: weights (out, in), bias (out).
Var linear(Var x, Var weights, Var bias);

/// Mean negative log-likelihood of the labels under softmax(logits);
/// logits is (batch, classes).
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

/// Stacks equally sized tensors along a new leading dim.
Var stack(const std::vector<Var>& xs);

}  // namespace regconv::ad
