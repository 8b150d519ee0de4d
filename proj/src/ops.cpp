#include "regconv/ops.hpp"

#include <algorithm>
#include <cmath>

namespace regconv::ad {

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("operands recorded on different tapes");
  return a.tape();
}

}  // namespace

Var sum(Var x) {
  Tape& t = x.tape();
  Tensor out({1}, regconv::sum(x.value()));
  const Shape shape = x.value().shape();
  return t.record("sum", std::move(out), {x}, [shape](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = Tensor(shape, g[0]);
  });
}

Var dot(Var x, const Tensor& weights) {
  if (weights.size() != x.value().size()) throw Error("dot: weight count does not match input");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x.value()[i];
  const Shape shape = x.value().shape();
  return x.tape().record("dot", Tensor({1}, acc), {x}, [weights, shape](const Tensor& g, std::vector<Tensor>& gi) {
    Tensor d = weights.reshaped(shape);
    d *= g[0];
    gi[0] = std::move(d);
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Tensor out = a.value() + b.value();
  return t.record("add", std::move(out), {a, b}, [](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = g;
    gi[1] = g;
  });
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("add_n needs at least one input");
  Tensor out = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    same_tape(xs[0], xs[i]);
    out += xs[i].value();
  }
  return xs[0].tape().record("add_n", std::move(out), xs, [](const Tensor& g, std::vector<Tensor>& gi) {
    for (auto& v : gi) v = g;
  });
}

Var scale(Var x, double s) {
  return x.tape().record("scale", s * x.value(), {x}, [s](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = s * g;
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const Shape original = x.value().shape();
  return x.tape().record("reshape", std::move(out), {x}, [original](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = g.reshaped(original);
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::max(v, 0.0);
  Tape* t = &x.tape();
  const std::size_t xi = x.id();
  return t->record("relu", std::move(out), {x}, [t, xi](const Tensor& g, std::vector<Tensor>& gi) {
    const Tensor& in = t->value(xi);
    Tensor d(in.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = in[i] > 0.0 ? g[i] : 0.0;
    gi[0] = std::move(d);
  });
}

Var conv2d(Var x, Var filters, std::size_t stride, std::size_t padding) {
  Tape& t = same_tape(x, filters);
  Tensor out = conv2d_plain(x.value(), filters.value(), stride, padding);
  Tape* tp = &t;
  const std::size_t xi = x.id(), wi = filters.id();
  return t.record("conv2d", std::move(out), {x, filters},
                  [tp, xi, wi, stride, padding](const Tensor& g, std::vector<Tensor>& gi) {
                    auto grads = conv2d_plain_backward(tp->value(xi), tp->value(wi), g, stride, padding);
                    gi[0] = std::move(grads.input);
                    gi[1] = std::move(grads.filters);
                  });
}

Var maxpool2d(Var x, std::size_t window, std::size_t stride) {
  Tensor out = regconv::maxpool2d(x.value(), window, stride);
  Tape* t = &x.tape();
  const std::size_t xi = x.id();
  return t->record("maxpool2d", std::move(out), {x}, [t, xi, window, stride](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = maxpool2d_backward(t->value(xi), g, window, stride);
  });
}

Var upsample_nearest(Var x, std::size_t factor) {
  Tensor out = regconv::upsample_nearest(x.value(), factor);
  return x.tape().record("upsample", std::move(out), {x}, [factor](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = upsample_nearest_backward(g, factor);
  });
}

Var rotate(Var x, double angle) {
  Tensor out = rotate_planar(x.value(), angle);
  return x.tape().record("rotate", std::move(out), {x}, [angle](const Tensor& g, std::vector<Tensor>& gi) {
    gi[0] = rotate_planar_adjoint(g, angle);
  });
}

Var channel_bias(Var x, Var bias) {
  Tape& t = same_tape(x, bias);
  const Tensor& in = x.value();
  const std::size_t c = bias.value().size();
  if (in.rank() < 3 || in.dim(0) != c) {
    throw Error("bias of length " + std::to_string(c) + " does not match input " + shape_string(in.shape()));
  }
  const std::size_t block = in.size() / c;
  Tensor out = in;
  for (std::size_t k = 0; k < c; ++k) {
    const double b = bias.value()[k];
    for (std::size_t i = 0; i < block; ++i) out[k * block + i] += b;
  }
  return t.record("channel_bias", std::move(out), {x, bias}, [c, block](const Tensor& g, std::vector<Tensor>& gi) {
    Tensor db({c});
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < block; ++i) acc += g[k * block + i];
      db[k] = acc;
    }
    gi[0] = g;
    gi[1] = std::move(db);
  });
}

Var linear(Var x, Var weights, Var bias) {
  Tape& t = same_tape(x, weights);
  same_tape(x, bias);
  const Tensor& w = weights.value();
  if (w.rank() != 2) throw Error("linear weights must be (out, in)");
  const std::size_t n_out = w.dim(0), n_in = w.dim(1);
  const Tensor& in = x.value();
  if (in.size() % n_in != 0) throw Error("linear: input size not a multiple of " + std::to_string(n_in));
  if (bias.value().size() != n_out) throw Error("linear: bias length mismatch");
  const std::size_t batch = in.size() / n_in;
  Tensor out({batch, n_out});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < n_out; ++o) {
      double acc = bias.value()[o];
      for (std::size_t i = 0; i < n_in; ++i) acc += w[o * n_in + i] * in[b * n_in + i];
      out[b * n_out + o] = acc;
    }
  }
  Tape* tp = &t;
  const std::size_t xi = x.id(), wi = weights.id();
  return t.record("linear", std::move(out), {x, weights, bias},
                  [tp, xi, wi, batch, n_in, n_out](const Tensor& g, std::vector<Tensor>& gi) {
                    const Tensor& xv = tp->value(xi);
                    const Tensor& wv = tp->value(wi);
                    Tensor dx(xv.shape()), dw(wv.shape()), db({n_out});
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t o = 0; o < n_out; ++o) {
                        const double go = g[b * n_out + o];
                        db[o] += go;
                        for (std::size_t i = 0; i < n_in; ++i) {
                          dx[b * n_in + i] += go * wv[o * n_in + i];
                          dw[o * n_in + i] += go * xv[b * n_in + i];
                        }
                      }
                    }
                    gi[0] = std::move(dx);
                    gi[1] = std::move(dw);
                    gi[2] = std::move(db);
                  });
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) throw Error("logits must be (batch, classes) matching labels");
  const std::size_t batch = z.dim(0), classes = z.dim(1);
  Tensor prob(z.shape());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) throw Error("label out of range");
    double m = z[b * classes];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, z[b * classes + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(z[b * classes + c] - m);
    for (std::size_t c = 0; c < classes; ++c) prob[b * classes + c] = std::exp(z[b * classes + c] - m) / s;
    loss += -(z[b * classes + static_cast<std::size_t>(labels[b])] - m - std::log(s));
  }
  loss /= static_cast<double>(batch);
  return logits.tape().record("softmax_xent", Tensor({1}, loss), {logits},
                              [prob, labels, batch, classes](const Tensor& g, std::vector<Tensor>& gi) {
                                Tensor d = prob;
                                for (std::size_t b = 0; b < batch; ++b) {
                                  d[b * classes + static_cast<std::size_t>(labels[b])] -= 1.0;
                                }
                                d *= g[0] / static_cast<double>(batch);
                                gi[0] = std::move(d);
                              });
}

Var stack(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("stack needs at least one input");
  const Shape inner = xs[0].value().shape();
  const std::size_t n = xs[0].value().size();
  Shape shape{xs.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    same_tape(xs[0], xs[i]);
    if (xs[i].value().shape() != inner) throw Error("stack: shape mismatch");
    std::copy(xs[i].value().data(), xs[i].value().data() + n, out.data() + i * n);
  }
  return xs[0].tape().record("stack", std::move(out), xs, [inner, n](const Tensor& g, std::vector<Tensor>& gi) {
    for (std::size_t i = 0; i < gi.size(); ++i) {
      gi[i] = Tensor(inner, std::vector<double>(g.data() + i * n, g.data() + (i + 1) * n));
    }
  });
}

}  // namespace regconv::ad
