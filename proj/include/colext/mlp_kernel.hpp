#pragma once

// Forward/backward pass of a dense MLP with softmax cross-entropy.
// Templated on the parameter scalar so training runs on float storage while
// gradient checks can instantiate the exact same code in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "colext/model.hpp"

namespace colext::kernel {

struct LayerOffsets {
  std::size_t weights;
  std::size_t bias;
};

inline std::vector<LayerOffsets> layer_offsets(std::span<const LayerShape> shapes) {
  std::vector<LayerOffsets> out;
  out.reserve(shapes.size());
  std::size_t at = 0;
  for (const auto& s : shapes) {
    out.push_back({at, at + static_cast<std::size_t>(s.rows) * s.cols});
    at += s.size();
  }
  return out;
}

// Computes per-class logits for one sample. `acts` receives the
// post-activation values of every layer (acts[0] is the input).
template <class Real>
void forward(std::span<const Real> params, std::span<const LayerShape> shapes,
             std::span<const LayerOffsets> offsets, Activation act, std::span<const float> x,
             std::vector<std::vector<double>>& acts) {
  acts.resize(shapes.size() + 1);
  acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    const auto& in = acts[l];
    auto& out = acts[l + 1];
    out.assign(s.cols, 0.0);
    for (std::size_t j = 0; j < s.cols; ++j) out[j] = static_cast<double>(params[offsets[l].bias + j]);
    for (std::size_t i = 0; i < s.rows; ++i) {
      const double a = in[i];
      if (a == 0.0) continue;
      const std::size_t row = offsets[l].weights + i * s.cols;
      for (std::size_t j = 0; j < s.cols; ++j) out[j] += a * static_cast<double>(params[row + j]);
    }
    const bool hidden = l + 1 < shapes.size();
    if (hidden && act == Activation::relu) {
      for (auto& v : out) v = v > 0.0 ? v : 0.0;
    }
  }
}

// Softmax cross-entropy of the logits against `label`; fills `probs`.
inline double softmax_xent(std::span<const double> logits, std::size_t label,
                           std::vector<double>& probs) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  probs.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    probs[c] = std::exp(logits[c] - m);
    z += probs[c];
  }
  for (auto& p : probs) p /= z;
  return std::log(z) + m - logits[label];
}

// Mean cross-entropy over `rows` of `data`. When `grad` is non-empty it is
// overwritten with the gradient of that mean w.r.t. every parameter.
template <class Real>
double batch_loss_and_gradient(std::span<const Real> params, std::span<const LayerShape> shapes,
                               Activation act, const Dataset& data,
                               std::span<const std::size_t> rows, std::span<double> grad) {
  const auto offsets = layer_offsets(shapes);
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);

  std::vector<std::vector<double>> acts;
  std::vector<double> probs;
  std::vector<double> delta, prev_delta;
  double total = 0.0;

  for (const std::size_t r : rows) {
    forward<Real>(params, shapes, offsets, act, data.row(r), acts);
    const std::size_t label = data.labels[r];
    total += softmax_xent(acts.back(), label, probs);
    if (!want_grad) continue;

    delta = probs;
    delta[label] -= 1.0;
    for (std::size_t l = shapes.size(); l-- > 0;) {
      const auto& s = shapes[l];
      const auto& in = acts[l];
      for (std::size_t j = 0; j < s.cols; ++j) grad[offsets[l].bias + j] += delta[j];
      for (std::size_t i = 0; i < s.rows; ++i) {
        const double a = in[i];
        if (a == 0.0) continue;
        const std::size_t row = offsets[l].weights + i * s.cols;
        for (std::size_t j = 0; j < s.cols; ++j) grad[row + j] += a * delta[j];
      }
      if (l == 0) break;
      prev_delta.assign(s.rows, 0.0);
      for (std::size_t i = 0; i < s.rows; ++i) {
        // relu'(z) == 1 exactly where the stored activation is positive
        if (act == Activation::relu && in[i] <= 0.0) continue;
        const std::size_t row = offsets[l].weights + i * s.cols;
        double acc = 0.0;
        for (std::size_t j = 0; j < s.cols; ++j) acc += static_cast<double>(params[row + j]) * delta[j];
        prev_delta[i] = acc;
      }
      delta.swap(prev_delta);
    }
  }

  const double inv = 1.0 / static_cast<double>(rows.size());
  if (want_grad) {
    for (auto& g : grad) g *= inv;
  }
  return total * inv;
}

// Local objective: mean cross-entropy + (mu/2)||w - anchor||^2.
template <class Real>
double objective_and_gradient(std::span<const Real> params, std::span<const Real> anchor,
                              double mu, std::span<const LayerShape> shapes, Activation act,
                              const Dataset& data, std::span<const std::size_t> rows,
                              std::span<double> grad) {
  double loss = batch_loss_and_gradient<Real>(params, shapes, act, data, rows, grad);
  if (mu != 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double d = static_cast<double>(params[i]) - static_cast<double>(anchor[i]);
      sq += d * d;
      if (!grad.empty()) grad[i] += mu * d;
    }
    loss += 0.5 * mu * sq;
  }
  return loss;
}

}  // namespace colext::kernel
