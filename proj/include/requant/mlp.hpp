#pragma once

// Reverse-mode differentiation of a dense feed-forward classifier.
//
// F(w) = (1/n) sum_i f(w; x_i), f = softmax cross-entropy of the final affine
// layer. Per-sample terms are accumulated in ascending sample order, so every
// function here is bit-reproducible for identical inputs.

#include "requant/types.hpp"

#include <vector>

namespace requant {

/// Mean per-sample loss over the calibration set.
double forward_loss(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

/// Loss of a single sample.
double sample_loss(const ComputationSpec& spec, const WeightVector& w, std::span<const double> x,
                   std::uint32_t label);

/// Gradient of the mean loss with respect to every weight and bias.
std::vector<double> grad(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

/// Loss and gradient from a single pass.
struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> gradient;
};
LossAndGrad loss_and_grad(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

/// Mean loss and gradient over the listed samples only (SGD mini-batches).
LossAndGrad batch_loss_and_grad(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                                std::span<const std::size_t> sample_ids);

/// One gradient per calibration sample, in sample order.
std::vector<std::vector<double>> per_sample_grads(const ComputationSpec& spec, const WeightVector& w,
                                                  const CalibSet& calib);

/// (1/n) sum_i (grad f_i)^2 without materialising the n per-sample vectors.
std::vector<double> mean_squared_sample_grads(const ComputationSpec& spec, const WeightVector& w,
                                              const CalibSet& calib);

/// Per affine layer: mean |input activation| over samples, one entry per input channel.
std::vector<std::vector<double>> activation_stats(const ComputationSpec& spec, const WeightVector& w,
                                                  const CalibSet& calib);

/// Broadcast channel statistics along the output dimension to a length-D vector.
/// Bias coordinates see a constant input of 1.
std::vector<double> broadcast_activation_stats(const Layout& layout,
                                               const std::vector<std::vector<double>>& stats);

/// Predicted class per sample (argmax of logits, ties to the lower class).
std::vector<std::uint32_t> predict(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

double error_rate(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

}  // namespace requant
