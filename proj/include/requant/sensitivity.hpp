#pragma once

// Pre-quantization sensitivity metrics and the truncated Taylor predictors of
// the loss change:
//
//   dF ~= grad F(w)^T (w~ - w) + 1/2 (w~ - w)^T H (w~ - w)
//
// with H the (signed) diagonal Fisher approximation.

#include "requant/quantizers.hpp"
#include "requant/types.hpp"

#include <string>
#include <vector>

namespace requant {

enum class SensitivityKind : std::uint8_t { gradient, activation, fisher_diag, pqi };

const char* to_string(SensitivityKind kind);

/// Nonnegative per-coordinate importance, length D.
struct SensitivityVector {
    std::vector<double> values;
    SensitivityKind kind = SensitivityKind::gradient;
};

/// Sign applied to the Fisher diagonal when it stands in for H. `paper` (-1)
/// follows the H ~= -(1/n) sum g g^T form; `conventional` (+1) is the usual PSD one.
enum class FisherSign : std::int8_t { paper = -1, conventional = 1 };

SensitivityVector metric_gradient(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);
SensitivityVector metric_activation(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);
/// (1/n) sum_i (grad f_i)^2, always nonnegative.
SensitivityVector metric_fisher_diag(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

/// Indices of the k largest entries, ties broken by lower index, returned in
/// descending-score order.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

/// grad F(w)^T (w~ - w) given a precomputed gradient.
double taylor_first(std::span<const double> gradient, const WeightVector& w, const WeightVector& w_tilde);
double taylor_first(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                    const CalibSet& calib);

/// 1/2 sum_j sign * fisher_j * (w~_j - w_j)^2.
double taylor_second(std::span<const double> fisher_diag, FisherSign sign, const WeightVector& w,
                     const WeightVector& w_tilde);
double taylor_second(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                     const CalibSet& calib, FisherSign sign);

struct TaylorRow {
    std::string scope;  // layer name, "All", or a lambda value
    double lambda = 1.0;
    double first_order = 0.0;
    double second_order = 0.0;
    double actual = 0.0;           // F(w~) - F(w) on the calibration set
    double actual_heldout = 0.0;   // same on the held-out set (0 when none is given)
};

struct TaylorReport {
    std::vector<TaylorRow> rows;
    double base_loss = 0.0;
};

/// Quantize each layer alone (others full precision), then all layers, with no
/// detached outliers; record the first/second-order terms and actual dF.
TaylorReport layer_study(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                         const QuantConfig& cfg, FisherSign sign, const CalibSet* heldout = nullptr);

/// Rows for w' = interpolate(w, w~, lambda) over each lambda in (0, 1].
TaylorReport lambda_study(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                          const CalibSet& calib, std::span<const double> lambdas, FisherSign sign,
                          const CalibSet* heldout = nullptr);

/// Full-precision w with layer `layer` replaced by its quantized values.
WeightVector quantize_single_layer(const ComputationSpec& spec, const WeightVector& w, const QuantConfig& cfg,
                                   std::span<const double> sensitivity, std::size_t layer);

}  // namespace requant
