#pragma once

// Dense-and-Sparse requantization:
//
//   1. pre-quantize         w~ = Q(w, v)
//   2. outlier ratio search (temperature grid over per-layer dF_pqi shares)
//   3. select outliers w_o  (largest |w| per layer)
//   4. re-quantize          w~ = Q(w - w_o, v) + w_o
//   5. significant weights  greedy PQI detach in r_s / beta passes
//   6. complete             w~ = Q(w - w_o, v) + w_o + w_s

#include "requant/pqi.hpp"
#include "requant/quantizers.hpp"
#include "requant/types.hpp"

#include <string>
#include <vector>

namespace requant {

struct AllocationResult {
    std::vector<std::size_t> counts;
    std::size_t budget = 0;     // round(D * r_o / 100)
    std::size_t shortfall = 0;  // budget that could not be placed because layers were full
    double temperature = 0.0;   // temperature actually used (0 after the all-zero fallback)
};

/// Splits round(total_params * r_o / 100) outliers across layers in proportion
/// to dF_pqi^t. Fractional shares are resolved by largest remainder (ties to the
/// lower layer index); counts above a layer's capacity are clamped and the
/// excess re-apportioned among the remaining layers.
AllocationResult outlier_allocation(std::span<const double> layer_dfpqi, std::span<const std::size_t> capacities,
                                    std::size_t total_params, double r_o, double t);

/// Largest-|w| `count` coordinates of one layer, ties to ascending (row, col);
/// returned in ascending (row, col) order. Bias entries compete only when
/// `include_bias` is set.
std::vector<Coordinate> select_outliers(const LayerSegment& seg, std::uint32_t layer_index,
                                        std::span<const double> layer_values, std::size_t count,
                                        bool include_bias = false);

/// Plain matrix form used by tests and small callers: rows x cols, row-major.
std::vector<Coordinate> select_outliers(std::span<const double> matrix, std::size_t rows, std::size_t cols,
                                        std::size_t count);

struct PipelineOptions {
    double r_o = 0.45;     // percent of D
    double r_s = 0.05;     // percent of D
    double alpha = 0.1;    // temperature grid step
    double beta = 0.025;   // percent of D detached per pass
    std::size_t intervals = 32;
    bool include_bias = false;
    bool per_layer_significant = false;
    QuadratureRule rule = QuadratureRule::right_endpoint;
};

struct TemperatureTrial {
    double t = 0.0;
    std::vector<std::size_t> counts;
    double loss = 0.0;
};

struct OutlierPlan {
    std::vector<std::size_t> counts;
    double t = 0.0;
    double r_o = 0.0;
    double loss = 0.0;
    std::size_t budget = 0;
    std::size_t shortfall = 0;
    std::vector<double> layer_dfpqi;
    std::vector<TemperatureTrial> trace;
};

/// Per-layer capacity for outlier/significant selection.
std::vector<std::size_t> selectable_counts(const Layout& layout, bool include_bias);

/// Flat-index mask (length D) of the given outlier coordinates.
std::vector<std::uint8_t> coordinate_mask(const Layout& layout, std::span<const Coordinate> coords);

/// Everything Q(., v) needs besides the weights.
struct QuantContext {
    ComputationSpec spec;
    QuantConfig config;
    std::vector<double> sensitivity;                      // v; k-means weights
    std::vector<std::vector<double>> activation;          // channel stats; used when act_exponent != 0

    QuantizedModel quantize(const WeightVector& w, std::span<const std::uint8_t> exclude = {}) const;
};

/// Builds a context with v = Fisher diagonal (and activation stats when the
/// config asks for preprocessing).
QuantContext make_quant_context(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                                const QuantConfig& cfg);

/// Q(w - w_o, v) + w_o with the given per-layer outlier counts.
QuantizedModel quantize_with_outliers(const QuantContext& ctx, const WeightVector& w,
                                      std::span<const std::size_t> counts, bool include_bias);

/// Temperature grid search t in {0, alpha, 2 alpha, ...} < 1 using per-layer
/// dF_pqi between w and the pre-quantized `w_pre`. Each candidate's loss is
/// evaluated once all layers' outliers are selected; ties keep the smaller t.
OutlierPlan outlier_ratio_search(const QuantContext& ctx, const WeightVector& w, const WeightVector& w_pre,
                                 const CalibSet& calib, const PipelineOptions& opts);

struct DetachStep {
    std::size_t step = 0;
    std::vector<Coordinate> detached;
    double delta_f_pqi_before = 0.0;
    double delta_f_pqi_after = 0.0;  // before minus the detached contributions
    double loss_after = 0.0;
};

struct DetachTrace {
    std::vector<DetachStep> steps;
};

struct SignificantResult {
    SparseTriplets w_s;
    DetachTrace trace;
};

/// Number of detach passes r_s / beta; throws ParameterError unless integral.
std::size_t detach_pass_count(double r_s, double beta);

/// Greedy PQI detach. `qm` holds the re-quantized model including w_o. Each
/// pass re-evaluates v_pqi between w and the current w~ and restores the top
/// round(D * beta / 100) coordinates (not in w_o, not yet detached) to f32(w).
SignificantResult significant_weight_search(const ComputationSpec& spec, const WeightVector& w,
                                            const QuantizedModel& qm, const CalibSet& calib,
                                            const PipelineOptions& opts);

enum class SelectionPolicy : std::uint8_t { pqi, random };

struct StepRecord {
    int step = 0;
    std::string description;
    double calib_loss = 0.0;
    double heldout_loss = 0.0;
    double bits_per_weight = 0.0;
};

struct PipelineResult {
    QuantizedModel model;
    OutlierPlan plan;
    DetachTrace detach;
    std::vector<StepRecord> steps;
    double final_loss = 0.0;
};

/// Runs all six steps. With SelectionPolicy::random, w_o and w_s are drawn
/// uniformly from the same candidate pools with identical budgets (seeded by
/// `seed`), as a control for the PQI-guided selection.
PipelineResult run_pipeline(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                            const QuantConfig& cfg, const PipelineOptions& opts,
                            SelectionPolicy policy = SelectionPolicy::pqi, std::uint64_t seed = 0,
                            const CalibSet* heldout = nullptr);

}  // namespace requant
