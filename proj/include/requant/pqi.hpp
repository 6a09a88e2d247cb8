#pragma once

// Post-quantization integral.
//
// The loss change along the straight path w -> w~ is
//
//   dF = [ integral_0^1 grad F(w + t (w~ - w)) dt ]^T (w~ - w)
//
// and the integral is approximated with N right-endpoint rectangles
// (nodes t_i = i / N, i = 1..N). The elementwise absolute average of the node
// gradients is the sensitivity v_pqi; dF_pqi = v_pqi^T |w~ - w| bounds the
// signed estimate from above.

#include "requant/sensitivity.hpp"
#include "requant/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace requant {

/// Gradient of a fixed objective at an arbitrary point.
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

enum class QuadratureRule : std::uint8_t {
    right_endpoint,  ///< t_i = i / N (default)
    midpoint,        ///< t_i = (i - 1/2) / N
};

struct PQIResult {
    SensitivityVector v_pqi;       // kind == pqi
    std::size_t intervals = 0;
    double signed_delta_f = 0.0;   // (1/N) sum_i grad F(node_i)^T (w~ - w)
    double delta_f_pqi = 0.0;      // sum_j v_pqi_j |w~_j - w_j|
    std::vector<double> abs_delta; // |w~ - w|

    /// Elementwise v_pqi * |w~ - w|.
    std::vector<double> contributions() const;
};

/// Path integral for an arbitrary gradient oracle. Throws NumericalError
/// naming the node index if any node gradient is non-finite.
PQIResult pqi_integral(const GradientFn& gradient, std::span<const double> w, std::span<const double> w_tilde,
                       std::size_t intervals, QuadratureRule rule = QuadratureRule::right_endpoint);

/// Path integral of the mean calibration loss of a model.
PQIResult pqi_integral(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                       const CalibSet& calib, std::size_t intervals,
                       QuadratureRule rule = QuadratureRule::right_endpoint);

enum class Granularity : std::uint8_t { all, element, group, layer, sublayer };

/// Parses "all", "element", "group", "layer", "sublayer"; throws ConfigError otherwise.
Granularity parse_granularity(const std::string& name);

struct AggregateRow {
    std::string label;
    std::size_t count = 0;
    double sum = 0.0;
    double mean = 0.0;
};

/// Sums and means of v_pqi * |dw| over a partition of the coordinates. Group
/// granularity uses the uniform-quantizer groups of size `group_size`;
/// sublayer splits every layer into its weight matrix and bias.
std::vector<AggregateRow> aggregate(const PQIResult& result, const Layout& layout, Granularity granularity,
                                    std::size_t group_size = 32);

struct CoveragePoint {
    double top_percent = 0.0;
    double fraction = 0.0;  // share of delta_f_pqi covered by the top entries
};

/// Cumulative share of delta_f_pqi covered by the top p% elementwise
/// contributions, for each requested p in [0, 100]. The number of elements is
/// round(D * p / 100). Returns an all-zero curve when delta_f_pqi == 0.
std::vector<CoveragePoint> coverage_curve(const PQIResult& result, std::span<const double> percents);

}  // namespace requant
