#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace requant {

enum class Activation : std::uint8_t { relu = 0, tanh = 1 };
enum class LossKind : std::uint8_t { softmax_cross_entropy = 0 };

/// Shape of a dense feed-forward classifier: input -> hidden... -> classes.
struct ComputationSpec {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t classes = 8;
    Activation activation = Activation::relu;
    LossKind loss = LossKind::softmax_cross_entropy;

    /// Throws ConfigError unless there are >= 2 affine layers and all dims >= 1.
    void validate() const;
    std::size_t layer_count() const { return hidden.size() + 1; }
    /// (in, out) width of affine layer `l`.
    std::size_t layer_in(std::size_t l) const;
    std::size_t layer_out(std::size_t l) const;

    bool operator==(const ComputationSpec&) const = default;
};

/// One affine layer's slice of the flat parameter vector. Weights are stored
/// row-major (rows = outputs, cols = inputs), followed by `rows` bias entries.
struct LayerSegment {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool has_bias = true;

    std::size_t weight_count() const { return rows * cols; }
    std::size_t size() const { return rows * cols + (has_bias ? rows : 0); }
    std::size_t end() const { return offset + size(); }
    std::size_t weight_index(std::size_t r, std::size_t c) const { return offset + r * cols + c; }
    std::size_t bias_index(std::size_t r) const { return offset + rows * cols + r; }

    bool operator==(const LayerSegment&) const = default;
};

/// Layer-local address. `col == cols` denotes the bias entry of row `row`.
struct Coordinate {
    std::uint32_t layer = 0;
    std::uint32_t row = 0;
    std::uint32_t col = 0;

    auto operator<=>(const Coordinate&) const = default;
};

using Layout = std::vector<LayerSegment>;

/// Builds the contiguous layout for `spec`, layers named "fc0", "fc1", ...
Layout make_layout(const ComputationSpec& spec);

/// Throws ConfigError if segments are not contiguous from 0.
void validate_layout(const Layout& layout);
std::size_t layout_size(const Layout& layout);

/// Flat index of a layer-local coordinate.
std::size_t flat_index(const Layout& layout, const Coordinate& c);
/// Inverse of flat_index.
Coordinate coordinate_of(const Layout& layout, std::size_t index);
bool is_bias(const Layout& layout, const Coordinate& c);

/// w in R^D together with its layer layout.
struct WeightVector {
    std::vector<double> values;
    Layout layout;

    std::size_t size() const { return values.size(); }
    std::span<const double> layer_values(std::size_t l) const;
    std::span<double> layer_values(std::size_t l);
    bool same_layout(const WeightVector& other) const { return layout == other.layout; }
};

WeightVector zeros_like(const Layout& layout);

/// Per-layer matrix view used by flatten/unflatten.
struct LayerTensors {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> weights;  // row-major
    std::vector<double> bias;     // empty when the layer has no bias
};

std::vector<LayerTensors> unflatten(const WeightVector& w);
WeightVector flatten(const std::vector<LayerTensors>& layers, const Layout& layout);

/// Calibration samples; features stored row-major (n x input_dim).
struct CalibSet {
    std::size_t input_dim = 0;
    std::size_t classes = 0;
    std::vector<double> features;
    std::vector<std::uint32_t> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const double> sample(std::size_t i) const {
        return {features.data() + i * input_dim, input_dim};
    }
    void validate() const;
};

/// Throws ConfigError when the calibration set cannot feed `spec`.
void check_compatible(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib);

}  // namespace requant
