#include "requant/types.hpp"

#include "requant/errors.hpp"

#include <algorithm>

namespace requant {

void ComputationSpec::validate() const {
    if (hidden.empty()) {
        throw ConfigError("computation spec needs at least 2 affine layers");
    }
    if (input_dim == 0 || classes == 0 ||
        std::any_of(hidden.begin(), hidden.end(), [](std::size_t h) { return h == 0; })) {
        throw ConfigError("computation spec dimensions must be >= 1");
    }
}

std::size_t ComputationSpec::layer_in(std::size_t l) const {
    return l == 0 ? input_dim : hidden[l - 1];
}

std::size_t ComputationSpec::layer_out(std::size_t l) const {
    return l == hidden.size() ? classes : hidden[l];
}

Layout make_layout(const ComputationSpec& spec) {
    spec.validate();
    Layout layout;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        LayerSegment seg;
        seg.name = "fc" + std::to_string(l);
        seg.offset = offset;
        seg.rows = spec.layer_out(l);
        seg.cols = spec.layer_in(l);
        seg.has_bias = true;
        offset += seg.size();
        layout.push_back(std::move(seg));
    }
    return layout;
}

void validate_layout(const Layout& layout) {
    std::size_t expected = 0;
    for (const auto& seg : layout) {
        if (seg.offset != expected) {
            throw ConfigError("layout segment '" + seg.name + "' is not contiguous");
        }
        if (seg.rows == 0 || seg.cols == 0) {
            throw ConfigError("layout segment '" + seg.name + "' has an empty dimension");
        }
        expected = seg.end();
    }
}

std::size_t layout_size(const Layout& layout) {
    return layout.empty() ? 0 : layout.back().end();
}

std::size_t flat_index(const Layout& layout, const Coordinate& c) {
    const auto& seg = layout.at(c.layer);
    if (c.row >= seg.rows || c.col > seg.cols || (c.col == seg.cols && !seg.has_bias)) {
        throw FormatError("coordinate out of bounds for layer '" + seg.name + "'");
    }
    return c.col == seg.cols ? seg.bias_index(c.row) : seg.weight_index(c.row, c.col);
}

Coordinate coordinate_of(const Layout& layout, std::size_t index) {
    for (std::uint32_t l = 0; l < layout.size(); ++l) {
        const auto& seg = layout[l];
        if (index < seg.end()) {
            const std::size_t local = index - seg.offset;
            if (local < seg.weight_count()) {
                return {l, static_cast<std::uint32_t>(local / seg.cols),
                        static_cast<std::uint32_t>(local % seg.cols)};
            }
            return {l, static_cast<std::uint32_t>(local - seg.weight_count()),
                    static_cast<std::uint32_t>(seg.cols)};
        }
    }
    throw FormatError("flat index out of range");
}

bool is_bias(const Layout& layout, const Coordinate& c) {
    return c.col == layout.at(c.layer).cols;
}

std::span<const double> WeightVector::layer_values(std::size_t l) const {
    const auto& seg = layout.at(l);
    return {values.data() + seg.offset, seg.size()};
}

std::span<double> WeightVector::layer_values(std::size_t l) {
    const auto& seg = layout.at(l);
    return {values.data() + seg.offset, seg.size()};
}

WeightVector zeros_like(const Layout& layout) {
    return WeightVector{std::vector<double>(layout_size(layout), 0.0), layout};
}

std::vector<LayerTensors> unflatten(const WeightVector& w) {
    std::vector<LayerTensors> out;
    out.reserve(w.layout.size());
    for (std::size_t l = 0; l < w.layout.size(); ++l) {
        const auto& seg = w.layout[l];
        auto vals = w.layer_values(l);
        LayerTensors t;
        t.rows = seg.rows;
        t.cols = seg.cols;
        t.weights.assign(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(seg.weight_count()));
        if (seg.has_bias) {
            t.bias.assign(vals.begin() + static_cast<std::ptrdiff_t>(seg.weight_count()), vals.end());
        }
        out.push_back(std::move(t));
    }
    return out;
}

WeightVector flatten(const std::vector<LayerTensors>& layers, const Layout& layout) {
    if (layers.size() != layout.size()) {
        throw ConfigError("flatten: layer count does not match layout");
    }
    WeightVector w = zeros_like(layout);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& seg = layout[l];
        const auto& t = layers[l];
        if (t.rows != seg.rows || t.cols != seg.cols || t.weights.size() != seg.weight_count() ||
            t.bias.size() != (seg.has_bias ? seg.rows : 0)) {
            throw ConfigError("flatten: tensor shape does not match layer '" + seg.name + "'");
        }
        auto dst = w.layer_values(l);
        std::copy(t.weights.begin(), t.weights.end(), dst.begin());
        std::copy(t.bias.begin(), t.bias.end(), dst.begin() + static_cast<std::ptrdiff_t>(seg.weight_count()));
    }
    return w;
}

void CalibSet::validate() const {
    if (labels.empty()) {
        throw ConfigError("calibration set is empty");
    }
    if (features.size() != labels.size() * input_dim) {
        throw ConfigError("calibration feature matrix has the wrong size");
    }
    for (auto y : labels) {
        if (y >= classes) {
            throw ConfigError("calibration label out of range");
        }
    }
}

void check_compatible(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    spec.validate();
    calib.validate();
    if (calib.input_dim != spec.input_dim) {
        throw ConfigError("calibration feature dim " + std::to_string(calib.input_dim) +
                          " does not match model input dim " + std::to_string(spec.input_dim));
    }
    if (calib.classes > spec.classes) {
        throw ConfigError("calibration class count exceeds model outputs");
    }
    bool ok = w.layout.size() == spec.layer_count() && w.values.size() == layout_size(w.layout);
    for (std::size_t l = 0; ok && l < w.layout.size(); ++l) {
        ok = w.layout[l].rows == spec.layer_out(l) && w.layout[l].cols == spec.layer_in(l);
    }
    if (!ok) {
        throw ConfigError("weight vector layout does not match the computation spec");
    }
}

}  // namespace requant
