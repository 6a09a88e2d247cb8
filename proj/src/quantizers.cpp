#include "requant/quantizers.hpp"

#include "requant/errors.hpp"
#include "requant/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace requant {

namespace {

bool excluded(std::span<const std::uint8_t> mask, std::size_t j) { return !mask.empty() && mask[j] != 0; }

std::size_t groups_per_row(const LayerSegment& seg, std::size_t g) { return (seg.cols + g - 1) / g; }

// Group index of a layer-local coordinate, matching group_ranges() order.
std::size_t group_of(const LayerSegment& seg, std::size_t g, std::size_t local) {
    const std::size_t gpr = groups_per_row(seg, g);
    if (local < seg.weight_count()) {
        return (local / seg.cols) * gpr + (local % seg.cols) / g;
    }
    return seg.rows * gpr + (local - seg.weight_count()) / g;
}

double channel_factor(const QuantizedLayer& layer, std::size_t local) {
    if (layer.channel_scales.empty() || local >= layer.segment.weight_count()) {
        return 1.0;
    }
    return static_cast<double>(layer.channel_scales[local % layer.segment.cols]);
}

double dequant_at(const QuantizedModel& qm, const QuantizedLayer& layer, std::size_t local) {
    const std::int32_t code = layer.codes[local];
    if (qm.config.mode == QuantMode::kmeans_codebook) {
        return static_cast<double>(layer.codebook[static_cast<std::size_t>(code)]);
    }
    const double scale = static_cast<double>(layer.scales[group_of(layer.segment, qm.config.group_size, local)]);
    return scale * static_cast<double>(code) / channel_factor(layer, local);
}

std::size_t nearest_centroid(double x, std::span<const double> centroids) {
    std::size_t best = 0;
    double best_d = std::abs(x - centroids[0]);
    for (std::size_t k = 1; k < centroids.size(); ++k) {
        const double d = std::abs(x - centroids[k]);
        if (d < best_d) {
            best = k;
            best_d = d;
        }
    }
    return best;
}

// Index drawn with probability proportional to `mass` (uniform if all zero).
std::size_t sample_proportional(std::span<const double> mass, Rng& rng) {
    double total = 0.0;
    for (double m : mass) {
        total += m;
    }
    if (!(total > 0.0)) {
        return static_cast<std::size_t>(rng.below(mass.size()));
    }
    const double target = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t j = 0; j < mass.size(); ++j) {
        acc += mass[j];
        if (target < acc && mass[j] > 0.0) {
            return j;
        }
    }
    for (std::size_t j = mass.size(); j-- > 0;) {
        if (mass[j] > 0.0) {
            return j;
        }
    }
    return 0;
}

}  // namespace

void QuantConfig::validate() const {
    if (bits < 2 || bits > 8) {
        throw ConfigError("quantizer bits must be in [2, 8]");
    }
    if (mode == QuantMode::uniform_group && group_size == 0) {
        throw ConfigError("group size must be >= 1");
    }
    if (mode == QuantMode::kmeans_codebook && act_exponent != 0.0) {
        throw ConfigError("activation preprocessing is only defined for uniform mode");
    }
    if (!std::isfinite(act_exponent) || act_exponent < 0.0) {
        throw ConfigError("activation exponent must be finite and >= 0");
    }
}

std::int32_t QuantConfig::max_code() const {
    return int_range == IntRange::paper_literal ? (std::int32_t{1} << bits) - 1
                                                : (std::int32_t{1} << (bits - 1)) - 1;
}

int QuantConfig::code_bits() const {
    if (mode == QuantMode::uniform_group && int_range == IntRange::paper_literal) {
        return bits + 1;
    }
    return bits;
}

std::vector<GroupRange> group_ranges(const LayerSegment& seg, std::size_t group_size) {
    if (group_size == 0) {
        throw ConfigError("group size must be >= 1");
    }
    std::vector<GroupRange> out;
    for (std::size_t r = 0; r < seg.rows; ++r) {
        for (std::size_t c = 0; c < seg.cols; c += group_size) {
            out.push_back({r * seg.cols + c, std::min(group_size, seg.cols - c)});
        }
    }
    if (seg.has_bias) {
        for (std::size_t r = 0; r < seg.rows; r += group_size) {
            out.push_back({seg.weight_count() + r, std::min(group_size, seg.rows - r)});
        }
    }
    return out;
}

void quantize_group(std::span<const double> values, const QuantConfig& cfg, float& scale,
                    std::span<std::int32_t> codes) {
    double max_abs = 0.0;
    for (double v : values) {
        max_abs = std::max(max_abs, std::abs(v));
    }
    const std::int32_t qmax = cfg.max_code();
    if (max_abs == 0.0) {
        scale = 0.0f;
        std::fill(codes.begin(), codes.end(), 0);
        return;
    }
    const double s = max_abs / static_cast<double>(qmax);
    for (std::size_t j = 0; j < values.size(); ++j) {
        // nearbyint honours the default round-half-to-even mode.
        const double q = std::nearbyint(values[j] / s);
        codes[j] = static_cast<std::int32_t>(std::clamp(q, -static_cast<double>(qmax), static_cast<double>(qmax)));
    }
    scale = static_cast<float>(s);
}

UniformCodes quantize_uniform(const LayerSegment& seg, std::span<const double> values, const QuantConfig& cfg,
                              std::span<const std::uint8_t> exclude) {
    cfg.validate();
    if (values.size() != seg.size() || (!exclude.empty() && exclude.size() != seg.size())) {
        throw ConfigError("quantize_uniform: value or mask length does not match layer '" + seg.name + "'");
    }
    UniformCodes out;
    out.codes.assign(seg.size(), 0);
    std::vector<double> buf;
    for (const auto& g : group_ranges(seg, cfg.group_size)) {
        buf.assign(values.begin() + static_cast<std::ptrdiff_t>(g.begin),
                   values.begin() + static_cast<std::ptrdiff_t>(g.begin + g.size));
        for (std::size_t j = 0; j < g.size; ++j) {
            if (excluded(exclude, g.begin + j)) {
                buf[j] = 0.0;
            }
        }
        float scale = 0.0f;
        quantize_group(buf, cfg, scale, std::span<std::int32_t>(out.codes).subspan(g.begin, g.size));
        out.scales.push_back(scale);
    }
    return out;
}

double kmeans_objective(std::span<const double> values, std::span<const double> weights,
                        std::span<const double> codebook, std::span<const std::uint32_t> assignments,
                        std::span<const std::uint8_t> exclude) {
    double obj = 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
        if (excluded(exclude, j)) {
            continue;
        }
        const double d = codebook[assignments[j]] - values[j];
        obj += (weights.empty() ? 1.0 : weights[j]) * d * d;
    }
    return obj;
}

KMeansResult quantize_kmeans(std::span<const double> values, std::span<const double> weights, std::size_t k,
                             std::uint64_t seed, std::size_t iters, std::span<const std::uint8_t> exclude) {
    if (k == 0) {
        throw ConfigError("codebook size must be >= 1");
    }
    if ((!weights.empty() && weights.size() != values.size()) || (!exclude.empty() && exclude.size() != values.size())) {
        throw ConfigError("quantize_kmeans: weight or mask length mismatch");
    }
    for (double v : weights) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConfigError("quantize_kmeans: weights must be finite and nonnegative");
        }
    }

    std::vector<std::size_t> fit;
    for (std::size_t j = 0; j < values.size(); ++j) {
        if (!excluded(exclude, j)) {
            fit.push_back(j);
        }
    }
    auto weight_of = [&](std::size_t j) { return weights.empty() ? 1.0 : weights[j]; };

    KMeansResult out;
    std::vector<double> centroids(k, 0.0);

    if (!fit.empty()) {
        Rng rng(seed);
        std::vector<double> mass(fit.size());
        for (std::size_t i = 0; i < fit.size(); ++i) {
            mass[i] = weight_of(fit[i]);
        }
        centroids[0] = values[fit[sample_proportional(mass, rng)]];
        std::vector<double> d2(fit.size(), std::numeric_limits<double>::infinity());
        for (std::size_t c = 1; c < k; ++c) {
            for (std::size_t i = 0; i < fit.size(); ++i) {
                const double d = values[fit[i]] - centroids[c - 1];
                d2[i] = std::min(d2[i], d * d);
                mass[i] = weight_of(fit[i]) * d2[i];
            }
            centroids[c] = values[fit[sample_proportional(mass, rng)]];
        }

        std::vector<std::uint32_t> assign(values.size(), 0);
        std::vector<std::uint32_t> previous;
        std::vector<double> wsum(k), wx(k), cnt(k), sx(k);
        for (std::size_t it = 0; it < iters; ++it) {
            for (std::size_t j : fit) {
                assign[j] = static_cast<std::uint32_t>(nearest_centroid(values[j], centroids));
            }
            std::fill(wsum.begin(), wsum.end(), 0.0);
            std::fill(wx.begin(), wx.end(), 0.0);
            std::fill(cnt.begin(), cnt.end(), 0.0);
            std::fill(sx.begin(), sx.end(), 0.0);
            for (std::size_t j : fit) {
                const auto a = assign[j];
                wsum[a] += weight_of(j);
                wx[a] += weight_of(j) * values[j];
                cnt[a] += 1.0;
                sx[a] += values[j];
            }
            bool reseeded = false;
            for (std::size_t c = 0; c < k; ++c) {
                if (wsum[c] > 0.0) {
                    centroids[c] = wx[c] / wsum[c];
                } else if (cnt[c] > 0.0) {
                    // Zero-weight cluster: any centre gives zero objective.
                    centroids[c] = sx[c] / cnt[c];
                }
            }
            for (std::size_t c = 0; c < k; ++c) {
                if (cnt[c] > 0.0) {
                    continue;
                }
                std::size_t far = fit.front();
                double far_err = -1.0;
                for (std::size_t j : fit) {
                    const double d = centroids[assign[j]] - values[j];
                    const double err = weight_of(j) * d * d;
                    if (err > far_err) {
                        far = j;
                        far_err = err;
                    }
                }
                if (far_err > 0.0) {
                    centroids[c] = values[far];
                    assign[far] = static_cast<std::uint32_t>(c);
                    cnt[c] = 1.0;
                    reseeded = true;
                }
            }
            out.objective_trace.push_back(kmeans_objective(values, weights, centroids, assign, exclude));
            if (!reseeded && assign == previous) {
                break;
            }
            previous = assign;
        }
    }

    std::sort(centroids.begin(), centroids.end());
    out.codebook.resize(k);
    std::vector<double> stored(k);
    for (std::size_t c = 0; c < k; ++c) {
        out.codebook[c] = static_cast<float>(centroids[c]);
        stored[c] = static_cast<double>(out.codebook[c]);
    }
    out.assignments.resize(values.size());
    for (std::size_t j = 0; j < values.size(); ++j) {
        const double x = excluded(exclude, j) ? 0.0 : values[j];
        out.assignments[j] = static_cast<std::uint32_t>(nearest_centroid(x, stored));
    }
    return out;
}

void validate_triplets(const SparseTriplets& t, const Layout& layout) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        flat_index(layout, t[i].coord);  // throws on out-of-bounds
        if (i > 0 && !(t[i - 1].coord < t[i].coord)) {
            throw FormatError("sparse triplets are not strictly increasing");
        }
    }
}

SparseTriplets make_triplets(const WeightVector& w, std::span<const std::size_t> flat_indices) {
    SparseTriplets out;
    out.reserve(flat_indices.size());
    for (std::size_t j : flat_indices) {
        out.push_back({coordinate_of(w.layout, j), static_cast<float>(w.values.at(j))});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.coord < b.coord; });
    validate_triplets(out, w.layout);
    return out;
}

Layout QuantizedModel::layout() const {
    Layout out;
    out.reserve(layers.size());
    for (const auto& l : layers) {
        out.push_back(l.segment);
    }
    return out;
}

void QuantizedModel::validate() const {
    config.validate();
    const Layout lay = layout();
    validate_layout(lay);
    for (const auto& layer : layers) {
        const auto& seg = layer.segment;
        if (layer.codes.size() != seg.size()) {
            throw FormatError("layer '" + seg.name + "' has the wrong number of codes");
        }
        if (config.mode == QuantMode::uniform_group) {
            if (layer.scales.size() != group_ranges(seg, config.group_size).size()) {
                throw FormatError("layer '" + seg.name + "' has the wrong number of scales");
            }
            const std::int32_t qmax = config.max_code();
            for (auto c : layer.codes) {
                if (c < -qmax || c > qmax) {
                    throw FormatError("layer '" + seg.name + "' has an out-of-range code");
                }
            }
            if (!layer.channel_scales.empty() && layer.channel_scales.size() != seg.cols) {
                throw FormatError("layer '" + seg.name + "' has the wrong number of channel scales");
            }
        } else {
            if (layer.codebook.size() != config.codebook_size()) {
                throw FormatError("layer '" + seg.name + "' has the wrong codebook size");
            }
            for (auto c : layer.codes) {
                if (c < 0 || static_cast<std::size_t>(c) >= layer.codebook.size()) {
                    throw FormatError("layer '" + seg.name + "' has an out-of-range codebook index");
                }
            }
        }
    }
    validate_triplets(outliers, lay);
    validate_triplets(significant, lay);
    // Both lists are sorted, so a merge walk finds any shared coordinate.
    std::size_t a = 0, b = 0;
    while (a < outliers.size() && b < significant.size()) {
        if (outliers[a].coord == significant[b].coord) {
            throw FormatError("outlier and significant overlays share a coordinate");
        }
        if (outliers[a].coord < significant[b].coord) {
            ++a;
        } else {
            ++b;
        }
    }
}

QuantizedModel quantize_model(const ComputationSpec& spec, const WeightVector& w, const QuantConfig& cfg,
                              std::span<const double> sensitivity, std::span<const std::uint8_t> exclude,
                              const std::vector<std::vector<double>>* activation) {
    cfg.validate();
    spec.validate();
    if ((!sensitivity.empty() && sensitivity.size() != w.size()) || (!exclude.empty() && exclude.size() != w.size())) {
        throw ConfigError("quantize_model: sensitivity or mask is not aligned with w");
    }
    const bool scale_channels = cfg.mode == QuantMode::uniform_group && cfg.act_exponent != 0.0;
    if (scale_channels && (activation == nullptr || activation->size() != w.layout.size())) {
        throw ConfigError("quantize_model: activation preprocessing needs per-layer activation stats");
    }

    QuantizedModel qm;
    qm.spec = spec;
    qm.config = cfg;
    qm.meta.seed = cfg.seed;
    for (std::size_t l = 0; l < w.layout.size(); ++l) {
        const auto& seg = w.layout[l];
        const auto values = w.layer_values(l);
        const auto mask = exclude.empty() ? std::span<const std::uint8_t>{} : exclude.subspan(seg.offset, seg.size());
        QuantizedLayer layer;
        layer.segment = seg;
        if (cfg.mode == QuantMode::uniform_group) {
            std::vector<double> scaled(values.begin(), values.end());
            if (scale_channels) {
                const auto& stats = (*activation)[l];
                if (stats.size() != seg.cols) {
                    throw ConfigError("activation stats width does not match layer '" + seg.name + "'");
                }
                layer.channel_scales.resize(seg.cols);
                for (std::size_t c = 0; c < seg.cols; ++c) {
                    layer.channel_scales[c] = static_cast<float>(std::pow(std::max(stats[c], 1e-8), cfg.act_exponent));
                }
                for (std::size_t j = 0; j < seg.weight_count(); ++j) {
                    scaled[j] *= static_cast<double>(layer.channel_scales[j % seg.cols]);
                }
            }
            auto codes = quantize_uniform(seg, scaled, cfg, mask);
            layer.codes = std::move(codes.codes);
            layer.scales = std::move(codes.scales);
        } else {
            const auto weights = sensitivity.empty() ? std::span<const double>{}
                                                     : sensitivity.subspan(seg.offset, seg.size());
            auto km = quantize_kmeans(values, weights, cfg.codebook_size(), derive_seed(cfg.seed, "kmeans-" + seg.name),
                                      cfg.kmeans_iters, mask);
            layer.codebook = std::move(km.codebook);
            layer.codes.assign(km.assignments.begin(), km.assignments.end());
        }
        qm.layers.push_back(std::move(layer));
    }
    return qm;
}

std::vector<double> dequantize_layer(const QuantizedModel& qm, std::size_t l) {
    const auto& layer = qm.layers.at(l);
    std::vector<double> out(layer.segment.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = dequant_at(qm, layer, j);
    }
    return out;
}

WeightVector reconstruct(const QuantizedModel& qm) {
    qm.validate();
    WeightVector w = zeros_like(qm.layout());
    for (std::size_t l = 0; l < qm.layers.size(); ++l) {
        const auto dense = dequantize_layer(qm, l);
        std::copy(dense.begin(), dense.end(), w.layer_values(l).begin());
    }
    for (const auto* overlay : {&qm.outliers, &qm.significant}) {
        for (const auto& t : *overlay) {
            w.values[flat_index(w.layout, t.coord)] = static_cast<double>(t.value);
        }
    }
    return w;
}

std::vector<double> sparse_matvec(const QuantizedModel& qm, std::size_t l, std::span<const double> x) {
    const auto& layer = qm.layers.at(l);
    const auto& seg = layer.segment;
    if (x.size() != seg.cols) {
        throw ConfigError("sparse_matvec: x has length " + std::to_string(x.size()) + ", layer '" + seg.name +
                          "' expects " + std::to_string(seg.cols));
    }
    std::vector<double> y(seg.rows, 0.0);
    if (qm.config.mode == QuantMode::uniform_group) {
        const std::size_t g = qm.config.group_size;
        const std::size_t gpr = groups_per_row(seg, g);
        std::vector<double> xs(x.begin(), x.end());
        if (!layer.channel_scales.empty()) {
            for (std::size_t c = 0; c < seg.cols; ++c) {
                xs[c] /= static_cast<double>(layer.channel_scales[c]);
            }
        }
        for (std::size_t r = 0; r < seg.rows; ++r) {
            const std::int32_t* codes = layer.codes.data() + r * seg.cols;
            double acc = 0.0;
            for (std::size_t gi = 0; gi < gpr; ++gi) {
                const std::size_t c0 = gi * g;
                const std::size_t c1 = std::min(seg.cols, c0 + g);
                double dot = 0.0;
                for (std::size_t c = c0; c < c1; ++c) {
                    dot += static_cast<double>(codes[c]) * xs[c];
                }
                acc += static_cast<double>(layer.scales[r * gpr + gi]) * dot;
            }
            y[r] = acc;
        }
    } else {
        for (std::size_t r = 0; r < seg.rows; ++r) {
            const std::int32_t* codes = layer.codes.data() + r * seg.cols;
            double acc = 0.0;
            for (std::size_t c = 0; c < seg.cols; ++c) {
                acc += static_cast<double>(layer.codebook[static_cast<std::size_t>(codes[c])]) * x[c];
            }
            y[r] = acc;
        }
    }
    if (seg.has_bias) {
        for (std::size_t r = 0; r < seg.rows; ++r) {
            y[r] += dequant_at(qm, layer, seg.weight_count() + r);
        }
    }
    // Overlay entries replace the dense value: add (stored - dense) * input.
    for (const auto* overlay : {&qm.outliers, &qm.significant}) {
        auto first = std::lower_bound(overlay->begin(), overlay->end(), static_cast<std::uint32_t>(l),
                                      [](const SparseTriplet& t, std::uint32_t layer_id) { return t.coord.layer < layer_id; });
        for (auto it = first; it != overlay->end() && it->coord.layer == l; ++it) {
            const auto& c = it->coord;
            if (c.row >= seg.rows || c.col > seg.cols) {
                throw FormatError("overlay coordinate out of bounds in layer '" + seg.name + "'");
            }
            const bool bias = c.col == seg.cols;
            const std::size_t local = bias ? seg.weight_count() + c.row : c.row * seg.cols + c.col;
            const double input = bias ? 1.0 : x[c.col];
            y[c.row] += (static_cast<double>(it->value) - dequant_at(qm, layer, local)) * input;
        }
    }
    return y;
}

StorageReport storage_report(const QuantizedModel& qm) {
    StorageReport r;
    r.params = qm.param_count();
    r.code_bits = static_cast<double>(r.params) * qm.config.code_bits();
    std::size_t floats = 0;
    for (const auto& layer : qm.layers) {
        floats += layer.scales.size() + layer.codebook.size() + layer.channel_scales.size();
    }
    r.scale_bits = 32.0 * static_cast<double>(floats);
    r.overlay_nonzeros = qm.outliers.size() + qm.significant.size();
    r.overlay_bits = static_cast<double>(kOverlayBitsPerNonzero) * static_cast<double>(r.overlay_nonzeros);
    return r;
}

double overlay_bits_per_weight(std::size_t nonzeros, std::size_t params) {
    if (params == 0) {
        throw ConfigError("overlay_bits_per_weight: zero parameters");
    }
    return static_cast<double>(kOverlayBitsPerNonzero) * static_cast<double>(nonzeros) / static_cast<double>(params);
}

std::vector<std::uint8_t> pack_codes(std::span<const std::int32_t> codes, int bits) {
    if (bits < 1 || bits > 16) {
        throw ConfigError("pack_codes: bit width must be in [1, 16]");
    }
    const std::size_t total_bits = codes.size() * static_cast<std::size_t>(bits);
    std::vector<std::uint8_t> out((total_bits + 7) / 8, 0);
    const std::uint32_t mask = (1u << bits) - 1u;
    std::size_t pos = 0;
    for (auto code : codes) {
        const std::uint32_t field = static_cast<std::uint32_t>(code) & mask;
        for (int b = 0; b < bits; ++b, ++pos) {
            if ((field >> b) & 1u) {
                out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
            }
        }
    }
    return out;
}

std::vector<std::int32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count, int bits,
                                       bool is_signed) {
    if (bits < 1 || bits > 16) {
        throw ConfigError("unpack_codes: bit width must be in [1, 16]");
    }
    if (packed.size() * 8 < count * static_cast<std::size_t>(bits)) {
        throw FormatError("packed code stream is truncated");
    }
    std::vector<std::int32_t> out(count);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t field = 0;
        for (int b = 0; b < bits; ++b, ++pos) {
            field |= static_cast<std::uint32_t>((packed[pos / 8] >> (pos % 8)) & 1u) << b;
        }
        if (is_signed && (field >> (bits - 1)) & 1u) {
            out[i] = static_cast<std::int32_t>(field) - (std::int32_t{1} << bits);
        } else {
            out[i] = static_cast<std::int32_t>(field);
        }
    }
    return out;
}

}  // namespace requant
