#include "requant/pqi.hpp"

#include "requant/errors.hpp"
#include "requant/mlp.hpp"
#include "requant/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace requant {

std::vector<double> PQIResult::contributions() const {
    std::vector<double> out(abs_delta.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = v_pqi.values[j] * abs_delta[j];
    }
    return out;
}

PQIResult pqi_integral(const GradientFn& gradient, std::span<const double> w, std::span<const double> w_tilde,
                       std::size_t intervals, QuadratureRule rule) {
    if (intervals == 0) {
        throw ConfigError("pqi_integral: interval count must be >= 1");
    }
    if (w.size() != w_tilde.size()) {
        throw ConfigError("pqi_integral: w and w~ differ in length");
    }
    const std::size_t D = w.size();
    std::vector<double> delta(D);
    for (std::size_t j = 0; j < D; ++j) {
        delta[j] = w_tilde[j] - w[j];
    }

    PQIResult out;
    out.intervals = intervals;
    out.v_pqi.kind = SensitivityKind::pqi;
    out.v_pqi.values.assign(D, 0.0);
    out.abs_delta.resize(D);
    for (std::size_t j = 0; j < D; ++j) {
        out.abs_delta[j] = std::abs(delta[j]);
    }

    const double n = static_cast<double>(intervals);
    std::vector<double> node(D);
    double signed_sum = 0.0;
    for (std::size_t i = 1; i <= intervals; ++i) {
        const double t = rule == QuadratureRule::right_endpoint ? static_cast<double>(i) / n
                                                                : (static_cast<double>(i) - 0.5) / n;
        for (std::size_t j = 0; j < D; ++j) {
            node[j] = w[j] + t * delta[j];
        }
        const auto g = gradient(node);
        if (g.size() != D) {
            throw ConfigError("pqi_integral: gradient oracle returned the wrong length");
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
            if (!std::isfinite(g[j])) {
                throw NumericalError("pqi_integral: non-finite gradient at node " + std::to_string(i));
            }
            out.v_pqi.values[j] += std::abs(g[j]);
            dot += g[j] * delta[j];
        }
        signed_sum += dot;
    }
    out.signed_delta_f = signed_sum / n;
    for (std::size_t j = 0; j < D; ++j) {
        out.v_pqi.values[j] /= n;
        out.delta_f_pqi += out.v_pqi.values[j] * out.abs_delta[j];
    }
    return out;
}

PQIResult pqi_integral(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                       const CalibSet& calib, std::size_t intervals, QuadratureRule rule) {
    if (!w.same_layout(w_tilde)) {
        throw ConfigError("pqi_integral: layouts differ");
    }
    check_compatible(spec, w, calib);
    WeightVector scratch = w;
    GradientFn fn = [&](std::span<const double> point) {
        std::copy(point.begin(), point.end(), scratch.values.begin());
        return grad(spec, scratch, calib);
    };
    return pqi_integral(fn, w.values, w_tilde.values, intervals, rule);
}

Granularity parse_granularity(const std::string& name) {
    if (name == "all") return Granularity::all;
    if (name == "element") return Granularity::element;
    if (name == "group") return Granularity::group;
    if (name == "layer") return Granularity::layer;
    if (name == "sublayer") return Granularity::sublayer;
    throw ConfigError("unknown aggregation granularity '" + name + "'");
}

std::vector<AggregateRow> aggregate(const PQIResult& result, const Layout& layout, Granularity granularity,
                                    std::size_t group_size) {
    const auto contrib = result.contributions();
    if (contrib.size() != layout_size(layout)) {
        throw ConfigError("aggregate: result does not match the layout");
    }
    std::vector<AggregateRow> rows;
    auto add = [&](std::string label, std::size_t begin, std::size_t count) {
        AggregateRow row;
        row.label = std::move(label);
        row.count = count;
        for (std::size_t j = begin; j < begin + count; ++j) {
            row.sum += contrib[j];
        }
        row.mean = count ? row.sum / static_cast<double>(count) : 0.0;
        rows.push_back(std::move(row));
    };
    switch (granularity) {
        case Granularity::all:
            add("all", 0, contrib.size());
            break;
        case Granularity::element:
            for (std::size_t j = 0; j < contrib.size(); ++j) {
                add(std::to_string(j), j, 1);
            }
            break;
        case Granularity::group:
            for (const auto& seg : layout) {
                std::size_t gi = 0;
                for (const auto& g : group_ranges(seg, group_size)) {
                    add(seg.name + "/g" + std::to_string(gi++), seg.offset + g.begin, g.size);
                }
            }
            break;
        case Granularity::layer:
            for (const auto& seg : layout) {
                add(seg.name, seg.offset, seg.size());
            }
            break;
        case Granularity::sublayer:
            for (const auto& seg : layout) {
                add(seg.name + ".weight", seg.offset, seg.weight_count());
                if (seg.has_bias) {
                    add(seg.name + ".bias", seg.offset + seg.weight_count(), seg.rows);
                }
            }
            break;
    }
    return rows;
}

std::vector<CoveragePoint> coverage_curve(const PQIResult& result, std::span<const double> percents) {
    auto contrib = result.contributions();
    std::sort(contrib.begin(), contrib.end(), std::greater<>());
    std::vector<double> prefix(contrib.size() + 1, 0.0);
    for (std::size_t j = 0; j < contrib.size(); ++j) {
        prefix[j + 1] = prefix[j] + contrib[j];
    }
    const double total = prefix.back();
    std::vector<CoveragePoint> out;
    for (double p : percents) {
        if (!(p >= 0.0 && p <= 100.0)) {
            throw ConfigError("coverage_curve: percent must lie in [0, 100]");
        }
        const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(contrib.size()) * p / 100.0));
        const double frac = total > 0.0 ? prefix[std::min(k, contrib.size())] / total : 0.0;
        out.push_back({p, frac});
    }
    return out;
}

}  // namespace requant
