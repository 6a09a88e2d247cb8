#include "requant/pipeline.hpp"

#include "requant/errors.hpp"
#include "requant/mlp.hpp"
#include "requant/rng.hpp"
#include "requant/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace requant {

namespace {

// Largest-remainder apportionment of `budget` by `shares` (all >= 0, not all 0).
std::vector<std::size_t> apportion(std::size_t budget, std::span<const double> shares) {
    const double total = std::accumulate(shares.begin(), shares.end(), 0.0);
    std::vector<std::size_t> out(shares.size(), 0);
    if (budget == 0 || shares.empty()) {
        return out;
    }
    std::vector<double> remainder(shares.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < shares.size(); ++i) {
        const double ideal = static_cast<double>(budget) * shares[i] / total;
        out[i] = static_cast<std::size_t>(std::floor(ideal));
        remainder[i] = ideal - std::floor(ideal);
        assigned += out[i];
    }
    std::vector<std::size_t> order(shares.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < budget; k = (k + 1) % order.size()) {
        ++out[order[k]];
        ++assigned;
    }
    return out;
}

std::size_t percent_of(std::size_t total, double percent) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(total) * percent / 100.0));
}

bool selectable(const Layout& layout, std::size_t flat, bool include_bias) {
    return include_bias || !is_bias(layout, coordinate_of(layout, flat));
}

SparseTriplets outlier_triplets(const WeightVector& w, std::span<const Coordinate> coords) {
    SparseTriplets out;
    out.reserve(coords.size());
    for (const auto& c : coords) {
        out.push_back({c, static_cast<float>(w.values[flat_index(w.layout, c)])});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.coord < b.coord; });
    return out;
}

QuantizedModel quantize_with_coords(const QuantContext& ctx, const WeightVector& w, std::span<const Coordinate> coords) {
    const auto mask = coordinate_mask(w.layout, coords);
    QuantizedModel qm = ctx.quantize(w, mask);
    qm.outliers = outlier_triplets(w, coords);
    return qm;
}

double storage_bits(const QuantizedModel& qm) { return storage_report(qm).bits_per_weight(); }

}  // namespace

AllocationResult outlier_allocation(std::span<const double> layer_dfpqi, std::span<const std::size_t> capacities,
                                    std::size_t total_params, double r_o, double t) {
    if (layer_dfpqi.size() != capacities.size() || layer_dfpqi.empty()) {
        throw ParameterError("outlier_allocation: need one dF_pqi and one capacity per layer");
    }
    if (!(r_o >= 0.0 && r_o <= 100.0)) {
        throw ParameterError("outlier_allocation: r_o must lie in [0, 100]");
    }
    if (!(t >= 0.0) || !std::isfinite(t)) {
        throw ParameterError("outlier_allocation: temperature must be finite and >= 0");
    }
    for (double d : layer_dfpqi) {
        if (!(d >= 0.0) || !std::isfinite(d)) {
            throw ParameterError("outlier_allocation: per-layer dF_pqi must be finite and >= 0");
        }
    }

    AllocationResult out;
    out.budget = percent_of(total_params, r_o);
    out.temperature = t;
    const std::size_t L = layer_dfpqi.size();
    std::vector<double> shares(L);
    for (std::size_t i = 0; i < L; ++i) {
        shares[i] = std::pow(layer_dfpqi[i], t);  // pow(0, 0) == 1
    }
    if (std::accumulate(shares.begin(), shares.end(), 0.0) == 0.0) {
        out.temperature = 0.0;
        std::fill(shares.begin(), shares.end(), 1.0);
    }

    out.counts.assign(L, 0);
    std::vector<bool> clamped(L, false);
    std::size_t remaining = out.budget;
    while (remaining > 0) {
        std::vector<std::size_t> active;
        std::vector<double> active_shares;
        for (std::size_t i = 0; i < L; ++i) {
            if (!clamped[i]) {
                active.push_back(i);
                active_shares.push_back(shares[i]);
            }
        }
        if (active.empty()) {
            break;
        }
        if (std::accumulate(active_shares.begin(), active_shares.end(), 0.0) == 0.0) {
            std::fill(active_shares.begin(), active_shares.end(), 1.0);
        }
        const auto alloc = apportion(remaining, active_shares);
        bool violated = false;
        for (std::size_t k = 0; k < active.size(); ++k) {
            violated = violated || alloc[k] > capacities[active[k]];
        }
        if (!violated) {
            for (std::size_t k = 0; k < active.size(); ++k) {
                out.counts[active[k]] = alloc[k];
            }
            remaining = 0;
            break;
        }
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t i = active[k];
            if (alloc[k] > capacities[i]) {
                clamped[i] = true;
                out.counts[i] = capacities[i];
                remaining -= capacities[i];
            }
        }
    }
    out.shortfall = remaining;
    return out;
}

std::vector<Coordinate> select_outliers(const LayerSegment& seg, std::uint32_t layer_index,
                                        std::span<const double> layer_values, std::size_t count, bool include_bias) {
    if (layer_values.size() != seg.size()) {
        throw ConfigError("select_outliers: value count does not match layer '" + seg.name + "'");
    }
    const std::size_t candidates = include_bias ? seg.size() : seg.weight_count();
    if (count > candidates) {
        throw ParameterError("select_outliers: count exceeds the layer's selectable coordinates");
    }
    std::vector<double> mags(candidates);
    for (std::size_t j = 0; j < candidates; ++j) {
        mags[j] = std::abs(layer_values[j]);
    }
    // Layer-local order equals ascending (row, col) with biases last.
    auto picked = top_k(mags, count);
    std::sort(picked.begin(), picked.end());
    std::vector<Coordinate> out;
    out.reserve(picked.size());
    for (std::size_t local : picked) {
        if (local < seg.weight_count()) {
            out.push_back({layer_index, static_cast<std::uint32_t>(local / seg.cols),
                           static_cast<std::uint32_t>(local % seg.cols)});
        } else {
            out.push_back({layer_index, static_cast<std::uint32_t>(local - seg.weight_count()),
                           static_cast<std::uint32_t>(seg.cols)});
        }
    }
    return out;
}

std::vector<Coordinate> select_outliers(std::span<const double> matrix, std::size_t rows, std::size_t cols,
                                        std::size_t count) {
    LayerSegment seg{"matrix", 0, rows, cols, false};
    return select_outliers(seg, 0, matrix, count, false);
}

std::vector<std::size_t> selectable_counts(const Layout& layout, bool include_bias) {
    std::vector<std::size_t> out;
    for (const auto& seg : layout) {
        out.push_back(include_bias ? seg.size() : seg.weight_count());
    }
    return out;
}

std::vector<std::uint8_t> coordinate_mask(const Layout& layout, std::span<const Coordinate> coords) {
    std::vector<std::uint8_t> mask(layout_size(layout), 0);
    for (const auto& c : coords) {
        mask[flat_index(layout, c)] = 1;
    }
    return mask;
}

QuantizedModel QuantContext::quantize(const WeightVector& w, std::span<const std::uint8_t> exclude) const {
    return quantize_model(spec, w, config, sensitivity, exclude, activation.empty() ? nullptr : &activation);
}

QuantContext make_quant_context(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                                const QuantConfig& cfg) {
    cfg.validate();
    QuantContext ctx{spec, cfg, metric_fisher_diag(spec, w, calib).values, {}};
    if (cfg.mode == QuantMode::uniform_group && cfg.act_exponent != 0.0) {
        ctx.activation = activation_stats(spec, w, calib);
    }
    return ctx;
}

QuantizedModel quantize_with_outliers(const QuantContext& ctx, const WeightVector& w,
                                      std::span<const std::size_t> counts, bool include_bias) {
    if (counts.size() != w.layout.size()) {
        throw ParameterError("quantize_with_outliers: one count per layer required");
    }
    std::vector<Coordinate> coords;
    for (std::uint32_t l = 0; l < w.layout.size(); ++l) {
        const auto sel = select_outliers(w.layout[l], l, w.layer_values(l), counts[l], include_bias);
        coords.insert(coords.end(), sel.begin(), sel.end());
    }
    return quantize_with_coords(ctx, w, coords);
}

OutlierPlan outlier_ratio_search(const QuantContext& ctx, const WeightVector& w, const WeightVector& w_pre,
                                 const CalibSet& calib, const PipelineOptions& opts) {
    if (!(opts.alpha > 0.0 && opts.alpha <= 1.0)) {
        throw ParameterError("outlier_ratio_search: alpha must lie in (0, 1]");
    }
    const auto pqi = pqi_integral(ctx.spec, w, w_pre, calib, opts.intervals, opts.rule);
    OutlierPlan plan;
    plan.r_o = opts.r_o;
    for (const auto& row : aggregate(pqi, w.layout, Granularity::layer)) {
        plan.layer_dfpqi.push_back(row.sum);
    }
    const auto caps = selectable_counts(w.layout, opts.include_bias);

    bool have_best = false;
    for (std::size_t k = 0;; ++k) {
        const double t = static_cast<double>(k) * opts.alpha;
        if (!(t < 1.0 - 1e-12)) {
            break;
        }
        const auto alloc = outlier_allocation(plan.layer_dfpqi, caps, w.size(), opts.r_o, t);
        const auto qm = quantize_with_outliers(ctx, w, alloc.counts, opts.include_bias);
        const double loss = forward_loss(ctx.spec, reconstruct(qm), calib);
        plan.trace.push_back({t, alloc.counts, loss});
        if (!have_best || loss < plan.loss) {
            have_best = true;
            plan.loss = loss;
            plan.t = t;
            plan.counts = alloc.counts;
            plan.budget = alloc.budget;
            plan.shortfall = alloc.shortfall;
        }
    }
    return plan;
}

std::size_t detach_pass_count(double r_s, double beta) {
    if (!(r_s >= 0.0 && r_s <= 100.0)) {
        throw ParameterError("r_s must lie in [0, 100]");
    }
    if (r_s == 0.0) {
        return 0;
    }
    if (!(beta > 0.0) || beta > r_s) {
        throw ParameterError("beta must lie in (0, r_s]");
    }
    const double q = r_s / beta;
    const double n = std::round(q);
    if (std::abs(q - n) > 1e-9 * std::max(1.0, q)) {
        throw ParameterError("r_s must be an integer multiple of beta");
    }
    return static_cast<std::size_t>(n);
}

SignificantResult significant_weight_search(const ComputationSpec& spec, const WeightVector& w,
                                            const QuantizedModel& qm, const CalibSet& calib,
                                            const PipelineOptions& opts) {
    const std::size_t passes = detach_pass_count(opts.r_s, opts.beta);
    SignificantResult out;
    if (passes == 0) {
        return out;
    }
    WeightVector current = reconstruct(qm);
    if (!current.same_layout(w)) {
        throw ConfigError("significant_weight_search: model and weights have different layouts");
    }
    const std::size_t D = w.size();

    std::vector<std::uint8_t> blocked(D, 0);
    for (const auto& t : qm.outliers) {
        blocked[flat_index(w.layout, t.coord)] = 1;
    }
    for (const auto& t : qm.significant) {
        blocked[flat_index(w.layout, t.coord)] = 1;
    }
    std::size_t available = 0;
    std::vector<std::size_t> layer_available(w.layout.size(), 0);
    for (std::size_t j = 0; j < D; ++j) {
        if (!blocked[j] && selectable(w.layout, j, opts.include_bias)) {
            ++available;
            ++layer_available[coordinate_of(w.layout, j).layer];
        }
    }

    // Per-pass budgets: global top-k, or per layer when requested.
    std::vector<std::size_t> layer_budget(w.layout.size(), 0);
    std::size_t per_pass = 0;
    if (opts.per_layer_significant) {
        for (std::size_t l = 0; l < w.layout.size(); ++l) {
            layer_budget[l] = percent_of(layer_available[l], opts.beta);
            per_pass += layer_budget[l];
            if (layer_budget[l] * passes > layer_available[l]) {
                throw ParameterError("significant_weight_search: budget exceeds layer '" + w.layout[l].name + "'");
            }
        }
    } else {
        per_pass = percent_of(D, opts.beta);
        if (per_pass * passes > available) {
            throw ParameterError("significant_weight_search: budget exceeds the remaining coordinates");
        }
    }

    std::vector<std::size_t> detached_all;
    for (std::size_t pass = 0; pass < passes; ++pass) {
        const auto pqi = pqi_integral(spec, w, current, calib, opts.intervals, opts.rule);
        auto contrib = pqi.contributions();
        std::vector<double> scores(D);
        for (std::size_t j = 0; j < D; ++j) {
            const bool eligible = !blocked[j] && selectable(w.layout, j, opts.include_bias);
            scores[j] = eligible ? contrib[j] : -1.0;
        }
        std::vector<std::size_t> picked;
        if (opts.per_layer_significant) {
            for (std::size_t l = 0; l < w.layout.size(); ++l) {
                const auto& seg = w.layout[l];
                const auto local = top_k(std::span<const double>(scores).subspan(seg.offset, seg.size()), layer_budget[l]);
                for (std::size_t j : local) {
                    picked.push_back(seg.offset + j);
                }
            }
        } else {
            picked = top_k(scores, per_pass);
        }

        DetachStep step;
        step.step = pass;
        step.delta_f_pqi_before = pqi.delta_f_pqi;
        double removed = 0.0;
        for (std::size_t j : picked) {
            removed += contrib[j];
            blocked[j] = 1;
            current.values[j] = static_cast<double>(static_cast<float>(w.values[j]));
            detached_all.push_back(j);
        }
        std::sort(picked.begin(), picked.end());
        for (std::size_t j : picked) {
            step.detached.push_back(coordinate_of(w.layout, j));
        }
        step.delta_f_pqi_after = pqi.delta_f_pqi - removed;
        step.loss_after = forward_loss(spec, current, calib);
        out.trace.steps.push_back(std::move(step));
    }
    out.w_s = make_triplets(w, detached_all);
    return out;
}

PipelineResult run_pipeline(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                            const QuantConfig& cfg, const PipelineOptions& opts, SelectionPolicy policy,
                            std::uint64_t seed, const CalibSet* heldout) {
    PipelineResult result;
    auto record = [&](int step, std::string description, const QuantizedModel& qm) {
        const auto w_tilde = reconstruct(qm);
        StepRecord rec;
        rec.step = step;
        rec.description = std::move(description);
        rec.calib_loss = forward_loss(spec, w_tilde, calib);
        rec.heldout_loss = heldout ? forward_loss(spec, w_tilde, *heldout) : 0.0;
        rec.bits_per_weight = storage_bits(qm);
        result.steps.push_back(std::move(rec));
        return result.steps.back().calib_loss;
    };
    auto step_error = [](int step, const Error& e) -> Error {
        return Error(e.kind(), "pipeline step " + std::to_string(step) + ": " + e.what());
    };

    int step = 1;
    try {
        detach_pass_count(opts.r_s, opts.beta);  // rejects a bad r_s / beta before any work
        const auto ctx = make_quant_context(spec, w, calib, cfg);

        // 1) pre-quantize
        const QuantizedModel pre = ctx.quantize(w);
        record(1, "pre-quantize", pre);

        // 2) outlier ratio search  3) select outliers  4) re-quantize
        step = 2;
        QuantizedModel qm;
        if (policy == SelectionPolicy::pqi) {
            result.plan = outlier_ratio_search(ctx, w, reconstruct(pre), calib, opts);
            step = 3;
            qm = quantize_with_outliers(ctx, w, result.plan.counts, opts.include_bias);
        } else {
            Rng rng(derive_seed(seed, "random-outliers"));
            std::vector<std::size_t> pool;
            for (std::size_t j = 0; j < w.size(); ++j) {
                if (selectable(w.layout, j, opts.include_bias)) {
                    pool.push_back(j);
                }
            }
            const std::size_t budget = percent_of(w.size(), opts.r_o);
            if (budget > pool.size()) {
                throw ParameterError("outlier budget exceeds the selectable coordinates");
            }
            for (std::size_t i = 0; i < budget; ++i) {
                std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
            }
            std::vector<Coordinate> coords;
            result.plan.counts.assign(w.layout.size(), 0);
            for (std::size_t i = 0; i < budget; ++i) {
                coords.push_back(coordinate_of(w.layout, pool[i]));
                ++result.plan.counts[coords.back().layer];
            }
            std::sort(coords.begin(), coords.end());
            result.plan.r_o = opts.r_o;
            result.plan.budget = budget;
            step = 3;
            qm = quantize_with_coords(ctx, w, coords);
            result.plan.loss = forward_loss(spec, reconstruct(qm), calib);
        }
        record(2, "outlier ratio search (t=" + std::to_string(result.plan.t) + ")", qm);
        record(3, "select " + std::to_string(qm.outliers.size()) + " outliers", qm);
        step = 4;
        record(4, "re-quantize Q(w - w_o) + w_o", qm);

        // 5) significant weights
        step = 5;
        if (policy == SelectionPolicy::pqi) {
            auto sig = significant_weight_search(spec, w, qm, calib, opts);
            result.detach = std::move(sig.trace);
            qm.significant = std::move(sig.w_s);
        } else {
            const std::size_t passes_n = detach_pass_count(opts.r_s, opts.beta);
            const std::size_t budget = passes_n * percent_of(w.size(), opts.beta);
            std::vector<std::uint8_t> blocked(w.size(), 0);
            for (const auto& t : qm.outliers) {
                blocked[flat_index(w.layout, t.coord)] = 1;
            }
            std::vector<std::size_t> pool;
            for (std::size_t j = 0; j < w.size(); ++j) {
                if (!blocked[j] && selectable(w.layout, j, opts.include_bias)) {
                    pool.push_back(j);
                }
            }
            if (budget > pool.size()) {
                throw ParameterError("significant budget exceeds the remaining coordinates");
            }
            Rng rng(derive_seed(seed, "random-significant"));
            for (std::size_t i = 0; i < budget; ++i) {
                std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
            }
            pool.resize(budget);
            qm.significant = make_triplets(w, pool);
        }
        record(5, "detach " + std::to_string(qm.significant.size()) + " significant weights", qm);

        // 6) complete
        step = 6;
        qm.meta.r_o = opts.r_o;
        qm.meta.r_s = opts.r_s;
        qm.meta.t = result.plan.t;
        qm.meta.beta = opts.beta;
        qm.meta.seed = cfg.seed;
        qm.validate();
        result.final_loss = record(6, "complete Q(w - w_o) + w_o + w_s", qm);
        result.model = std::move(qm);
    } catch (const Error& e) {
        throw step_error(step, e);
    }
    return result;
}

}  // namespace requant
