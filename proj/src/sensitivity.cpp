#include "requant/sensitivity.hpp"

#include "requant/errors.hpp"
#include "requant/mlp.hpp"
#include "requant/model_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace requant {

namespace {

void require_same_layout(const WeightVector& a, const WeightVector& b) {
    if (!a.same_layout(b) || a.size() != b.size()) {
        throw ConfigError("weight vectors have different layouts");
    }
}

}  // namespace

const char* to_string(SensitivityKind kind) {
    switch (kind) {
        case SensitivityKind::gradient: return "gradient";
        case SensitivityKind::activation: return "activation";
        case SensitivityKind::fisher_diag: return "fisher-diag";
        case SensitivityKind::pqi: return "pqi";
    }
    return "unknown";
}

SensitivityVector metric_gradient(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    SensitivityVector out{grad(spec, w, calib), SensitivityKind::gradient};
    for (double& v : out.values) {
        v = std::abs(v);
    }
    return out;
}

SensitivityVector metric_activation(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    return {broadcast_activation_stats(w.layout, activation_stats(spec, w, calib)), SensitivityKind::activation};
}

SensitivityVector metric_fisher_diag(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    return {mean_squared_sample_grads(spec, w, calib), SensitivityKind::fisher_diag};
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
    k = std::min(k, scores.size());
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
}

double taylor_first(std::span<const double> gradient, const WeightVector& w, const WeightVector& w_tilde) {
    require_same_layout(w, w_tilde);
    if (gradient.size() != w.size()) {
        throw ConfigError("taylor_first: gradient length mismatch");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
        sum += gradient[j] * (w_tilde.values[j] - w.values[j]);
    }
    return sum;
}

double taylor_first(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                    const CalibSet& calib) {
    return taylor_first(grad(spec, w, calib), w, w_tilde);
}

double taylor_second(std::span<const double> fisher_diag, FisherSign sign, const WeightVector& w,
                     const WeightVector& w_tilde) {
    require_same_layout(w, w_tilde);
    if (fisher_diag.size() != w.size()) {
        throw ConfigError("taylor_second: Hessian diagonal length mismatch");
    }
    const double s = static_cast<double>(static_cast<int>(sign));
    double sum = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
        const double d = w_tilde.values[j] - w.values[j];
        sum += s * fisher_diag[j] * d * d;
    }
    return 0.5 * sum;
}

double taylor_second(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                     const CalibSet& calib, FisherSign sign) {
    return taylor_second(metric_fisher_diag(spec, w, calib).values, sign, w, w_tilde);
}

WeightVector quantize_single_layer(const ComputationSpec& spec, const WeightVector& w, const QuantConfig& cfg,
                                   std::span<const double> sensitivity, std::size_t layer) {
    const auto full = reconstruct(quantize_model(spec, w, cfg, sensitivity));
    WeightVector out = w;
    const auto src = full.layer_values(layer);
    std::copy(src.begin(), src.end(), out.layer_values(layer).begin());
    return out;
}

TaylorReport layer_study(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                         const QuantConfig& cfg, FisherSign sign, const CalibSet* heldout) {
    const auto lg = loss_and_grad(spec, w, calib);
    const auto fisher = metric_fisher_diag(spec, w, calib).values;
    const double heldout_base = heldout ? forward_loss(spec, w, *heldout) : 0.0;
    const auto all = reconstruct(quantize_model(spec, w, cfg, fisher));

    TaylorReport report;
    report.base_loss = lg.loss;
    auto add_row = [&](std::string scope, const WeightVector& w_tilde) {
        TaylorRow row;
        row.scope = std::move(scope);
        row.first_order = taylor_first(lg.gradient, w, w_tilde);
        row.second_order = taylor_second(fisher, sign, w, w_tilde);
        row.actual = forward_loss(spec, w_tilde, calib) - lg.loss;
        if (heldout) {
            row.actual_heldout = forward_loss(spec, w_tilde, *heldout) - heldout_base;
        }
        report.rows.push_back(std::move(row));
    };
    for (std::size_t l = 0; l < w.layout.size(); ++l) {
        WeightVector single = w;
        const auto src = all.layer_values(l);
        std::copy(src.begin(), src.end(), single.layer_values(l).begin());
        add_row(w.layout[l].name, single);
    }
    add_row("All", all);
    return report;
}

TaylorReport lambda_study(const ComputationSpec& spec, const WeightVector& w, const WeightVector& w_tilde,
                          const CalibSet& calib, std::span<const double> lambdas, FisherSign sign,
                          const CalibSet* heldout) {
    require_same_layout(w, w_tilde);
    const auto lg = loss_and_grad(spec, w, calib);
    const auto fisher = metric_fisher_diag(spec, w, calib).values;
    const double heldout_base = heldout ? forward_loss(spec, w, *heldout) : 0.0;
    const double full_first = taylor_first(lg.gradient, w, w_tilde);
    const double full_second = taylor_second(fisher, sign, w, w_tilde);

    TaylorReport report;
    report.base_loss = lg.loss;
    for (double lambda : lambdas) {
        if (!(lambda > 0.0 && lambda <= 1.0)) {
            throw ConfigError("lambda_study: lambda must lie in (0, 1]");
        }
        const auto w_prime = interpolate(w, w_tilde, lambda);
        TaylorRow row;
        row.scope = "lambda";
        row.lambda = lambda;
        // Scaled from the full displacement: columns are exactly linear / quadratic in lambda.
        row.first_order = lambda * full_first;
        row.second_order = lambda * lambda * full_second;
        row.actual = forward_loss(spec, w_prime, calib) - lg.loss;
        if (heldout) {
            row.actual_heldout = forward_loss(spec, w_prime, *heldout) - heldout_base;
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace requant
