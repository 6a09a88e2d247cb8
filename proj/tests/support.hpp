#pragma once

#include "requant/model_zoo.hpp"
#include "requant/rng.hpp"
#include "requant/types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace testing_support {

using namespace requant;

inline ComputationSpec small_spec(Activation act = Activation::tanh) {
    ComputationSpec s;
    s.input_dim = 5;
    s.hidden = {7, 6};
    s.classes = 4;
    s.activation = act;
    return s;
}

inline WeightVector random_weights(const ComputationSpec& spec, std::uint64_t seed, double scale = 0.5) {
    WeightVector w = zeros_like(make_layout(spec));
    Rng rng(seed);
    for (auto& v : w.values) {
        v = scale * rng.normal();
    }
    return w;
}

inline CalibSet random_calib(const ComputationSpec& spec, std::size_t n, std::uint64_t seed) {
    CalibSet c;
    c.input_dim = spec.input_dim;
    c.classes = spec.classes;
    Rng rng(seed);
    for (std::size_t i = 0; i < n * spec.input_dim; ++i) {
        c.features.push_back(rng.normal());
    }
    for (std::size_t i = 0; i < n; ++i) {
        c.labels.push_back(static_cast<std::uint32_t>(rng.below(spec.classes)));
    }
    return c;
}

/// Straight-line forward pass written independently of the library kernels.
inline double oracle_loss(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    const auto layers = unflatten(w);
    double total = 0.0;
    for (std::size_t i = 0; i < calib.size(); ++i) {
        std::vector<double> h(calib.sample(i).begin(), calib.sample(i).end());
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& t = layers[l];
            std::vector<double> z(t.rows, 0.0);
            for (std::size_t r = 0; r < t.rows; ++r) {
                z[r] = t.bias.empty() ? 0.0 : t.bias[r];
                for (std::size_t c = 0; c < t.cols; ++c) {
                    z[r] += t.weights[r * t.cols + c] * h[c];
                }
                if (l + 1 < layers.size()) {
                    z[r] = spec.activation == Activation::relu ? std::max(0.0, z[r]) : std::tanh(z[r]);
                }
            }
            h = std::move(z);
        }
        const double m = *std::max_element(h.begin(), h.end());
        double s = 0.0;
        for (double v : h) {
            s += std::exp(v - m);
        }
        total += m + std::log(s) - h[calib.labels[i]];
    }
    return total / static_cast<double>(calib.size());
}

/// Central finite differences of oracle_loss.
inline std::vector<double> fd_grad(const ComputationSpec& spec, WeightVector w, const CalibSet& calib,
                                   double h = 1e-6) {
    std::vector<double> g(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) {
        const double orig = w.values[j];
        w.values[j] = orig + h;
        const double up = oracle_loss(spec, w, calib);
        w.values[j] = orig - h;
        const double down = oracle_loss(spec, w, calib);
        w.values[j] = orig;
        g[j] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_j |a_j - b_j| / max(|a_j|, |b_j|, floor).
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-5) {
    double worst = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double denom = std::max({std::abs(a[j]), std::abs(b[j]), floor});
        worst = std::max(worst, std::abs(a[j] - b[j]) / denom);
    }
    return worst;
}

}  // namespace testing_support
