#include "requant/mlp.hpp"

#include "requant/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace requant {

namespace {

// Scratch buffers for one sample's forward/backward pass.
struct Workspace {
    std::vector<std::vector<double>> inputs;  // input of each affine layer
    std::vector<std::vector<double>> pre;     // pre-activation output of each layer
    std::vector<double> delta;
    std::vector<double> delta_prev;

    explicit Workspace(const ComputationSpec& spec) {
        const std::size_t L = spec.layer_count();
        inputs.resize(L);
        pre.resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            inputs[l].resize(spec.layer_in(l));
            pre[l].resize(spec.layer_out(l));
        }
    }
};

double activate(Activation a, double z) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

double activate_derivative(Activation a, double z) {
    if (a == Activation::relu) {
        return z > 0.0 ? 1.0 : 0.0;
    }
    const double t = std::tanh(z);
    return 1.0 - t * t;
}

void forward(const ComputationSpec& spec, const WeightVector& w, std::span<const double> x, Workspace& ws) {
    std::copy(x.begin(), x.end(), ws.inputs[0].begin());
    const std::size_t L = spec.layer_count();
    for (std::size_t l = 0; l < L; ++l) {
        const auto& seg = w.layout[l];
        const double* W = w.values.data() + seg.offset;
        const double* b = seg.has_bias ? W + seg.weight_count() : nullptr;
        const auto& in = ws.inputs[l];
        auto& out = ws.pre[l];
        for (std::size_t r = 0; r < seg.rows; ++r) {
            const double* row = W + r * seg.cols;
            double acc = b ? b[r] : 0.0;
            for (std::size_t c = 0; c < seg.cols; ++c) {
                acc += row[c] * in[c];
            }
            out[r] = acc;
        }
        if (l + 1 < L) {
            auto& next = ws.inputs[l + 1];
            for (std::size_t r = 0; r < seg.rows; ++r) {
                next[r] = activate(spec.activation, out[r]);
            }
        }
    }
}

// Softmax cross-entropy on the final logits. Writes dloss/dlogits into `dlogits`
// when it is non-null.
double softmax_xent(std::span<const double> logits, std::uint32_t label, std::vector<double>* dlogits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) {
        sum += std::exp(z - m);
    }
    const double lse = m + std::log(sum);
    if (dlogits) {
        dlogits->resize(logits.size());
        for (std::size_t k = 0; k < logits.size(); ++k) {
            (*dlogits)[k] = std::exp(logits[k] - lse);
        }
        (*dlogits)[label] -= 1.0;
    }
    return lse - logits[label];
}

// Accumulates scale * grad f(w; x) into `out`. Returns f(w; x).
double accumulate_sample(const ComputationSpec& spec, const WeightVector& w, std::span<const double> x,
                         std::uint32_t label, Workspace& ws, double scale, std::span<double> out,
                         bool squared) {
    forward(spec, w, x, ws);
    const std::size_t L = spec.layer_count();
    const double loss = softmax_xent(ws.pre[L - 1], label, &ws.delta);
    for (std::size_t l = L; l-- > 0;) {
        const auto& seg = w.layout[l];
        const double* W = w.values.data() + seg.offset;
        double* gW = out.data() + seg.offset;
        const auto& in = ws.inputs[l];
        for (std::size_t r = 0; r < seg.rows; ++r) {
            const double d = ws.delta[r];
            double* grow = gW + r * seg.cols;
            if (squared) {
                for (std::size_t c = 0; c < seg.cols; ++c) {
                    const double g = d * in[c];
                    grow[c] += scale * g * g;
                }
            } else {
                for (std::size_t c = 0; c < seg.cols; ++c) {
                    grow[c] += scale * d * in[c];
                }
            }
        }
        if (seg.has_bias) {
            double* gb = gW + seg.weight_count();
            for (std::size_t r = 0; r < seg.rows; ++r) {
                gb[r] += squared ? scale * ws.delta[r] * ws.delta[r] : scale * ws.delta[r];
            }
        }
        if (l == 0) {
            break;
        }
        ws.delta_prev.assign(seg.cols, 0.0);
        for (std::size_t r = 0; r < seg.rows; ++r) {
            const double d = ws.delta[r];
            const double* row = W + r * seg.cols;
            for (std::size_t c = 0; c < seg.cols; ++c) {
                ws.delta_prev[c] += row[c] * d;
            }
        }
        const auto& z = ws.pre[l - 1];
        for (std::size_t c = 0; c < seg.cols; ++c) {
            ws.delta_prev[c] *= activate_derivative(spec.activation, z[c]);
        }
        std::swap(ws.delta, ws.delta_prev);
    }
    return loss;
}

}  // namespace

double forward_loss(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    check_compatible(spec, w, calib);
    Workspace ws(spec);
    double sum = 0.0;
    for (std::size_t i = 0; i < calib.size(); ++i) {
        forward(spec, w, calib.sample(i), ws);
        sum += softmax_xent(ws.pre.back(), calib.labels[i], nullptr);
    }
    return sum / static_cast<double>(calib.size());
}

double sample_loss(const ComputationSpec& spec, const WeightVector& w, std::span<const double> x,
                   std::uint32_t label) {
    if (x.size() != spec.input_dim || label >= spec.classes) {
        throw ConfigError("sample does not match the computation spec");
    }
    Workspace ws(spec);
    forward(spec, w, x, ws);
    return softmax_xent(ws.pre.back(), label, nullptr);
}

LossAndGrad batch_loss_and_grad(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib,
                                std::span<const std::size_t> sample_ids) {
    check_compatible(spec, w, calib);
    if (sample_ids.empty()) {
        throw ConfigError("empty sample batch");
    }
    Workspace ws(spec);
    LossAndGrad out;
    out.gradient.assign(w.size(), 0.0);
    for (std::size_t i : sample_ids) {
        out.loss += accumulate_sample(spec, w, calib.sample(i), calib.labels[i], ws, 1.0, out.gradient, false);
    }
    out.loss /= static_cast<double>(sample_ids.size());
    const double inv = 1.0 / static_cast<double>(sample_ids.size());
    for (double& g : out.gradient) {
        g *= inv;
    }
    return out;
}

LossAndGrad loss_and_grad(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    std::vector<std::size_t> ids(calib.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return batch_loss_and_grad(spec, w, calib, ids);
}

std::vector<double> grad(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    return loss_and_grad(spec, w, calib).gradient;
}

std::vector<std::vector<double>> per_sample_grads(const ComputationSpec& spec, const WeightVector& w,
                                                  const CalibSet& calib) {
    check_compatible(spec, w, calib);
    Workspace ws(spec);
    std::vector<std::vector<double>> out(calib.size(), std::vector<double>(w.size(), 0.0));
    for (std::size_t i = 0; i < calib.size(); ++i) {
        accumulate_sample(spec, w, calib.sample(i), calib.labels[i], ws, 1.0, out[i], false);
    }
    return out;
}

std::vector<double> mean_squared_sample_grads(const ComputationSpec& spec, const WeightVector& w,
                                              const CalibSet& calib) {
    check_compatible(spec, w, calib);
    Workspace ws(spec);
    std::vector<double> out(w.size(), 0.0);
    for (std::size_t i = 0; i < calib.size(); ++i) {
        accumulate_sample(spec, w, calib.sample(i), calib.labels[i], ws, 1.0, out, true);
    }
    const double inv = 1.0 / static_cast<double>(calib.size());
    for (double& v : out) {
        v *= inv;
    }
    return out;
}

std::vector<std::vector<double>> activation_stats(const ComputationSpec& spec, const WeightVector& w,
                                                  const CalibSet& calib) {
    check_compatible(spec, w, calib);
    Workspace ws(spec);
    std::vector<std::vector<double>> stats(spec.layer_count());
    for (std::size_t l = 0; l < stats.size(); ++l) {
        stats[l].assign(spec.layer_in(l), 0.0);
    }
    for (std::size_t i = 0; i < calib.size(); ++i) {
        forward(spec, w, calib.sample(i), ws);
        for (std::size_t l = 0; l < stats.size(); ++l) {
            for (std::size_t c = 0; c < stats[l].size(); ++c) {
                stats[l][c] += std::abs(ws.inputs[l][c]);
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(calib.size());
    for (auto& layer : stats) {
        for (double& v : layer) {
            v *= inv;
        }
    }
    return stats;
}

std::vector<double> broadcast_activation_stats(const Layout& layout,
                                               const std::vector<std::vector<double>>& stats) {
    if (stats.size() != layout.size()) {
        throw ConfigError("activation stats do not match the layout");
    }
    std::vector<double> out(layout_size(layout), 0.0);
    for (std::size_t l = 0; l < layout.size(); ++l) {
        const auto& seg = layout[l];
        if (stats[l].size() != seg.cols) {
            throw ConfigError("activation stats width does not match layer '" + seg.name + "'");
        }
        for (std::size_t r = 0; r < seg.rows; ++r) {
            for (std::size_t c = 0; c < seg.cols; ++c) {
                out[seg.weight_index(r, c)] = stats[l][c];
            }
            if (seg.has_bias) {
                out[seg.bias_index(r)] = 1.0;
            }
        }
    }
    return out;
}

std::vector<std::uint32_t> predict(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    check_compatible(spec, w, calib);
    Workspace ws(spec);
    std::vector<std::uint32_t> out(calib.size());
    for (std::size_t i = 0; i < calib.size(); ++i) {
        forward(spec, w, calib.sample(i), ws);
        const auto& z = ws.pre.back();
        out[i] = static_cast<std::uint32_t>(std::max_element(z.begin(), z.end()) - z.begin());
    }
    return out;
}

double error_rate(const ComputationSpec& spec, const WeightVector& w, const CalibSet& calib) {
    const auto pred = predict(spec, w, calib);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        wrong += pred[i] != calib.labels[i];
    }
    return static_cast<double>(wrong) / static_cast<double>(pred.size());
}

}  // namespace requant
