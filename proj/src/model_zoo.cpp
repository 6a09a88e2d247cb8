#include "requant/model_zoo.hpp"

#include "requant/binary_io.hpp"
#include "requant/errors.hpp"
#include "requant/mlp.hpp"
#include "requant/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace requant {

namespace {

constexpr std::uint32_t kFormatVersion = 1;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

double min_pairwise_distance(const std::vector<std::vector<double>>& means) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < means.size(); ++a) {
        for (std::size_t b = a + 1; b < means.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < means[a].size(); ++k) {
                const double d = means[a][k] - means[b][k];
                d2 += d * d;
            }
            best = std::min(best, std::sqrt(d2));
        }
    }
    return best;
}

}  // namespace

CalibSet generate_calib(std::uint64_t seed, std::size_t n, std::size_t d_in, std::size_t classes,
                        GeneratorKind kind, std::uint32_t stream) {
    if (n == 0 || d_in == 0 || classes == 0) {
        throw ConfigError("generate_calib: n, d_in and classes must be >= 1");
    }
    const double separation = kind == GeneratorKind::gaussian_clusters ? 4.0 : 2.0;

    Rng mean_rng(derive_seed(seed, "class-means"));
    std::vector<std::vector<double>> means(classes, std::vector<double>(d_in));
    for (auto& m : means) {
        for (double& v : m) {
            v = mean_rng.normal();
        }
    }
    if (classes > 1) {
        const double scale = separation / min_pairwise_distance(means);
        for (auto& m : means) {
            for (double& v : m) {
                v *= scale;
            }
        }
    }

    Rng sample_rng(derive_seed(seed, "samples-" + std::to_string(stream)));
    CalibSet out;
    out.input_dim = d_in;
    out.classes = classes;
    out.features.resize(n * d_in);
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::uint32_t>(i % classes);
        out.labels[i] = y;
        for (std::size_t k = 0; k < d_in; ++k) {
            out.features[i * d_in + k] = to_f32(means[y][k] + sample_rng.normal());
        }
    }
    return out;
}

WeightVector init_weights(const ComputationSpec& spec, std::uint64_t seed) {
    WeightVector w = zeros_like(make_layout(spec));
    Rng rng(seed);
    for (std::size_t l = 0; l < w.layout.size(); ++l) {
        const auto& seg = w.layout[l];
        const double fan_in = static_cast<double>(seg.cols);
        const double fan_out = static_cast<double>(seg.rows);
        const double stddev = spec.activation == Activation::relu ? std::sqrt(2.0 / fan_in)
                                                                  : std::sqrt(2.0 / (fan_in + fan_out));
        auto vals = w.layer_values(l);
        for (std::size_t j = 0; j < seg.weight_count(); ++j) {
            vals[j] = to_f32(stddev * rng.normal());
        }
    }
    return w;
}

TrainResult train(std::uint64_t init_seed, const ComputationSpec& spec, const CalibSet& calib,
                  const TrainOptions& options) {
    if (options.batch_size == 0) {
        throw ConfigError("train: batch size must be >= 1");
    }
    if (!(options.learning_rate > 0.0) || !std::isfinite(options.learning_rate)) {
        throw ConfigError("train: learning rate must be positive");
    }
    TrainResult result;
    result.weights = init_weights(spec, init_seed);
    check_compatible(spec, result.weights, calib);
    result.initial_loss = forward_loss(spec, result.weights, calib);

    if (options.steps > 0) {
        Rng order_rng(derive_seed(init_seed, "batch-order"));
        std::vector<std::size_t> order(calib.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::size_t cursor = order.size();
        std::vector<std::size_t> batch;
        for (std::size_t step = 0; step < options.steps; ++step) {
            batch.clear();
            while (batch.size() < std::min(options.batch_size, calib.size())) {
                if (cursor == order.size()) {
                    for (std::size_t i = order.size(); i > 1; --i) {
                        std::swap(order[i - 1], order[order_rng.below(i)]);
                    }
                    cursor = 0;
                }
                batch.push_back(order[cursor++]);
            }
            const auto lg = batch_loss_and_grad(spec, result.weights, calib, batch);
            if (!std::isfinite(lg.loss)) {
                throw TrainingError("training diverged at step " + std::to_string(step));
            }
            for (std::size_t j = 0; j < result.weights.size(); ++j) {
                result.weights.values[j] -= options.learning_rate * lg.gradient[j];
            }
        }
        for (double& v : result.weights.values) {
            v = to_f32(v);
        }
    }

    const auto lg = loss_and_grad(spec, result.weights, calib);
    if (!std::isfinite(lg.loss)) {
        throw TrainingError("training produced a non-finite loss");
    }
    result.final_loss = lg.loss;
    for (double g : lg.gradient) {
        result.grad_inf_norm = std::max(result.grad_inf_norm, std::abs(g));
    }
    return result;
}

WeightVector interpolate(const WeightVector& w, const WeightVector& w_tilde, double lambda) {
    if (!w.same_layout(w_tilde) || w.size() != w_tilde.size()) {
        throw ConfigError("interpolate: layouts differ");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ConfigError("interpolate: lambda must lie in [0, 1]");
    }
    WeightVector out = w;
    if (lambda == 1.0) {
        out.values = w_tilde.values;
        return out;
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
        out.values[j] = (1.0 - lambda) * w.values[j] + lambda * w_tilde.values[j];
    }
    return out;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    ckpt.spec.validate();
    ByteWriter out;
    out.magic("RQMD");
    out.u32(kFormatVersion);
    out.u32(static_cast<std::uint32_t>(ckpt.spec.hidden.size() + 2));
    out.u32(static_cast<std::uint32_t>(ckpt.spec.input_dim));
    for (auto h : ckpt.spec.hidden) {
        out.u32(static_cast<std::uint32_t>(h));
    }
    out.u32(static_cast<std::uint32_t>(ckpt.spec.classes));
    out.u8(static_cast<std::uint8_t>(ckpt.spec.activation));
    out.u8(static_cast<std::uint8_t>(ckpt.spec.loss));
    out.u32(static_cast<std::uint32_t>(ckpt.weights.layout.size()));
    for (std::size_t l = 0; l < ckpt.weights.layout.size(); ++l) {
        const auto& seg = ckpt.weights.layout[l];
        out.short_string(seg.name);
        out.u32(static_cast<std::uint32_t>(seg.rows));
        out.u32(static_cast<std::uint32_t>(seg.cols));
        out.u8(seg.has_bias ? 1 : 0);
        for (double v : ckpt.weights.layer_values(l)) {
            out.f32(static_cast<float>(v));
        }
    }
    return out.data();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
    ByteReader in(std::move(bytes), "checkpoint");
    in.expect_magic("RQMD");
    if (const auto version = in.u32(); version != kFormatVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    const std::uint32_t dim_count = in.u32();
    if (dim_count < 3 || dim_count > 4096) {
        throw FormatError("checkpoint: implausible dimension count");
    }
    ckpt.spec.input_dim = in.u32();
    ckpt.spec.hidden.clear();
    for (std::uint32_t i = 0; i + 2 < dim_count; ++i) {
        ckpt.spec.hidden.push_back(in.u32());
    }
    ckpt.spec.classes = in.u32();
    const auto act = in.u8();
    const auto loss = in.u8();
    if (act > 1 || loss != 0) {
        throw FormatError("checkpoint: unknown nonlinearity or loss code");
    }
    ckpt.spec.activation = static_cast<Activation>(act);
    ckpt.spec.loss = static_cast<LossKind>(loss);
    try {
        ckpt.spec.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }

    const std::uint32_t layer_count = in.u32();
    if (layer_count != ckpt.spec.layer_count()) {
        throw FormatError("checkpoint: layer count does not match the stored spec");
    }
    std::size_t offset = 0;
    for (std::uint32_t l = 0; l < layer_count; ++l) {
        LayerSegment seg;
        seg.name = in.short_string();
        seg.rows = in.u32();
        seg.cols = in.u32();
        seg.has_bias = in.u8() != 0;
        seg.offset = offset;
        if (seg.rows != ckpt.spec.layer_out(l) || seg.cols != ckpt.spec.layer_in(l)) {
            throw FormatError("checkpoint: layer '" + seg.name + "' shape does not match the stored spec");
        }
        if (seg.size() * 4 > in.remaining()) {
            throw FormatError("checkpoint: truncated weights for layer '" + seg.name + "'");
        }
        for (std::size_t j = 0; j < seg.size(); ++j) {
            ckpt.weights.values.push_back(static_cast<double>(in.f32()));
        }
        offset += seg.size();
        ckpt.weights.layout.push_back(std::move(seg));
    }
    if (!in.at_end()) {
        throw FormatError("checkpoint: trailing bytes");
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::vector<std::uint8_t> encode_calib(const CalibSet& calib) {
    calib.validate();
    ByteWriter out;
    out.magic("RQCL");
    out.u32(kFormatVersion);
    out.u32(static_cast<std::uint32_t>(calib.size()));
    out.u32(static_cast<std::uint32_t>(calib.input_dim));
    out.u32(static_cast<std::uint32_t>(calib.classes));
    for (std::size_t i = 0; i < calib.size(); ++i) {
        for (double v : calib.sample(i)) {
            out.f32(static_cast<float>(v));
        }
        out.u32(calib.labels[i]);
    }
    return out.data();
}

CalibSet decode_calib(std::vector<std::uint8_t> bytes) {
    ByteReader in(std::move(bytes), "calibration file");
    in.expect_magic("RQCL");
    if (const auto version = in.u32(); version != kFormatVersion) {
        throw FormatError("calibration file: unsupported version " + std::to_string(version));
    }
    CalibSet calib;
    const std::size_t n = in.u32();
    calib.input_dim = in.u32();
    calib.classes = in.u32();
    if (n == 0 || calib.input_dim == 0 || calib.classes == 0) {
        throw FormatError("calibration file: empty header fields");
    }
    if (n * (calib.input_dim + 1) * 4 != in.remaining()) {
        throw FormatError("calibration file: payload size does not match header");
    }
    calib.features.reserve(n * calib.input_dim);
    calib.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < calib.input_dim; ++k) {
            calib.features.push_back(static_cast<double>(in.f32()));
        }
        const auto y = in.u32();
        if (y >= calib.classes) {
            throw FormatError("calibration file: label out of range");
        }
        calib.labels.push_back(y);
    }
    return calib;
}

void save_calib(const std::filesystem::path& path, const CalibSet& calib) { write_file(path, encode_calib(calib)); }

CalibSet load_calib(const std::filesystem::path& path) { return decode_calib(read_file(path)); }

}  // namespace requant
