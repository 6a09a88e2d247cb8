#pragma once

#include "requant/types.hpp"

#include <cstdint>
#include <filesystem>

namespace requant {

enum class GeneratorKind : std::uint8_t {
    gaussian_clusters,  ///< class means at least 4 sigma apart
    overlapping_clusters,  ///< class means 2 sigma apart
};

/// Synthetic classification data: isotropic unit-variance Gaussian clusters.
/// Class means depend only on (seed, d_in, classes, kind); `stream` selects an
/// independent draw of samples from the same distribution (0 = calibration,
/// 1 = held-out, ...). Features are rounded to f32 so files round-trip exactly.
CalibSet generate_calib(std::uint64_t seed, std::size_t n, std::size_t d_in, std::size_t classes,
                        GeneratorKind kind = GeneratorKind::gaussian_clusters, std::uint32_t stream = 0);

/// Seeded He (ReLU) / Glorot (tanh) normal init with zero biases, f32-representable.
WeightVector init_weights(const ComputationSpec& spec, std::uint64_t seed);

struct TrainOptions {
    std::size_t steps = 300;
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
};

struct TrainResult {
    WeightVector weights;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    /// ||grad F||_inf of the returned weights on the training set.
    double grad_inf_norm = 0.0;
};

/// Plain mini-batch SGD. Each epoch visits the samples in a seeded permutation;
/// the returned weights are rounded to f32. Throws TrainingError if the loss
/// becomes non-finite.
TrainResult train(std::uint64_t init_seed, const ComputationSpec& spec, const CalibSet& calib,
                  const TrainOptions& options);

/// (1 - lambda) * w + lambda * w_tilde, elementwise.
WeightVector interpolate(const WeightVector& w, const WeightVector& w_tilde, double lambda);

struct Checkpoint {
    ComputationSpec spec;
    WeightVector weights;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_calib(const CalibSet& calib);
CalibSet decode_calib(std::vector<std::uint8_t> bytes);
void save_calib(const std::filesystem::path& path, const CalibSet& calib);
CalibSet load_calib(const std::filesystem::path& path);

}  // namespace requant
