#pragma once

// Grouped uniform integer quantization and sensitivity-weighted K-means
// codebooks, plus the Dense-and-Sparse container they produce:
//
//   w_tilde = Q(w - w_o, v) + w_o + w_s
//
// The dense part carries one code per coordinate; w_o (outliers) and w_s
// (significant weights) are sorted sparse triplets whose stored f32 value
// replaces the dense value at that coordinate.

#include "requant/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace requant {

enum class QuantMode : std::uint8_t { uniform_group = 0, kmeans_codebook = 1 };

/// paper_literal: s = max|w| / (2^N - 1), codes in [-(2^N - 1), 2^N - 1] (N + 1 stored bits).
/// symmetric_standard: s = max|w| / (2^(N-1) - 1), codes in [-(2^(N-1) - 1), 2^(N-1) - 1].
enum class IntRange : std::uint8_t { paper_literal = 0, symmetric_standard = 1 };

struct QuantConfig {
    int bits = 3;
    QuantMode mode = QuantMode::uniform_group;
    std::size_t group_size = 32;
    IntRange int_range = IntRange::symmetric_standard;
    std::size_t kmeans_iters = 30;
    std::uint64_t seed = 0;
    /// Per-input-channel activation scaling exponent applied before uniform
    /// coding (0 = identity preprocessing).
    double act_exponent = 0.0;

    void validate() const;
    std::size_t codebook_size() const { return std::size_t{1} << bits; }
    /// Largest representable |code| in uniform mode.
    std::int32_t max_code() const;
    /// Stored bits per dense code.
    int code_bits() const;
};

/// Half-open range of layer-local indices sharing one scale.
struct GroupRange {
    std::size_t begin = 0;
    std::size_t size = 0;
};

/// Groups run along each weight row (tail group may be short); the bias vector
/// is grouped separately with the same size.
std::vector<GroupRange> group_ranges(const LayerSegment& seg, std::size_t group_size);

struct UniformCodes {
    std::vector<std::int32_t> codes;
    std::vector<float> scales;  // one per group
};

/// Quantize one group. Scale is computed in double and stored as f32.
void quantize_group(std::span<const double> values, const QuantConfig& cfg, float& scale,
                    std::span<std::int32_t> codes);

/// Grouped uniform quantization of one layer. Coordinates flagged in
/// `exclude` (layer-local, may be empty) are treated as 0 for fitting and coding.
UniformCodes quantize_uniform(const LayerSegment& seg, std::span<const double> values, const QuantConfig& cfg,
                              std::span<const std::uint8_t> exclude = {});

struct KMeansResult {
    std::vector<float> codebook;
    std::vector<std::uint32_t> assignments;
    /// Weighted objective sum_j v_j (T[a_j] - w_j)^2 after every Lloyd iteration.
    std::vector<double> objective_trace;
};

/// Weighted Lloyd iterations from a weighted k-means++ seed. `weights` may be
/// empty (all ones). Excluded coordinates are omitted from fitting and assigned
/// to the centroid nearest 0. Empty clusters are re-seeded to the fit point with
/// the largest weighted error. Ties resolve to the lower centroid index.
KMeansResult quantize_kmeans(std::span<const double> values, std::span<const double> weights, std::size_t k,
                             std::uint64_t seed, std::size_t iters, std::span<const std::uint8_t> exclude = {});

/// Weighted objective of a codebook assignment (fit coordinates only).
double kmeans_objective(std::span<const double> values, std::span<const double> weights,
                        std::span<const double> codebook, std::span<const std::uint32_t> assignments,
                        std::span<const std::uint8_t> exclude = {});

struct SparseTriplet {
    Coordinate coord;
    float value = 0.0f;

    bool operator==(const SparseTriplet&) const = default;
};
using SparseTriplets = std::vector<SparseTriplet>;

/// Throws FormatError unless strictly increasing, unique and within bounds.
void validate_triplets(const SparseTriplets& t, const Layout& layout);

/// Builds triplets for the given flat coordinates, storing f32(w) at each.
SparseTriplets make_triplets(const WeightVector& w, std::span<const std::size_t> flat_indices);

struct QuantizedLayer {
    LayerSegment segment;
    std::vector<std::int32_t> codes;   // uniform: signed codes; codebook: indices
    std::vector<float> scales;         // uniform mode, one per group
    std::vector<float> codebook;       // codebook mode, K entries
    std::vector<float> channel_scales; // empty unless activation preprocessing is on
};

struct QuantMetadata {
    double r_o = 0.0;
    double r_s = 0.0;
    double t = 0.0;
    double beta = 0.0;
    std::uint64_t seed = 0;
};

struct QuantizedModel {
    ComputationSpec spec;
    QuantConfig config;
    std::vector<QuantizedLayer> layers;
    SparseTriplets outliers;     // w_o
    SparseTriplets significant;  // w_s
    QuantMetadata meta;

    Layout layout() const;
    std::size_t param_count() const { return layout_size(layout()); }
    /// Checks codes, overlay ordering/bounds and w_o / w_s disjointness.
    void validate() const;
};

/// Dense part only: Q(w - excluded, v). `sensitivity` feeds the k-means
/// weights (may be empty); `activation` provides per-layer channel statistics
/// for preprocessing when cfg.act_exponent != 0. `exclude` is a length-D mask
/// or empty.
QuantizedModel quantize_model(const ComputationSpec& spec, const WeightVector& w, const QuantConfig& cfg,
                              std::span<const double> sensitivity = {}, std::span<const std::uint8_t> exclude = {},
                              const std::vector<std::vector<double>>* activation = nullptr);

/// Dequantized dense values of one layer (no overlays).
std::vector<double> dequantize_layer(const QuantizedModel& qm, std::size_t layer);

/// Dense dequantization with overlay values substituted at overlay coordinates.
WeightVector reconstruct(const QuantizedModel& qm);

/// y = W x + b for one layer, computed from codes plus sparse overlay
/// corrections without materialising the reconstructed matrix.
std::vector<double> sparse_matvec(const QuantizedModel& qm, std::size_t layer, std::span<const double> x);

/// Bits per nonzero of a stored overlay entry: u16 row + u16 col + 16-bit value.
inline constexpr int kOverlayBitsPerNonzero = 48;

struct StorageReport {
    std::size_t params = 0;
    std::size_t overlay_nonzeros = 0;
    double code_bits = 0.0;
    double scale_bits = 0.0;
    double overlay_bits = 0.0;

    double total_bits() const { return code_bits + scale_bits + overlay_bits; }
    double bits_per_weight() const { return total_bits() / static_cast<double>(params); }
};

StorageReport storage_report(const QuantizedModel& qm);

/// Overlay overhead in bits per weight: 48 * nnz / D.
double overlay_bits_per_weight(std::size_t nonzeros, std::size_t params);

/// Packs the low `bits` bits of each code, little-endian LSB-first.
std::vector<std::uint8_t> pack_codes(std::span<const std::int32_t> codes, int bits);
/// Inverse of pack_codes; `is_signed` sign-extends each field.
std::vector<std::int32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count, int bits,
                                       bool is_signed);

std::vector<std::uint8_t> encode_artifact(const QuantizedModel& qm);
QuantizedModel decode_artifact(std::vector<std::uint8_t> bytes);
void save_artifact(const std::filesystem::path& path, const QuantizedModel& qm);
QuantizedModel load_artifact(const std::filesystem::path& path);

}  // namespace requant
