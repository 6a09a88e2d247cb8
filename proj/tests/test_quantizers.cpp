#include "requant/errors.hpp"
#include "requant/quantizers.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace requant;
using namespace testing_support;

namespace {

QuantConfig uniform_cfg(int bits, IntRange range, std::size_t g = 32) {
    QuantConfig c;
    c.bits = bits;
    c.int_range = range;
    c.group_size = g;
    return c;
}

/// Random model with random disjoint overlays, for matvec and round-trip checks.
QuantizedModel random_artifact(std::uint64_t seed) {
    Rng rng(seed);
    ComputationSpec spec;
    spec.input_dim = 3 + rng.below(20);
    spec.hidden = {2 + rng.below(30), 2 + rng.below(30)};
    spec.classes = 2 + rng.below(6);
    spec.activation = rng.below(2) ? Activation::relu : Activation::tanh;
    const auto w = random_weights(spec, seed * 7 + 1);
    QuantConfig cfg;
    cfg.bits = 2 + static_cast<int>(rng.below(5));
    cfg.mode = rng.below(3) == 0 ? QuantMode::kmeans_codebook : QuantMode::uniform_group;
    cfg.group_size = 1 + rng.below(40);
    cfg.int_range = rng.below(2) ? IntRange::paper_literal : IntRange::symmetric_standard;
    cfg.kmeans_iters = 5;
    cfg.seed = seed;
    auto qm = quantize_model(spec, w, cfg);
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    }
    const std::size_t n_o = rng.below(w.size() / 10 + 1);
    const std::size_t n_s = rng.below(w.size() / 10 + 1);
    std::vector<std::size_t> o(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_o));
    std::vector<std::size_t> s(idx.begin() + static_cast<std::ptrdiff_t>(n_o),
                               idx.begin() + static_cast<std::ptrdiff_t>(n_o + n_s));
    const auto big = random_weights(spec, seed * 7 + 2, 3.0);
    qm.outliers = make_triplets(big, o);
    qm.significant = make_triplets(big, s);
    return qm;
}

std::vector<double> dense_layer_matvec(const WeightVector& w, std::size_t l, const std::vector<double>& x) {
    const auto& seg = w.layout[l];
    std::vector<double> y(seg.rows);
    for (std::size_t r = 0; r < seg.rows; ++r) {
        double acc = w.values[seg.bias_index(r)];
        for (std::size_t c = 0; c < seg.cols; ++c) {
            acc += w.values[seg.weight_index(r, c)] * x[c];
        }
        y[r] = acc;
    }
    return y;
}

}  // namespace

TEST(UniformGroup, PaperLiteralWorkedExample) {
    const std::vector<double> g = {0.3, -0.6};
    std::vector<std::int32_t> codes(2);
    float s = 0.0f;
    quantize_group(g, uniform_cfg(2, IntRange::paper_literal), s, codes);
    EXPECT_EQ(s, 0.2f);
    EXPECT_EQ(codes, (std::vector<std::int32_t>{2, -3}));
    EXPECT_NEAR(s * codes[0], 0.4, 1e-7);
    EXPECT_NEAR(s * codes[1], -0.6, 1e-7);
}

TEST(UniformGroup, SymmetricStandardRange) {
    const std::vector<double> g = {1.0, -0.5, 0.2};
    std::vector<std::int32_t> codes(3);
    float s = 0.0f;
    quantize_group(g, uniform_cfg(3, IntRange::symmetric_standard), s, codes);
    EXPECT_EQ(s, static_cast<float>(1.0 / 3.0));
    // -0.5 / (1/3) = -1.5 rounds half to even.
    EXPECT_EQ(codes, (std::vector<std::int32_t>{3, -2, 1}));
    EXPECT_EQ(uniform_cfg(3, IntRange::symmetric_standard).code_bits(), 3);
    EXPECT_EQ(uniform_cfg(3, IntRange::paper_literal).code_bits(), 4);
}

TEST(UniformGroup, AllZeroGroup) {
    const std::vector<double> g(5, 0.0);
    std::vector<std::int32_t> codes(5, 9);
    float s = 1.0f;
    quantize_group(g, uniform_cfg(4, IntRange::paper_literal), s, codes);
    EXPECT_EQ(s, 0.0f);
    EXPECT_EQ(codes, std::vector<std::int32_t>(5, 0));
}

TEST(UniformGroup, ErrorBoundOnTenThousandRandomGroups) {
    Rng rng(2024);
    for (int trial = 0; trial < 10000; ++trial) {
        const int bits = 2 + static_cast<int>(rng.below(7));
        const auto range = rng.below(2) ? IntRange::paper_literal : IntRange::symmetric_standard;
        const std::size_t n = 1 + rng.below(64);
        const double spread = std::exp(rng.normal() * 3.0);
        std::vector<double> g(n);
        for (auto& v : g) {
            v = spread * rng.normal();
        }
        std::vector<std::int32_t> codes(n);
        float s = 0.0f;
        const auto cfg = uniform_cfg(bits, range);
        quantize_group(g, cfg, s, codes);
        const double sd = s;
        for (std::size_t j = 0; j < n; ++j) {
            EXPECT_LE(std::abs(g[j] - sd * codes[j]), sd / 2 + 1e-6 * sd * cfg.max_code());
        }
    }
}

TEST(UniformGroup, IdempotentOnGrid) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto cfg = uniform_cfg(2 + static_cast<int>(rng.below(6)),
                                     rng.below(2) ? IntRange::paper_literal : IntRange::symmetric_standard);
        std::vector<double> g(17);
        for (auto& v : g) {
            v = rng.normal();
        }
        std::vector<std::int32_t> c1(17), c2(17);
        float s1 = 0.0f, s2 = 0.0f;
        quantize_group(g, cfg, s1, c1);
        std::vector<double> dq(17);
        for (std::size_t j = 0; j < 17; ++j) {
            dq[j] = static_cast<double>(s1) * c1[j];
        }
        quantize_group(dq, cfg, s2, c2);
        EXPECT_EQ(s1, s2);
        EXPECT_EQ(c1, c2);
        for (std::size_t j = 0; j < 17; ++j) {
            EXPECT_EQ(static_cast<double>(s2) * c2[j], dq[j]);
        }
    }
}

TEST(UniformLayer, GroupsRunAlongRowsWithBiasSeparate) {
    LayerSegment seg{"fc", 0, 2, 5, true};
    const auto groups = group_ranges(seg, 2);
    // Rows of 5 give groups 2,2,1 per row; the bias (2 entries) forms one group.
    ASSERT_EQ(groups.size(), 7u);
    EXPECT_EQ(groups[2].begin, 4u);
    EXPECT_EQ(groups[2].size, 1u);
    EXPECT_EQ(groups[3].begin, 5u);
    EXPECT_EQ(groups[6].begin, 10u);
    EXPECT_EQ(groups[6].size, 2u);
}

TEST(UniformLayer, ExcludedCoordinatesDoNotInflateScale) {
    LayerSegment seg{"fc", 0, 1, 4, false};
    const std::vector<double> v = {0.1, 100.0, -0.2, 0.3};
    const std::vector<std::uint8_t> mask = {0, 1, 0, 0};
    const auto q = quantize_uniform(seg, v, uniform_cfg(3, IntRange::symmetric_standard, 4), mask);
    EXPECT_EQ(q.scales[0], static_cast<float>(0.3 / 3.0));
    EXPECT_EQ(q.codes[1], 0);
}

TEST(UniformModel, ReconstructErrorWithinHalfStep) {
    const auto spec = small_spec();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto w = random_weights(spec, seed);
        const auto cfg = uniform_cfg(3, IntRange::symmetric_standard, 4);
        const auto qm = quantize_model(spec, w, cfg);
        const auto wt = reconstruct(qm);
        for (std::size_t l = 0; l < w.layout.size(); ++l) {
            const auto& seg = w.layout[l];
            const auto groups = group_ranges(seg, 4);
            for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                const double s = qm.layers[l].scales[gi];
                for (std::size_t j = groups[gi].begin; j < groups[gi].begin + groups[gi].size; ++j) {
                    EXPECT_LE(std::abs(wt.values[seg.offset + j] - w.values[seg.offset + j]), s / 2 + 1e-6 * s);
                }
            }
        }
    }
}

TEST(UniformModel, EmptyExcludeEqualsPlainAndFullLayerExcludeGivesZeros) {
    const auto spec = small_spec();
    const auto w = random_weights(spec, 3);
    const auto cfg = uniform_cfg(3, IntRange::symmetric_standard);
    const std::vector<std::uint8_t> none(w.size(), 0);
    EXPECT_EQ(reconstruct(quantize_model(spec, w, cfg, {}, none)).values,
              reconstruct(quantize_model(spec, w, cfg)).values);
    std::vector<std::uint8_t> mask(w.size(), 0);
    const auto& seg = w.layout[1];
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(seg.offset),
              mask.begin() + static_cast<std::ptrdiff_t>(seg.end()), 1);
    const auto qm = quantize_model(spec, w, cfg, {}, mask);
    for (auto c : qm.layers[1].codes) {
        EXPECT_EQ(c, 0);
    }
    for (double v : dequantize_layer(qm, 1)) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(KMeans, TwoClustersFromExhaustivePartition) {
    const std::vector<double> w = {0, 0, 1, 1, 1};
    const auto r = quantize_kmeans(w, {}, 2, 1, 30);
    EXPECT_EQ(r.codebook, (std::vector<float>{0.0f, 1.0f}));
    // Exhaustive oracle: every split of the sorted values into two contiguous runs.
    double best = 1e300;
    for (std::size_t cut = 1; cut < w.size(); ++cut) {
        double cost = 0.0;
        for (auto [b, e] : {std::pair{std::size_t{0}, cut}, std::pair{cut, w.size()}}) {
            double m = 0.0;
            for (std::size_t j = b; j < e; ++j) m += w[j] / static_cast<double>(e - b);
            for (std::size_t j = b; j < e; ++j) cost += (w[j] - m) * (w[j] - m);
        }
        best = std::min(best, cost);
    }
    EXPECT_EQ(r.objective_trace.back(), best);
}

TEST(KMeans, SingleCentroidIsWeightedMean) {
    const std::vector<double> w = {0.0, 1.0};
    const std::vector<double> v = {3.0, 1.0};
    const auto r = quantize_kmeans(w, v, 1, 1, 10);
    ASSERT_EQ(r.codebook.size(), 1u);
    EXPECT_NEAR(r.codebook[0], 0.25, 1e-12);
}

TEST(KMeans, SingleCentroidClosedFormRandom) {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> w(20), v(20);
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < 20; ++j) {
            w[j] = static_cast<double>(static_cast<float>(rng.normal()));
            v[j] = rng.uniform() + 0.01;
            num += v[j] * w[j];
            den += v[j];
        }
        const auto r = quantize_kmeans(w, v, 1, trial, 10);
        EXPECT_NEAR(r.codebook[0], static_cast<float>(num / den), 1e-12);
    }
}

TEST(KMeans, EnoughCentroidsGiveZeroObjective) {
    const std::vector<double> w = {0.5, -1.25, 0.5, 3.0, -1.25};
    const auto r = quantize_kmeans(w, {}, 8, 3, 20);
    EXPECT_EQ(r.objective_trace.back(), 0.0);
    for (std::size_t j = 0; j < w.size(); ++j) {
        EXPECT_EQ(static_cast<double>(r.codebook[r.assignments[j]]), w[j]);
    }
}

TEST(KMeans, ObjectiveNonIncreasingOverHundredSeeds) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed + 1000);
        std::vector<double> w(300), v(300);
        for (std::size_t j = 0; j < w.size(); ++j) {
            w[j] = rng.normal() * (j % 7 == 0 ? 3.0 : 0.5);
            v[j] = rng.uniform();
        }
        const auto r = quantize_kmeans(w, v, 8, seed, 25);
        ASSERT_FALSE(r.objective_trace.empty());
        for (std::size_t i = 1; i < r.objective_trace.size(); ++i) {
            EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1]);
        }
        EXPECT_TRUE(std::is_sorted(r.codebook.begin(), r.codebook.end()));
        std::vector<double> cb(r.codebook.begin(), r.codebook.end());
        // Final nearest reassignment can only lower the objective, up to f32 codebook rounding.
        EXPECT_LE(kmeans_objective(w, v, cb, r.assignments), r.objective_trace.back() * (1.0 + 1e-6) + 1e-12);
    }
}

TEST(KMeans, AssignmentsAreNearestCentroids) {
    Rng rng(8);
    std::vector<double> w(200);
    for (auto& x : w) x = rng.normal();
    const auto r = quantize_kmeans(w, {}, 4, 2, 30);
    for (std::size_t j = 0; j < w.size(); ++j) {
        const double d = std::abs(w[j] - r.codebook[r.assignments[j]]);
        for (float c : r.codebook) {
            EXPECT_LE(d, std::abs(w[j] - c) + 1e-7);
        }
    }
}

TEST(KMeans, ExcludedPointsDoNotMoveCentroids) {
    const std::vector<double> w = {0.0, 0.0, 1.0, 1.0, 50.0};
    const std::vector<std::uint8_t> mask = {0, 0, 0, 0, 1};
    const auto r = quantize_kmeans(w, {}, 2, 1, 20, mask);
    EXPECT_EQ(r.codebook, (std::vector<float>{0.0f, 1.0f}));
    EXPECT_EQ(r.codebook[r.assignments[4]], 0.0f);
}

TEST(Packing, RoundTripAllWidths) {
    Rng rng(9);
    for (int bits = 1; bits <= 16; ++bits) {
        for (bool is_signed : {false, true}) {
            std::vector<std::int32_t> codes(1 + rng.below(100));
            for (auto& c : codes) {
                const auto u = static_cast<std::int32_t>(rng.below(std::uint64_t{1} << bits));
                c = is_signed && u >= (1 << (bits - 1)) ? u - (1 << bits) : u;
            }
            const auto packed = pack_codes(codes, bits);
            EXPECT_EQ(packed.size(), (codes.size() * bits + 7) / 8);
            EXPECT_EQ(unpack_codes(packed, codes.size(), bits, is_signed), codes);
        }
    }
}

TEST(Packing, LsbFirstLayout) {
    const std::vector<std::int32_t> codes = {1, 2, 3};
    EXPECT_EQ(pack_codes(codes, 2), (std::vector<std::uint8_t>{0b00111001}));
    EXPECT_THROW(unpack_codes(std::vector<std::uint8_t>{0}, 5, 2, false), FormatError);
}

TEST(Overlays, ReconstructUsesStoredValueExactly) {
    const auto spec = small_spec();
    const auto w = random_weights(spec, 4, 2.0);
    auto qm = quantize_model(spec, w, uniform_cfg(3, IntRange::symmetric_standard));
    const std::vector<std::size_t> idx = {3, 40, 41};
    qm.outliers = make_triplets(w, idx);
    const auto wt = reconstruct(qm);
    for (auto j : idx) {
        EXPECT_EQ(wt.values[j], static_cast<double>(static_cast<float>(w.values[j])));
    }
    auto plain = quantize_model(spec, w, uniform_cfg(3, IntRange::symmetric_standard));
    const auto base = reconstruct(plain);
    for (std::size_t j = 0; j < w.size(); ++j) {
        if (std::find(idx.begin(), idx.end(), j) == idx.end()) {
            EXPECT_EQ(wt.values[j], base.values[j]);
        }
    }
}

TEST(Overlays, ValidationRejectsUnsortedOutOfBoundsAndShared) {
    const auto spec = small_spec();
    const auto w = random_weights(spec, 4);
    auto qm = quantize_model(spec, w, uniform_cfg(3, IntRange::symmetric_standard));
    qm.outliers = make_triplets(w, std::vector<std::size_t>{5, 9});
    qm.significant = make_triplets(w, std::vector<std::size_t>{9});
    EXPECT_THROW(qm.validate(), FormatError);
    qm.significant.clear();
    std::swap(qm.outliers[0], qm.outliers[1]);
    EXPECT_THROW(qm.validate(), FormatError);
    qm.outliers = {SparseTriplet{{0, 0, 99}, 1.0f}};
    EXPECT_THROW(qm.validate(), FormatError);
}

TEST(SparseMatvec, ZeroInputGivesBiasOnlyAndZeroWithoutBias) {
    auto qm = random_artifact(3);
    const auto wt = reconstruct(qm);
    for (std::size_t l = 0; l < qm.layers.size(); ++l) {
        const auto& seg = qm.layers[l].segment;
        const std::vector<double> x(seg.cols, 0.0);
        const auto y = sparse_matvec(qm, l, x);
        for (std::size_t r = 0; r < seg.rows; ++r) {
            EXPECT_NEAR(y[r], wt.values[seg.bias_index(r)], 1e-12);
        }
    }
    Layout layout = {LayerSegment{"a", 0, 2, 3, false}, LayerSegment{"b", 6, 1, 2, false}};
    WeightVector w{std::vector<double>(8, 0.7), layout};
    ComputationSpec spec;
    spec.input_dim = 3;
    spec.hidden = {2};
    spec.classes = 1;
    QuantizedModel nb = quantize_model(spec, w, uniform_cfg(3, IntRange::symmetric_standard));
    EXPECT_EQ(sparse_matvec(nb, 0, std::vector<double>(3, 0.0)), std::vector<double>(2, 0.0));
}

TEST(SparseMatvec, MatchesDenseOracleOnHundredRandomArtifacts) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto qm = random_artifact(seed);
        const auto wt = reconstruct(qm);
        Rng rng(seed + 500);
        for (std::size_t l = 0; l < qm.layers.size(); ++l) {
            std::vector<double> x(qm.layers[l].segment.cols);
            for (auto& v : x) v = rng.normal();
            const auto ys = sparse_matvec(qm, l, x);
            const auto yd = dense_layer_matvec(wt, l, x);
            for (std::size_t r = 0; r < yd.size(); ++r) {
                EXPECT_LE(std::abs(ys[r] - yd[r]), 1e-6 * std::max(1.0, std::abs(yd[r])));
            }
        }
    }
}

TEST(SparseMatvec, DimensionMismatchThrows) {
    const auto qm = random_artifact(1);
    EXPECT_THROW(sparse_matvec(qm, 0, std::vector<double>(qm.layers[0].segment.cols + 1)), ConfigError);
}

TEST(Storage, HalfPercentSparsityCostsQuarterBitLess) {
    EXPECT_DOUBLE_EQ(overlay_bits_per_weight(5, 1000), 0.24);
    EXPECT_DOUBLE_EQ(overlay_bits_per_weight(50, 10000), 48.0 * 0.005);
}

TEST(Storage, EmptyOverlaysCountCodesAndScalesOnly) {
    const auto spec = small_spec();
    const auto w = random_weights(spec, 1);
    const auto qm = quantize_model(spec, w, uniform_cfg(3, IntRange::symmetric_standard, 4));
    const auto r = storage_report(qm);
    std::size_t groups = 0;
    for (const auto& seg : w.layout) groups += group_ranges(seg, 4).size();
    EXPECT_EQ(r.overlay_bits, 0.0);
    EXPECT_DOUBLE_EQ(r.total_bits(), 3.0 * static_cast<double>(w.size()) + 32.0 * static_cast<double>(groups));
}

TEST(Artifact, RoundTripOnRandomArtifacts) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto qm = random_artifact(seed);
        const auto bytes = encode_artifact(qm);
        const auto back = decode_artifact(bytes);
        EXPECT_EQ(encode_artifact(back), bytes);
        EXPECT_EQ(reconstruct(back).values, reconstruct(qm).values);
        EXPECT_EQ(back.outliers, qm.outliers);
        EXPECT_EQ(back.significant, qm.significant);
    }
}

TEST(Artifact, CorruptionAndTruncationAreFormatErrors) {
    const auto bytes = encode_artifact(random_artifact(2));
    auto bad = bytes;
    bad[2] = '!';
    EXPECT_THROW(decode_artifact(bad), FormatError);
    for (std::size_t cut : {std::size_t{5}, bytes.size() / 3, bytes.size() - 1}) {
        EXPECT_THROW(decode_artifact({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)}), FormatError);
    }
}

TEST(Artifact, DimensionsBeyondU16AreFormatErrors) {
    ComputationSpec spec;
    spec.input_dim = 70000;
    spec.hidden = {1};
    spec.classes = 2;
    const auto w = zeros_like(make_layout(spec));
    const auto qm = quantize_model(spec, w, uniform_cfg(2, IntRange::symmetric_standard));
    EXPECT_THROW(encode_artifact(qm), FormatError);
}
