#include "requant/errors.hpp"
#include "requant/mlp.hpp"
#include "requant/model_zoo.hpp"
#include "requant/pqi.hpp"
#include "requant/quantizers.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

using namespace requant;
using namespace testing_support;

namespace {

/// Gradient oracle for F(x) = sum_j c_j x_j^p_j.
GradientFn polynomial(std::vector<double> c, std::vector<int> p) {
    return [c, p](std::span<const double> x) {
        std::vector<double> g(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
            g[j] = c[j] * p[j] * std::pow(x[j], p[j] - 1);
        }
        return g;
    };
}

double polynomial_value(const std::vector<double>& c, const std::vector<int>& p, const std::vector<double>& x) {
    double f = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        f += c[j] * std::pow(x[j], p[j]);
    }
    return f;
}

double log_log_slope(const std::vector<double>& n, const std::vector<double>& err) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
        mx += std::log(n[i]) / n.size();
        my += std::log(err[i]) / n.size();
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
        sxy += (std::log(n[i]) - mx) * (std::log(err[i]) - my);
        sxx += (std::log(n[i]) - mx) * (std::log(n[i]) - mx);
    }
    return sxy / sxx;
}

struct Quantized {
    ComputationSpec spec;
    WeightVector w;
    WeightVector wt;
    CalibSet calib;
};

Quantized quantized_small(std::uint64_t seed) {
    Quantized q;
    q.spec = small_spec();
    q.calib = generate_calib(seed, 48, q.spec.input_dim, q.spec.classes, GeneratorKind::overlapping_clusters);
    TrainOptions opts;
    opts.steps = 150;
    opts.batch_size = 16;
    q.w = train(seed, q.spec, q.calib, opts).weights;
    QuantConfig cfg;
    cfg.bits = 3;
    cfg.group_size = 8;
    q.wt = reconstruct(quantize_model(q.spec, q.w, cfg));
    return q;
}

}  // namespace

TEST(PqiIntegral, OneDimensionalSquareWithFourIntervals) {
    const std::vector<double> w = {1.0};
    const std::vector<double> wt = {0.0};
    const auto r = pqi_integral(polynomial({1.0}, {2}), w, wt, 4);
    EXPECT_DOUBLE_EQ(r.v_pqi.values[0], 0.75);
    EXPECT_DOUBLE_EQ(r.signed_delta_f, -0.75);
    EXPECT_DOUBLE_EQ(r.delta_f_pqi, 0.75);
    EXPECT_EQ(r.v_pqi.kind, SensitivityKind::pqi);
    EXPECT_EQ(r.intervals, 4u);
}

TEST(PqiIntegral, ErrorDecaysAsOneOverN) {
    const std::vector<std::vector<int>> powers = {{2}, {3}, {4, 2}, {3, 3, 2}};
    for (const auto& p : powers) {
        std::vector<double> c(p.size()), w(p.size()), wt(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) {
            c[j] = 1.0 + 0.5 * j;
            w[j] = 1.0 + 0.25 * j;
            wt[j] = 0.2 - 0.1 * j;
        }
        const double exact = polynomial_value(c, p, wt) - polynomial_value(c, p, w);
        std::vector<double> ns, errs;
        for (std::size_t n = 4; n <= 1024; n *= 2) {
            const auto r = pqi_integral(polynomial(c, p), w, wt, n);
            ns.push_back(static_cast<double>(n));
            errs.push_back(std::abs(r.signed_delta_f - exact));
        }
        const double slope = log_log_slope(ns, errs);
        EXPECT_GE(slope, -1.2);
        EXPECT_LE(slope, -0.8);
    }
}

TEST(PqiIntegral, MidpointRuleIsSecondOrder) {
    const std::vector<double> w = {1.0}, wt = {0.0};
    std::vector<double> ns, errs;
    for (std::size_t n = 4; n <= 256; n *= 2) {
        const auto r = pqi_integral(polynomial({1.0}, {3}), w, wt, n, QuadratureRule::midpoint);
        ns.push_back(static_cast<double>(n));
        errs.push_back(std::abs(r.signed_delta_f + 1.0));
    }
    EXPECT_LT(log_log_slope(ns, errs), -1.8);
}

TEST(PqiIntegral, IdenticalEndpointsGiveGradientMagnitude) {
    const auto q = quantized_small(1);
    const auto r = pqi_integral(q.spec, q.w, q.w, q.calib, 8);
    const auto g = grad(q.spec, q.w, q.calib);
    for (std::size_t j = 0; j < g.size(); ++j) {
        EXPECT_NEAR(r.v_pqi.values[j], std::abs(g[j]), 1e-15 * std::max(1.0, std::abs(g[j])));
    }
    EXPECT_EQ(r.delta_f_pqi, 0.0);
    EXPECT_EQ(r.signed_delta_f, 0.0);
}

TEST(PqiIntegral, ModelNodesMatchExplicitGradientAverage) {
    const auto q = quantized_small(2);
    const std::size_t n = 5;
    const auto r = pqi_integral(q.spec, q.w, q.wt, q.calib, n);
    std::vector<double> v(q.w.size(), 0.0);
    double signed_sum = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
        const auto node = interpolate(q.w, q.wt, static_cast<double>(i) / n);
        const auto g = grad(q.spec, node, q.calib);
        for (std::size_t j = 0; j < v.size(); ++j) {
            v[j] += std::abs(g[j]) / n;
            signed_sum += g[j] * (q.wt.values[j] - q.w.values[j]) / n;
        }
    }
    for (std::size_t j = 0; j < v.size(); ++j) {
        EXPECT_NEAR(r.v_pqi.values[j], v[j], 1e-12 * std::max(1e-6, v[j]));
    }
    EXPECT_NEAR(r.signed_delta_f, signed_sum, 1e-12 * std::abs(signed_sum));
}

TEST(PqiIntegral, TriangleBoundAndRecomputableBound) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        const auto q = quantized_small(seed);
        for (std::size_t n : {1, 4, 32}) {
            for (auto rule : {QuadratureRule::right_endpoint, QuadratureRule::midpoint}) {
                const auto r = pqi_integral(q.spec, q.w, q.wt, q.calib, n, rule);
                EXPECT_GE(r.delta_f_pqi + 1e-12, std::abs(r.signed_delta_f));
                const auto c = r.contributions();
                const double sum = std::accumulate(c.begin(), c.end(), 0.0);
                EXPECT_NEAR(sum, r.delta_f_pqi, 1e-12 * r.delta_f_pqi);
                for (double x : r.v_pqi.values) EXPECT_GE(x, 0.0);
            }
        }
    }
}

TEST(PqiIntegral, NonFiniteGradientNamesNode) {
    const std::vector<double> w = {1.0}, wt = {0.0};
    GradientFn bad = [](std::span<const double> x) {
        return std::vector<double>{x[0] < 0.6 ? std::numeric_limits<double>::quiet_NaN() : 1.0};
    };
    try {
        pqi_integral(bad, w, wt, 4);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("node 2"), std::string::npos);
    }
}

TEST(PqiIntegral, RejectsZeroIntervalsAndLengthMismatch) {
    const std::vector<double> a = {1.0}, b = {0.0, 1.0};
    EXPECT_THROW(pqi_integral(polynomial({1.0}, {2}), a, a, 0), ConfigError);
    EXPECT_THROW(pqi_integral(polynomial({1.0}, {2}), a, b, 4), ConfigError);
}

TEST(Aggregate, PartitionsSumToBound) {
    const auto q = quantized_small(3);
    const auto r = pqi_integral(q.spec, q.w, q.wt, q.calib, 8);
    for (auto g : {Granularity::all, Granularity::element, Granularity::group, Granularity::layer,
                   Granularity::sublayer}) {
        const auto rows = aggregate(r, q.w.layout, g, 8);
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& row : rows) {
            sum += row.sum;
            count += row.count;
        }
        EXPECT_NEAR(sum, r.delta_f_pqi, 1e-12 * r.delta_f_pqi);
        EXPECT_EQ(count, q.w.size());
    }
    const auto all = aggregate(r, q.w.layout, Granularity::all);
    ASSERT_EQ(all.size(), 1u);
    EXPECT_EQ(all[0].sum, r.delta_f_pqi);
}

TEST(Aggregate, LayerMeansMatchBruteForce) {
    const auto q = quantized_small(4);
    const auto r = pqi_integral(q.spec, q.w, q.wt, q.calib, 8);
    const auto rows = aggregate(r, q.w.layout, Granularity::layer);
    ASSERT_EQ(rows.size(), q.w.layout.size());
    for (std::size_t l = 0; l < rows.size(); ++l) {
        const auto& seg = q.w.layout[l];
        double s = 0.0;
        for (std::size_t j = seg.offset; j < seg.end(); ++j) {
            s += r.v_pqi.values[j] * std::abs(q.wt.values[j] - q.w.values[j]);
        }
        EXPECT_EQ(rows[l].label, seg.name);
        EXPECT_NEAR(rows[l].mean, s / static_cast<double>(seg.size()), 1e-15);
    }
}

TEST(Aggregate, DisjointSetsAreAdditive) {
    const auto q = quantized_small(5);
    const auto r = pqi_integral(q.spec, q.w, q.wt, q.calib, 4);
    const auto c = r.contributions();
    const auto sub = aggregate(r, q.w.layout, Granularity::sublayer);
    const auto layer = aggregate(r, q.w.layout, Granularity::layer);
    for (std::size_t l = 0; l < layer.size(); ++l) {
        EXPECT_NEAR(sub[2 * l].sum + sub[2 * l + 1].sum, layer[l].sum, 1e-15);
    }
    double a = 0.0, b = 0.0, ab = 0.0;
    for (std::size_t j = 0; j < c.size(); ++j) {
        (j % 3 == 0 ? a : b) += c[j];
        ab += c[j];
    }
    EXPECT_NEAR(a + b, ab, 1e-14 * ab);
}

TEST(Aggregate, UnknownGranularityRejected) {
    EXPECT_THROW(parse_granularity("block"), ConfigError);
    EXPECT_EQ(parse_granularity("sublayer"), Granularity::sublayer);
}

TEST(Coverage, FullPercentCoversEverythingAndCurveIsConcave) {
    const auto q = quantized_small(6);
    const auto r = pqi_integral(q.spec, q.w, q.wt, q.calib, 8);
    std::vector<double> percents;
    for (int p = 0; p <= 100; p += 5) percents.push_back(p);
    const auto curve = coverage_curve(r, percents);
    EXPECT_DOUBLE_EQ(curve.back().fraction, 1.0);
    EXPECT_EQ(curve.front().fraction, 0.0);
    for (std::size_t i = 1; i < curve.size(); ++i) {
        EXPECT_GE(curve[i].fraction, curve[i - 1].fraction);
        // Equal-width steps of a sorted descending sequence shrink.
        if (i + 1 < curve.size()) {
            EXPECT_GE(curve[i].fraction - curve[i - 1].fraction + 1e-12, curve[i + 1].fraction - curve[i].fraction);
        }
    }
}

TEST(Coverage, ZeroBoundGivesZeroCurve) {
    const std::vector<double> w = {1.0, 2.0};
    const auto r = pqi_integral(polynomial({1.0, 1.0}, {2, 2}), w, w, 4);
    const std::vector<double> p = {10.0, 100.0};
    for (const auto& pt : coverage_curve(r, p)) {
        EXPECT_EQ(pt.fraction, 0.0);
    }
}

TEST(Coverage, HandExample) {
    // Contributions 4, 3, 2, 1 -> top 50% (2 elements) covers 7/10.
    const std::vector<double> w = {0.0, 0.0, 0.0, 0.0};
    const std::vector<double> wt = {1.0, 1.0, 1.0, 1.0};
    GradientFn g = [](std::span<const double>) { return std::vector<double>{2.0, 4.0, 1.0, 3.0}; };
    const auto r = pqi_integral(g, w, wt, 2);
    const std::vector<double> p = {25.0, 50.0};
    const auto curve = coverage_curve(r, p);
    EXPECT_DOUBLE_EQ(curve[0].fraction, 0.4);
    EXPECT_DOUBLE_EQ(curve[1].fraction, 0.7);
}
