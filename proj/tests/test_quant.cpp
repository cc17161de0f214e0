/*
 * Copyright 2026 The selfspec Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "selfspec/error.hpp"
#include "selfspec/quant.hpp"

using namespace selfspec;

namespace {

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode{};
}

} // namespace

TEST(Quant, AsymmetricMatchesScalarRtn) {
    oracle::Gen g(11);
    for (int trial = 0; trial < 500; ++trial) {
        const auto x = g.vec(1 + g.index(64), g.range(-5, 0), g.range(0.01, 5));
        const auto q = quantize_group_asym_u4(x);
        const auto ref = oracle::rtn_u4(x);
        EXPECT_NEAR(q.params.scale, ref.scale, 1e-6 * std::max(1.0, ref.scale));
        EXPECT_EQ(q.params.zero_point, static_cast<float>(ref.zero));
        int diff = 0;
        for (std::size_t i = 0; i < x.size(); ++i) diff += q.codes[i] != ref.codes[i];
        // Float vs double rounding may flip an exact .5 tie.
        EXPECT_LE(diff, 1);
    }
}

TEST(Quant, WorkedExampleTwoPlanes) {
    // S = (3.0 - 0) / 15 = 0.2, Z = 0.
    const std::vector<float> x = {0.0f, 1.07f, 3.0f};
    const auto h = hierarchical_encode(x);
    EXPECT_FLOAT_EQ(h.upper.params.scale, 0.2f);
    EXPECT_EQ(h.upper.params.zero_point, 0.0f);
    EXPECT_EQ(h.upper.codes[1], 5);
    EXPECT_EQ(h.lower.codes[1], 6);
    EXPECT_NEAR(dequant_two_plane(5, 6, h.upper.params), 1.075, 1e-6);
    EXPECT_FLOAT_EQ(h.lower.params.scale, 0.2f / 16);
}

TEST(Quant, TwoPlaneEqualsCombinedInteger) {
    oracle::Gen g(12);
    for (int trial = 0; trial < 2000; ++trial) {
        GroupQuantParams p{static_cast<float>(g.range(1e-4, 2)), static_cast<float>(g.range(-3, 3)),
                           QuantMode::kAsymmetricU4};
        const int cu = static_cast<int>(g.index(16));
        const int cl = static_cast<int>(g.index(16)) - 8;
        const double combined = (16.0 * cu + cl) * (double(p.scale) / 16.0) + p.zero_point;
        EXPECT_EQ(dequant_two_plane(cu, cl, p), static_cast<float>(combined));
    }
}

TEST(Quant, ErrorBoundsHold) {
    oracle::Gen g(13);
    for (int trial = 0; trial < 300; ++trial) {
        const auto x = g.vec(1 + g.index(128), -4, 4);
        const auto h = hierarchical_encode(x);
        const double s = h.upper.params.scale;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double up = dequant_code(h.upper.codes[i], h.upper.params);
            EXPECT_LE(std::abs(up - x[i]), s / 2 + 1e-6);
            if (h.lower.codes[i] > -8 && h.lower.codes[i] < 7) {
                const double both = dequant_two_plane(h.upper.codes[i], h.lower.codes[i], h.upper.params);
                EXPECT_LE(std::abs(both - x[i]), s / 32 + 1e-6);
            }
        }
    }
}

TEST(Quant, ConstantGroupUsesScaleFloor) {
    const std::vector<float> x(8, 0.75f);
    const auto q = quantize_group_asym_u4(x);
    EXPECT_EQ(q.params.scale, kScaleFloor);
    for (auto c : q.codes) EXPECT_EQ(c, 0);
    EXPECT_EQ(dequant_code(0, q.params), 0.75f);
}

TEST(Quant, SymmetricClampsAndRejectsBadScale) {
    const std::vector<float> e = {-1.0f, 1.0f, 0.05f};
    const auto q = quantize_group_sym_s4(e, 0.1f);
    EXPECT_EQ(q.codes[0], -8);
    EXPECT_EQ(q.codes[1], 7);
    EXPECT_EQ(q.codes[2], 1); // 0.5 rounds away from zero
    EXPECT_EQ(code_of([&] { quantize_group_sym_s4(e, 0.0f); }), ErrorCode::kConfig);
    EXPECT_EQ(code_of([&] { quantize_group_sym_s4(e, -1.0f); }), ErrorCode::kConfig);
}

TEST(Quant, NonFiniteInputIsDataError) {
    const std::vector<float> x = {1.0f, NAN};
    EXPECT_EQ(code_of([&] { quantize_group_asym_u4(x); }), ErrorCode::kData);
}

TEST(Quant, NibblePackingRoundTrip) {
    oracle::Gen g(14);
    QuantPlane u(3, 7, 4, QuantMode::kAsymmetricU4, QuantAxis::kToken);
    QuantPlane s(3, 7, 4, QuantMode::kSymmetricS4, QuantAxis::kToken);
    std::vector<int> cu(21), cs(21);
    for (std::size_t i = 0; i < 21; ++i) {
        cu[i] = static_cast<int>(g.index(16));
        cs[i] = static_cast<int>(g.index(16)) - 8;
        u.set_code(i, cu[i]);
        s.set_code(i, cs[i]);
    }
    EXPECT_EQ(u.code_bytes(), 11u);
    for (std::size_t i = 0; i < 21; ++i) {
        EXPECT_EQ(u.code(i), cu[i]);
        EXPECT_EQ(s.code(i), cs[i]);
    }
    // Even element in the low nibble.
    EXPECT_EQ(u.packed()[0], static_cast<std::uint8_t>(cu[0] | (cu[1] << 4)));
    EXPECT_EQ(code_of([&] { u.set_code(0, 16); }), ErrorCode::kData);
    EXPECT_EQ(code_of([&] { s.set_code(0, 8); }), ErrorCode::kData);
}

TEST(Quant, PlaneGroupsRowWithShortTail) {
    QuantPlane p(2, 10, 4, QuantMode::kAsymmetricU4, QuantAxis::kChannel);
    EXPECT_EQ(p.groups_per_row(), 3u);
    EXPECT_EQ(p.num_groups(), 6u);
    EXPECT_EQ(p.group_range(2), (std::pair<std::size_t, std::size_t>{8, 10}));
    EXPECT_EQ(p.group_range(3), (std::pair<std::size_t, std::size_t>{10, 14}));
    EXPECT_EQ(p.group_of(13), 3u);
}

TEST(Quant, PlaneDequantTargetBeatsDraft) {
    oracle::Gen g(15);
    const Tensor x = g.matrix(16, 32, -2, 2);
    const auto planes = hierarchical_encode_plane(x, 16, QuantAxis::kToken);
    const Tensor d = dequant_draft(planes.upper);
    const Tensor t = dequant_target(planes.upper, planes.lower);
    double ed = 0, et = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        ed += std::abs(d.data[i] - x.data[i]);
        et += std::abs(t.data[i] - x.data[i]);
    }
    EXPECT_LT(et, ed / 4);
}

TEST(Quant, MismatchedPlanesAreIntegrityErrors) {
    oracle::Gen g(16);
    const Tensor x = g.matrix(4, 8);
    auto planes = hierarchical_encode_plane(x, 4, QuantAxis::kToken);
    QuantPlane other(4, 8, 2, QuantMode::kSymmetricS4, QuantAxis::kToken);
    EXPECT_EQ(code_of([&] { dequant_target(planes.upper, other); }), ErrorCode::kCacheIntegrity);
    planes.lower.params(1).scale *= 2;
    EXPECT_EQ(code_of([&] { dequant_target(planes.upper, planes.lower); }), ErrorCode::kCacheIntegrity);
}

TEST(Quant, WeightsOnGridAreExact) {
    // Columns of 8 inputs: each group spans codes 0..15 exactly once at Z = -1, S = 0.125.
    oracle::Gen g(17);
    Tensor w({16, 5});
    for (std::size_t j = 0; j < 5; ++j) {
        for (std::size_t i = 0; i < 16; ++i) {
            int c = (i == 0) ? 0 : (i == 1) ? 15 : static_cast<int>(g.index(16));
            if (i == 8) c = 0;
            if (i == 9) c = 15;
            w.at(i, j) = -1.0f + 0.125f * static_cast<float>(c);
        }
    }
    const auto q = quantize_weights(w, 8);
    EXPECT_EQ(q.dequantize(), w);
    EXPECT_EQ(q.code_bytes(), 40u);
    EXPECT_EQ(q.param_bytes(), 2u * 5 * 8);
}

TEST(Quant, WeightErrorWithinHalfStep) {
    oracle::Gen g(18);
    const Tensor w = g.matrix(64, 12, -0.5, 0.5);
    const auto q = quantize_weights(w, 32);
    const Tensor d = q.dequantize();
    for (std::size_t j = 0; j < 12; ++j) {
        for (std::size_t i = 0; i < 64; ++i) {
            const float s = q.plane.params(j * 2 + i / 32).scale;
            EXPECT_LE(std::abs(d.at(i, j) - w.at(i, j)), s / 2 + 1e-6);
        }
    }
}
