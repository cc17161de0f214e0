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
#include <fstream>

#include "oracles.hpp"
#include "selfspec/error.hpp"
#include "selfspec/roofline.hpp"

using namespace selfspec;
using namespace selfspec::roofline;

namespace {

HardwareSpec a6000() {
    return HardwareSpec::load(std::filesystem::path(SELFSPEC_SOURCE_DIR) / "config/hardware/a6000.json");
}

WorkloadPoint point(std::size_t b, std::size_t s, std::size_t tokens = 1) {
    WorkloadPoint w;
    w.batch = b;
    w.context = s;
    w.tokens_per_pass = tokens;
    return w;
}

double rel(double a, double b) {
    return std::abs(a - b) / std::abs(b);
}

const ModelDims kDims = ModelDims::llama2_7b();
const double kD = 4096;

} // namespace

TEST(Roofline, Llama2ParameterCount) {
    // 32 layers of (4 d^2 attention + 3 d * 11008 MLP), classifier and embedding.
    const double per_layer = 4.0 * kD * kD + 3.0 * kD * 11008.0;
    EXPECT_DOUBLE_EQ(kDims.linear_params(), 32.0 * per_layer + kD * 32000.0);
    EXPECT_DOUBLE_EQ(kDims.weight_bytes(), 2.0 * (32.0 * per_layer + 2.0 * kD * 32000.0));
    EXPECT_NEAR(kDims.weight_bytes() / 2.0, 6.74e9, 0.01e9);
}

TEST(Roofline, PrefillExactCounts) {
    const auto c = count_prefill(point(2, 512), kDims);
    const double tokens = 2.0 * 512.0;
    EXPECT_DOUBLE_EQ(c.linear.flops, 2.0 * tokens * kDims.linear_params());
    EXPECT_DOUBLE_EQ(c.attention.flops, 32.0 * (0.5 * 4.0 * 2.0 * 512.0 * 512.0 * kD + 5.0 * 0.5 * 2.0 * 32.0 * 512.0 * 512.0));
    // Scores are never written: attention traffic is linear in S_L.
    const auto c2 = count_prefill(point(2, 1024), kDims);
    EXPECT_NEAR(c2.attention.mops / c.attention.mops, 2.0, 1e-12);
    EXPECT_GT(c.aggregate.flops, c.linear.flops + c.attention.flops);
    EXPECT_DOUBLE_EQ(c.aggregate.mops, c.linear.mops + c.attention.mops);
}

TEST(Roofline, PrefillIntensityLinearInContext) {
    // Traffic is linear in S_L, FLOPs are linear + quadratic, so the doubling
    // ratio is (1 + 2r) / (1 + r) with r the attention/linear FLOP share. It
    // climbs towards 2 and is within 10% once attention dominates (S_L >= 64 d
    // for these dims; at 8 d it is still about 1.44).
    double prev = 1.0;
    for (std::size_t s = 8 * 4096; s <= 256 * 4096; s *= 2) {
        const double r = count_prefill(point(1, 2 * s), kDims).aggregate.intensity() /
                         count_prefill(point(1, s), kDims).aggregate.intensity();
        EXPECT_GT(r, prev) << s;
        EXPECT_LT(r, 2.0) << s;
        if (s >= 64 * 4096) {
            EXPECT_NEAR(r, 2.0, 0.2) << s;
        }
        prev = r;
    }
}

TEST(Roofline, PrefillIntensityScalesWithBatchAtShortContext) {
    const double r =
        count_prefill(point(2, 16), kDims).aggregate.intensity() / count_prefill(point(1, 16), kDims).aggregate.intensity();
    EXPECT_NEAR(r, 2.0, 0.1);
}

TEST(Roofline, AttentionIntensityIndependentOfBatch) {
    for (std::size_t s : {1024u, 65536u}) {
        for (std::size_t b = 1; b < 256; b *= 2) {
            EXPECT_LT(rel(count_prefill(point(2 * b, s), kDims).attention.intensity(),
                          count_prefill(point(b, s), kDims).attention.intensity()),
                      0.01);
            EXPECT_LT(rel(count_decode(point(2 * b, s), kDims).attention.intensity(),
                          count_decode(point(b, s), kDims).attention.intensity()),
                      0.01);
        }
    }
}

TEST(Roofline, DecodeIntensityFlatAtLongContext) {
    const double base = count_decode(point(1, 64 * 4096), kDims).aggregate.intensity();
    for (std::size_t m : {128u, 256u}) {
        EXPECT_LT(rel(count_decode(point(1, m * 4096), kDims).aggregate.intensity(), base), 0.05);
    }
    // Attention alone tends to 4 d / (2 d_kv bytes_kv) plus softmax terms, i.e. about 2 / bytes_kv.
    const double limit = count_decode(point(1, 1u << 24), kDims).attention.intensity();
    EXPECT_NEAR(limit, 2.0 / kDims.bytes_kv, 0.05);
}

TEST(Roofline, DecodeIntensityScalesWithBatchAtShortContext) {
    const double r =
        count_decode(point(2, 64), kDims).aggregate.intensity() / count_decode(point(1, 64), kDims).aggregate.intensity();
    EXPECT_NEAR(r, 2.0, 0.1);
}

TEST(Roofline, NarrowerKvRaisesAttentionIntensity) {
    const double fp16 = count_decode(point(1, 65536), kDims).attention.intensity();
    ModelDims int8 = kDims, int4 = kDims;
    int8.bytes_kv = 1;
    int4.bytes_kv = 0.5;
    EXPECT_NEAR(count_decode(point(1, 65536), int8).attention.intensity() / fp16, 2.0, 0.02);
    EXPECT_NEAR(count_decode(point(1, 65536), int4).attention.intensity() / fp16, 4.0, 0.08);
}

TEST(Roofline, DecodeScalesWithGenerationLength) {
    auto w = point(4, 2048);
    const auto one = count_decode(w, kDims);
    w.gen_len = 10;
    const auto ten = count_decode(w, kDims);
    EXPECT_DOUBLE_EQ(ten.aggregate.flops, 10 * one.aggregate.flops);
    EXPECT_DOUBLE_EQ(ten.aggregate.mops, 10 * one.aggregate.mops);
}

TEST(Roofline, ClassifyBoundaryAndLatency) {
    HardwareSpec hw{"t", 100.0, 10.0, 1.0, 1};
    EXPECT_EQ(classify({100.0, 10.0}, hw).bound, Bound::kCompute);
    EXPECT_EQ(classify({99.0, 10.0}, hw).bound, Bound::kMemory);
    EXPECT_DOUBLE_EQ(classify({50.0, 10.0}, hw).latency, 10.0 / 10.0);
    EXPECT_DOUBLE_EQ(classify({500.0, 10.0}, hw).latency, 500.0 / 100.0);
    // Continuous at the ridge.
    EXPECT_DOUBLE_EQ(classify({100.0, 10.0}, hw).latency, 1.0);
}

TEST(Roofline, A6000GridClassification) {
    const auto hw = a6000();
    EXPECT_NEAR(hw.ridge(), 201.5625, 1e-9);
    const auto rows = roofline_grid(kDims, hw, {1, 2, 4, 8, 16, 32, 64, 128, 256}, {1024, 4096, 16384, 65536, 262144});
    ASSERT_EQ(rows.size(), 2u * 9u * 5u * 3u);
    for (const auto& r : rows) {
        EXPECT_EQ(r.bound == Bound::kMemory, r.intensity < hw.ridge());
        if (r.component != "aggregate") continue;
        EXPECT_EQ(r.bound, r.phase == Phase::kDecode ? Bound::kMemory : Bound::kCompute) << r.batch << " " << r.context;
        EXPECT_GE(r.attention_fraction, 0.0);
        EXPECT_LE(r.attention_fraction, 1.0);
    }
    const std::string csv = roofline_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "phase,B,S_L,component,flops,mops,intensity,bound,attention_fraction");
    EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), rows.size() + 1);
}

TEST(Roofline, AttentionShareGrowsWithContext) {
    const auto hw = a6000();
    EXPECT_LT(attention_fraction(count_decode(point(1, 1024), kDims), hw),
              attention_fraction(count_decode(point(1, 262144), kDims), hw));
}

TEST(KvMemory, LongContextDwarfsWeights) {
    const auto hw = a6000();
    const auto r = kv_memory(16, 262144, kDims, hw);
    EXPECT_DOUBLE_EQ(r.kv_bytes, 2.0 * 16 * 262144 * 32 * 4096 * 2);
    EXPECT_NEAR(r.ratio, 160.0, 0.15 * 160.0);
    EXPECT_FALSE(r.fits_one_device);
    EXPECT_LT(kv_memory(1, 1, kDims, hw).ratio, 1e-3);
    EXPECT_TRUE(kv_memory(1, 1, kDims, hw).fits_one_device);
    ModelDims int4 = kDims;
    int4.bytes_kv = 0.5;
    EXPECT_DOUBLE_EQ(kv_memory(16, 262144, int4, hw).kv_bytes, r.kv_bytes / 4);
    const auto rows = kv_memory_sweep({1, 16}, {1024, 4096}, kDims, hw);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[1].batch, 1u);
    EXPECT_EQ(rows[1].context, 4096u);
}

TEST(SpeedupModel, ClosedForm) {
    EXPECT_DOUBLE_EQ(expected_tokens(0.0, 5), 1.0);
    EXPECT_DOUBLE_EQ(expected_tokens(1.0, 5), 6.0);
    // (1 - 0.9^7) / 0.1 * 1 / (6/4 + 1/2)
    const double e = (1.0 - std::pow(0.9, 7)) / 0.1;
    EXPECT_NEAR(speedup_model(0.9, 6, 1.0, 0.25, 0.5), e / 2.0, 1e-12);
    EXPECT_NEAR(speedup_model(0.9, 6, 1.0, 0.25, 0.5), 2.6085155, 1e-6);
    EXPECT_DOUBLE_EQ(speedup_model(1.0, 1, 1.0, 1.0, 1.0), 1.0);
    EXPECT_LT(speedup_model(0.0, 3, 1.0, 0.1, 1.0), 1.0);
}

TEST(SpeedupModel, Monotone) {
    oracle::Gen g(5);
    for (int i = 0; i < 500; ++i) {
        const std::size_t gamma = 1 + g.index(8);
        const double a = g.uniform(), b = g.uniform();
        const double t_draft = g.range(0.05, 1.0), t_verify = g.range(0.1, 2.0);
        const double lo = std::min(a, b), hi = std::max(a, b);
        EXPECT_LE(speedup_model(lo, gamma, 1.0, t_draft, t_verify), speedup_model(hi, gamma, 1.0, t_draft, t_verify));
        EXPECT_GE(speedup_model(a, gamma, 1.0, t_draft, t_verify), speedup_model(a, gamma, 1.0, t_draft * 1.5, t_verify));
    }
}

TEST(SpeedupModel, RejectsBadInputs) {
    EXPECT_THROW(expected_tokens(1.5, 2), Error);
    EXPECT_THROW(expected_tokens(0.5, 0), Error);
    EXPECT_THROW(speedup_model(0.5, 2, 0.0, 1.0, 1.0), Error);
}

TEST(SpecCosts, DraftCheaperThanAutoregressive) {
    const auto hw = a6000();
    const auto both = spec_costs(kDims, hw, 1, 65536, 4, true, true);
    EXPECT_TRUE(both.valid());
    EXPECT_LT(both.t_draft, both.t_ar / 3.5);
    const auto none = spec_costs(kDims, hw, 1, 65536, 4, false, false);
    EXPECT_DOUBLE_EQ(none.t_draft, none.t_ar);
    // Weight-only helps at short context, KV-only at long context.
    const std::size_t short_ctx = 4096 / 8, long_ctx = 128 * 4096;
    EXPECT_LT(spec_costs(kDims, hw, 1, short_ctx, 4, false, true).t_draft,
              spec_costs(kDims, hw, 1, short_ctx, 4, true, false).t_draft);
    EXPECT_LT(spec_costs(kDims, hw, 1, long_ctx, 4, true, false).t_draft,
              spec_costs(kDims, hw, 1, long_ctx, 4, false, true).t_draft);
}

TEST(Hardware, JsonValidation) {
    EXPECT_EQ(HardwareSpec::from_json_text(R"({"peak_flops":1,"peak_bw":2,"vram_bytes":3})").devices, 1u);
    EXPECT_THROW(HardwareSpec::from_json_text("{"), Error);
    EXPECT_THROW(HardwareSpec::from_json_text(R"({"peak_flops":1,"peak_bw":0,"vram_bytes":3})"), Error);
    EXPECT_THROW(HardwareSpec::from_json_text(R"({"peak_bw":1,"vram_bytes":3})"), Error);
    try {
        HardwareSpec::load("/nonexistent/hw.json");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kIo);
    }
}

TEST(Workload, RejectsZeroFields) {
    EXPECT_THROW(count_decode(point(0, 10), kDims), Error);
    EXPECT_THROW(count_prefill(point(1, 0), kDims), Error);
}
