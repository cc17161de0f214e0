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

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "selfspec/error.hpp"
#include "selfspec/specdec.hpp"

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

std::vector<TokenId> prompt_of(std::uint64_t seed, std::size_t n) {
    oracle::Gen g(seed);
    std::vector<TokenId> t(n);
    for (auto& x : t) x = static_cast<TokenId>(g.index(64));
    return t;
}

SpecConfig base_config(std::size_t gamma, std::size_t g = 16) {
    SpecConfig c;
    c.gamma = gamma;
    c.decode_length = 60;
    c.cache.group_size = g;
    return c;
}

const Model& toy_model() {
    static const Model m(ModelWeights::random(ModelConfig{}, 2024), 32);
    return m;
}

double chi_square_p_value(const std::vector<double>& expected_p, const std::vector<std::size_t>& counts) {
    const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    double stat = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double e = n * expected_p[i];
        stat += (static_cast<double>(counts[i]) - e) * (static_cast<double>(counts[i]) - e) / e;
    }
    boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

} // namespace

TEST(Sampling, ProbabilitiesAndArgmax) {
    const std::vector<float> l = {1.0f, 3.0f, 2.0f};
    EXPECT_EQ(argmax(l), 1);
    const auto p = probabilities(l, 1.0f);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    EXPECT_NEAR(p[1] / p[2], std::exp(1.0), 1e-9);
    const auto cold = probabilities(l, 0.1f);
    EXPECT_GT(cold[1], 0.99);
    EXPECT_EQ(code_of([&] { probabilities(l, 0.0f); }), ErrorCode::kConfig);
}

TEST(Sampling, ResidualDistribution) {
    const std::vector<double> p = {0.5, 0.5}, q = {0.6, 0.4};
    const auto r = residual_distribution(p, q);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_DOUBLE_EQ(r[0], 0.0);
    EXPECT_DOUBLE_EQ(r[1], 1.0);
    EXPECT_TRUE(residual_distribution(p, p).empty());
}

TEST(Sampling, TwoSymbolWorkedExample) {
    // Draft 'a' with q = [0.6, 0.4], p = [0.5, 0.5]: accept with 0.5/0.6 = 5/6,
    // otherwise the residual [0, 0.1] forces 'b'.
    const std::vector<double> p = {0.5, 0.5}, q = {0.6, 0.4};
    SamplerRng rng(1);
    const int n = 200000;
    int accepted = 0;
    for (int i = 0; i < n; ++i) {
        const auto v = verify_token(0, p, q, rng);
        if (v.accepted) {
            ++accepted;
            EXPECT_EQ(v.token, 0);
        } else {
            ASSERT_EQ(v.token, 1);
        }
    }
    EXPECT_NEAR(double(accepted) / n, 5.0 / 6.0, 0.005);
}

TEST(Sampling, ZeroMassResidualFallsBackToP) {
    // Unnormalized input with p <= q everywhere: a rejection leaves no residual.
    const std::vector<double> p = {0.4, 0.4}, q = {0.5, 0.5};
    SamplerRng rng(2);
    int fallbacks = 0;
    for (int i = 0; i < 1000; ++i) fallbacks += verify_token(0, p, q, rng).residual_fallback;
    EXPECT_GT(fallbacks, 100);
    EXPECT_LT(fallbacks, 300);
}

TEST(Sampling, SpeculativeSamplingRecoversTarget) {
    const std::vector<double> p = {0.05, 0.20, 0.10, 0.15, 0.02, 0.18, 0.25, 0.05};
    const std::vector<double> q = {0.20, 0.05, 0.10, 0.10, 0.15, 0.15, 0.05, 0.20};
    SamplerRng rng(3);
    std::vector<std::size_t> counts(8, 0);
    for (int i = 0; i < 100000; ++i) {
        const TokenId g = rng.sample(q);
        counts[static_cast<std::size_t>(verify_token(g, p, q, rng).token)]++;
    }
    EXPECT_GT(chi_square_p_value(p, counts), 0.01);
}

TEST(SpecDec, ConfigValidation) {
    auto c = base_config(0);
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
    c = base_config(17, 16);
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
    c = base_config(4);
    c.decode_length = 0;
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
    c = base_config(4);
    c.decode_length = 5000;
    EXPECT_EQ(code_of([&] { run(toy_model(), prompt_of(1, 8), c); }), ErrorCode::kData);
}

TEST(SpecDec, GammaOneIsOneDraftPass) {
    const Model& m = toy_model();
    auto pre = m.prefill(prompt_of(2, 40), CacheOptions{CacheMode::kHierarchical, 16, {}});
    const std::size_t before = pre.cache.length();
    SamplerRng rng(0);
    const auto d = draft_phase(m, pre.cache, 3, 1, base_config(1), rng);
    EXPECT_EQ(d.tokens.size(), 1u);
    EXPECT_EQ(d.logits.size(), 1u);
    EXPECT_EQ(pre.cache.length(), before + 1);
}

TEST(SpecDec, DraftReadsHalfTheQuantizedBytes) {
    const Model& m = toy_model();
    auto pre = m.prefill(prompt_of(3, 70), CacheOptions{CacheMode::kHierarchical, 16, {}});
    auto copy = pre.cache;
    StepStats ds, ts;
    m.decode_step(1, pre.cache, ViewKind::kDraft, WeightMode::kInt4, &ds);
    m.decode_step(1, copy, ViewKind::kTarget, WeightMode::kFp, &ts);
    EXPECT_GT(ts.kv.code_bytes, 0);
    EXPECT_DOUBLE_EQ(ds.kv.code_bytes, 0.5 * ts.kv.code_bytes);
    EXPECT_DOUBLE_EQ(ds.kv.fp16_reference_bytes, 2.0 * ts.kv.code_bytes);
}

TEST(SpecDec, LosslessDraftEqualsTarget) {
    const Model& m = toy_model();
    auto c = base_config(4);
    c.cache.mode = CacheMode::kFp;
    c.draft_weights = WeightMode::kFp;
    const auto prompt = prompt_of(4, 20);

    auto pre = m.prefill(prompt, c.cache);
    auto copy = pre.cache;
    SamplerRng rng(0);
    const auto d = draft_phase(m, pre.cache, 5, 4, c, rng);
    TokenId cur = 5;
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(d.logits[i], m.decode_step(cur, copy, ViewKind::kTarget, WeightMode::kFp));
        cur = d.tokens[i];
    }

    const auto r = run(m, prompt, c);
    EXPECT_DOUBLE_EQ(r.metrics.acceptance_rate, 1.0);
    EXPECT_EQ(r.tokens, autoregressive(m, prompt, c.decode_length, c.cache, ViewKind::kFull, WeightMode::kFp, c.sampling));
}

TEST(SpecDec, GreedyMatchesTargetViewAutoregressive) {
    const Model& m = toy_model();
    for (std::size_t g : {4u, 8u, 16u}) {
        for (std::size_t gamma : {1u, 2u, 4u}) {
            if (gamma > g) continue;
            for (std::uint64_t seed : {1u, 2u, 3u}) {
                for (std::size_t plen : {std::size_t{3}, g, 2 * g + 5, std::size_t{50}}) {
                    auto c = base_config(gamma, g);
                    const auto prompt = prompt_of(seed * 97 + plen, plen);
                    const auto r = run(m, prompt, c);
                    const auto ar = autoregressive(m, prompt, c.decode_length, c.cache, ViewKind::kTarget, WeightMode::kFp,
                                                   c.sampling);
                    ASSERT_EQ(r.tokens, ar) << "G=" << g << " gamma=" << gamma << " seed=" << seed << " prompt=" << plen;
                }
            }
        }
    }
}

TEST(SpecDec, TraceReconcilesWithOutput) {
    const Model& m = toy_model();
    for (auto mode : {SamplingMode::kGreedy, SamplingMode::kStochastic}) {
        auto c = base_config(6, 8);
        c.sampling.mode = mode;
        c.sampling.seed = 7;
        c.decode_length = 77;
        const auto r = run(m, prompt_of(5, 33), c);
        ASSERT_EQ(r.tokens.size(), 77u);
        std::size_t emitted = 1, drafted = 0, accepted = 0;
        std::vector<TokenId> rebuilt = {r.trace.first_token};
        for (const auto& s : r.trace.steps) {
            const std::size_t acc = static_cast<std::size_t>(std::count(s.accepted.begin(), s.accepted.end(), true));
            const std::size_t out = acc + (s.correction ? 1 : 0) + (s.bonus ? 1 : 0);
            EXPECT_GE(out, 1u);
            EXPECT_LE(out, s.gamma + 1);
            EXPECT_LE(s.gamma, c.gamma);
            EXPECT_EQ(s.drafted.size(), s.gamma);
            EXPECT_FALSE(s.correction && s.bonus);
            rebuilt.insert(rebuilt.end(), s.drafted.begin(), s.drafted.begin() + static_cast<std::ptrdiff_t>(acc));
            if (s.correction) rebuilt.push_back(*s.correction);
            if (s.bonus) rebuilt.push_back(*s.bonus);
            EXPECT_GE(s.fp_count, 8u);
            EXPECT_LE(s.fp_count, 16u);
            EXPECT_EQ(s.quantized_count % 8, 0u);
            emitted += out;
            drafted += s.gamma;
            accepted += acc;
        }
        EXPECT_GE(emitted, 77u);
        rebuilt.resize(77);
        EXPECT_EQ(rebuilt, r.tokens);
        EXPECT_EQ(r.metrics.drafted, drafted);
        EXPECT_EQ(r.metrics.accepted, accepted);
        EXPECT_GE(r.metrics.acceptance_rate, 0.0);
        EXPECT_LE(r.metrics.acceptance_rate, 1.0);
        EXPECT_GT(r.metrics.peak_cache_bytes, 0.0);
    }
}

TEST(SpecDec, StochasticRunsAreSeedDeterministic) {
    const Model& m = toy_model();
    auto c = base_config(4);
    c.sampling = {SamplingMode::kStochastic, 1.0f, 11};
    const auto prompt = prompt_of(6, 24);
    const auto a = run(m, prompt, c), b = run(m, prompt, c);
    EXPECT_EQ(a.tokens, b.tokens);
    c.sampling.seed = 12;
    EXPECT_NE(run(m, prompt, c).tokens, a.tokens);
}

TEST(SpecDec, TraceExportHasOneRecordPerStep) {
    const auto r = run(toy_model(), prompt_of(7, 20), base_config(4));
    std::ostringstream os;
    r.trace.write_ndjson(os);
    const std::string s = os.str();
    EXPECT_EQ(static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')), r.trace.steps.size());
    for (const char* key : {"\"step\"", "\"drafted\"", "\"accepted\"", "\"corrected\"", "\"flushed\"", "\"draft_bytes\"",
                            "\"target_bytes\""}) {
        EXPECT_NE(s.find(key), std::string::npos) << key;
    }
}

TEST(SpecDec, AcceptanceDoesNotRiseWithGammaOnAverage) {
    const Model& m = toy_model();
    std::vector<double> mean;
    for (std::size_t gamma : {1u, 2u, 4u, 6u}) {
        double sum = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            auto c = base_config(gamma);
            c.decode_length = 60;
            sum += run(m, prompt_of(1000 + seed, 48), c).metrics.acceptance_rate;
        }
        mean.push_back(sum / 20);
    }
    for (std::size_t i = 1; i < mean.size(); ++i) EXPECT_LE(mean[i], mean[i - 1] + 1e-12) << i;
}
