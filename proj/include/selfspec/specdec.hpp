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

#pragma once

// Self-speculative decoding over one hierarchical cache: the draft reads the
// upper 4-bit plane (optionally with INT4 weights), the verifier reads both
// planes with FP weights.
//
// A cycle starts with a "pending" token: emitted, but its K/V not cached yet.
// Drafting runs decode_step on pending, g_1 .. g_{gamma-1}; verification rolls
// those entries back and reruns pending, g_1 .. g_gamma with the target view,
// so the verifier's K/V replaces the draft's.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "selfspec/model.hpp"
#include "selfspec/roofline.hpp"

namespace selfspec {

enum class SamplingMode { kGreedy, kStochastic };

struct SamplingConfig {
    SamplingMode mode = SamplingMode::kGreedy;
    float temperature = 1.0f; // shared by draft and target
    std::uint64_t seed = 0;
};

struct SpecConfig {
    std::size_t gamma = 4;
    std::size_t decode_length = 90; // S_D, tokens emitted after the prompt
    SamplingConfig sampling;
    WeightMode draft_weights = WeightMode::kInt4;
    CacheOptions cache;
    // Modeled latencies used for the speedup metric. When unset the engine's
    // own byte counts stand in.
    roofline::SpecCosts costs;

    void validate() const;
};

// Portable seeded generator (mt19937_64 with fixed-width uniform doubles).
class SamplerRng {
public:
    explicit SamplerRng(std::uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    // Inverse-CDF draw; p need not be normalized but must have positive mass.
    TokenId sample(std::span<const double> p);

private:
    std::mt19937_64 engine_;
};

TokenId argmax(std::span<const float> logits);
// softmax(logits / temperature) in double.
std::vector<double> probabilities(std::span<const float> logits, float temperature);
// normalize(max(0, p - q)); empty when it has no mass.
std::vector<double> residual_distribution(std::span<const double> p, std::span<const double> q);

struct TokenVerdict {
    bool accepted = false;
    TokenId token = 0;              // the draft when accepted, otherwise the replacement
    bool residual_fallback = false; // residual had no mass, sampled from p
};

// Speculative-sampling rule for one drafted token.
TokenVerdict verify_token(TokenId draft, std::span<const double> p, std::span<const double> q, SamplerRng& rng);

struct DraftResult {
    std::vector<TokenId> tokens;
    std::vector<std::vector<float>> logits; // q_1 .. q_gamma
    StepStats stats;
};

// gamma draft-view decode steps starting from the pending token.
DraftResult draft_phase(const Model& model, HierarchicalKVCache& cache, TokenId pending, std::size_t gamma,
                        const SpecConfig& config, SamplerRng& rng);

struct VerifyResult {
    std::size_t accepted = 0;
    std::vector<bool> accept_flags;
    std::optional<TokenId> correction;
    std::optional<TokenId> bonus;
    std::vector<TokenId> emitted;
    TokenId next_pending = 0;
    bool residual_fallback = false;
    std::size_t target_steps = 0;
    StepStats stats;
    // Target-view bytes of the widest verification step (the pass's cost
    // when positions are processed together).
    double pass_bytes = 0;
};

VerifyResult verify_phase(const Model& model, HierarchicalKVCache& cache, TokenId pending, const DraftResult& draft,
                          const SpecConfig& config, SamplerRng& rng);

struct TraceStep {
    std::size_t step = 0;
    std::size_t gamma = 0; // after clipping
    std::vector<TokenId> drafted;
    std::vector<bool> accepted;
    std::optional<TokenId> correction;
    std::optional<TokenId> bonus;
    bool flushed = false;
    double draft_bytes = 0;
    double target_bytes = 0;
    double draft_quantized_bytes = 0;  // upper-plane codes only
    double target_quantized_bytes = 0; // both planes
    double fp16_reference_bytes = 0;   // target-view quantized elements at 2 B
    double flops = 0;
    std::size_t fp_count = 0;        // after the step
    std::size_t quantized_count = 0; // after the step
};

struct SpecDecodeTrace {
    TokenId first_token = 0; // from the prefill logits
    std::vector<TraceStep> steps;

    // One JSON object per step; `prompt` is added to every record when set.
    void write_ndjson(std::ostream& os, std::optional<std::size_t> prompt = std::nullopt) const;
};

struct Metrics {
    std::size_t drafted = 0;
    std::size_t accepted = 0;
    std::size_t verifications = 0;
    std::size_t emitted = 0;
    double acceptance_rate = 0;
    double tokens_per_verification = 0;
    double modeled_speedup = 0;
    double peak_cache_bytes = 0;
    std::size_t residual_fallbacks = 0;
};

struct SpecResult {
    std::vector<TokenId> tokens; // exactly decode_length generated tokens
    SpecDecodeTrace trace;
    Metrics metrics;
};

SpecResult run(const Model& model, std::span<const TokenId> prompt, const SpecConfig& config);

// Plain autoregressive decoding: prefill, then one decode_step per token
// against `view` with a flush check after every step.
std::vector<TokenId> autoregressive(const Model& model, std::span<const TokenId> prompt, std::size_t length,
                                    const CacheOptions& cache, ViewKind view, WeightMode weights,
                                    const SamplingConfig& sampling);

} // namespace selfspec
