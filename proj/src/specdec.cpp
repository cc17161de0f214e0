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

#include "selfspec/specdec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "selfspec/error.hpp"

namespace selfspec {

namespace {

double step_bytes(const StepStats& s) {
    return s.weight_bytes + s.kv.code_bytes + s.kv.param_bytes + s.kv.fp_bytes;
}

TokenId pick(std::span<const float> logits, const SamplingConfig& sampling, SamplerRng& rng) {
    if (sampling.mode == SamplingMode::kGreedy) return argmax(logits);
    const auto p = probabilities(logits, sampling.temperature);
    return rng.sample(p);
}

} // namespace

void SpecConfig::validate() const {
    if (gamma == 0) fail(ErrorCode::kConfig, "gamma must be >= 1");
    if (gamma > cache.group_size) fail(ErrorCode::kConfig, "gamma must not exceed the group size");
    if (decode_length == 0) fail(ErrorCode::kConfig, "decode_length must be >= 1");
    if (sampling.mode == SamplingMode::kStochastic && !(sampling.temperature > 0.0f)) {
        fail(ErrorCode::kConfig, "temperature must be positive");
    }
}

double SamplerRng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

TokenId SamplerRng::sample(std::span<const double> p) {
    double total = 0.0;
    for (double v : p) total += v;
    if (!(total > 0.0)) fail(ErrorCode::kContract, "sample: distribution has no mass");
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc += p[i];
        last = i;
        if (u < acc) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last);
}

TokenId argmax(std::span<const float> logits) {
    if (logits.empty()) fail(ErrorCode::kContract, "argmax of empty logits");
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<double> probabilities(std::span<const float> logits, float temperature) {
    if (logits.empty()) fail(ErrorCode::kContract, "probabilities of empty logits");
    if (!(temperature > 0.0f)) fail(ErrorCode::kConfig, "temperature must be positive");
    const double t = temperature;
    double m = -std::numeric_limits<double>::infinity();
    for (float v : logits) m = std::max(m, static_cast<double>(v) / t);
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) / t - m);
        total += p[i];
    }
    for (double& v : p) v /= total;
    return p;
}

std::vector<double> residual_distribution(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) fail(ErrorCode::kDimension, "residual: p and q differ in size");
    std::vector<double> r(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        r[i] = std::max(0.0, p[i] - q[i]);
        total += r[i];
    }
    if (!(total > 0.0)) return {};
    for (double& v : r) v /= total;
    return r;
}

TokenVerdict verify_token(TokenId draft, std::span<const double> p, std::span<const double> q, SamplerRng& rng) {
    if (p.size() != q.size()) fail(ErrorCode::kDimension, "verify_token: p and q differ in size");
    if (draft < 0 || static_cast<std::size_t>(draft) >= p.size()) fail(ErrorCode::kData, "verify_token: draft id out of range");
    const double pd = p[static_cast<std::size_t>(draft)];
    const double qd = q[static_cast<std::size_t>(draft)];
    // qd == 0 cannot be drafted by sampling, but accept it if p agrees it is possible.
    const double ratio = qd > 0.0 ? std::min(1.0, pd / qd) : (pd > 0.0 ? 1.0 : 0.0);
    if (rng.uniform() < ratio) return TokenVerdict{true, draft, false};

    const auto r = residual_distribution(p, q);
    if (r.empty()) {
        spdlog::debug("verify_token: residual distribution has no mass, sampling from p");
        return TokenVerdict{false, rng.sample(p), true};
    }
    return TokenVerdict{false, rng.sample(r), false};
}

DraftResult draft_phase(const Model& model, HierarchicalKVCache& cache, TokenId pending, std::size_t gamma,
                        const SpecConfig& config, SamplerRng& rng) {
    if (gamma == 0) fail(ErrorCode::kContract, "draft_phase: gamma must be >= 1");
    if (cache.append_capacity() < gamma) {
        fail(ErrorCode::kBufferOverflow, "draft_phase: gamma exceeds free FP-buffer slots");
    }
    DraftResult out;
    TokenId cur = pending;
    for (std::size_t i = 0; i < gamma; ++i) {
        auto logits = model.decode_step(cur, cache, ViewKind::kDraft, config.draft_weights, &out.stats);
        cur = pick(logits, config.sampling, rng);
        out.tokens.push_back(cur);
        out.logits.push_back(std::move(logits));
    }
    return out;
}

VerifyResult verify_phase(const Model& model, HierarchicalKVCache& cache, TokenId pending, const DraftResult& draft,
                          const SpecConfig& config, SamplerRng& rng) {
    const std::size_t gamma = draft.tokens.size();
    if (gamma == 0 || draft.logits.size() != gamma) fail(ErrorCode::kContract, "verify_phase: no drafts");

    // Replace the draft's K/V with the verifier's.
    cache.rollback(gamma);
    const bool bonus_mode = cache.fp_count() + gamma + 1 <= cache.layout().fp_capacity();
    const std::size_t passes = bonus_mode ? gamma + 1 : gamma;

    VerifyResult out;
    out.target_steps = passes;
    std::vector<std::vector<float>> target;
    TokenId cur = pending;
    for (std::size_t i = 0; i < passes; ++i) {
        StepStats s;
        target.push_back(model.decode_step(cur, cache, ViewKind::kTarget, WeightMode::kFp, &s));
        out.pass_bytes = std::max(out.pass_bytes, step_bytes(s));
        out.stats += s;
        if (i < gamma) cur = draft.tokens[i];
    }

    const bool greedy = config.sampling.mode == SamplingMode::kGreedy;
    const float temp = config.sampling.temperature;
    for (std::size_t i = 0; i < gamma; ++i) {
        const TokenId g = draft.tokens[i];
        if (greedy) {
            const TokenId best = argmax(target[i]);
            if (best == g) {
                out.accept_flags.push_back(true);
                continue;
            }
            out.accept_flags.push_back(false);
            out.correction = best;
            break;
        }
        const auto p = probabilities(target[i], temp);
        const auto q = probabilities(draft.logits[i], temp);
        const TokenVerdict v = verify_token(g, p, q, rng);
        out.accept_flags.push_back(v.accepted);
        out.residual_fallback = out.residual_fallback || v.residual_fallback;
        if (!v.accepted) {
            out.correction = v.token;
            break;
        }
    }
    out.accepted = static_cast<std::size_t>(std::count(out.accept_flags.begin(), out.accept_flags.end(), true));
    out.emitted.assign(draft.tokens.begin(), draft.tokens.begin() + static_cast<std::ptrdiff_t>(out.accepted));

    if (out.correction) {
        out.emitted.push_back(*out.correction);
        out.next_pending = *out.correction;
    } else if (bonus_mode) {
        out.bonus = pick(target[gamma], config.sampling, rng);
        out.emitted.push_back(*out.bonus);
        out.next_pending = *out.bonus;
    } else {
        out.next_pending = draft.tokens[gamma - 1];
    }

    // Keep pending plus the accepted drafts.
    const std::size_t keep = std::min(passes, out.accepted + 1);
    cache.rollback(passes - keep);
    return out;
}

void SpecDecodeTrace::write_ndjson(std::ostream& os, std::optional<std::size_t> prompt) const {
    for (const auto& s : steps) {
        nlohmann::ordered_json j;
        if (prompt) j["prompt"] = *prompt;
        j["step"] = s.step;
        j["gamma"] = s.gamma;
        j["drafted"] = s.drafted;
        j["accepted"] = std::count(s.accepted.begin(), s.accepted.end(), true);
        j["accept_flags"] = s.accepted;
        j["corrected"] = s.correction ? nlohmann::ordered_json(*s.correction) : nlohmann::ordered_json(nullptr);
        j["bonus"] = s.bonus ? nlohmann::ordered_json(*s.bonus) : nlohmann::ordered_json(nullptr);
        j["flushed"] = s.flushed;
        j["draft_bytes"] = s.draft_bytes;
        j["target_bytes"] = s.target_bytes;
        j["draft_quantized_bytes"] = s.draft_quantized_bytes;
        j["target_quantized_bytes"] = s.target_quantized_bytes;
        j["fp16_reference_bytes"] = s.fp16_reference_bytes;
        j["flops"] = s.flops;
        j["fp_count"] = s.fp_count;
        j["quantized_count"] = s.quantized_count;
        os << j.dump() << '\n';
    }
}

SpecResult run(const Model& model, std::span<const TokenId> prompt, const SpecConfig& config) {
    config.validate();
    if (prompt.size() + config.decode_length + config.gamma > model.config().max_positions) {
        fail(ErrorCode::kData, "prompt plus decode length exceeds max_positions");
    }
    SamplerRng rng(config.sampling.seed);
    auto pre = model.prefill(prompt, config.cache);
    HierarchicalKVCache& cache = pre.cache;

    SpecResult out;
    TokenId pending = pick(pre.logits, config.sampling, rng);
    out.trace.first_token = pending;
    out.tokens.push_back(pending);

    Metrics& m = out.metrics;
    m.peak_cache_bytes = static_cast<double>(cache.memory_report().total());
    double sum_draft = 0, sum_verify = 0, sum_ar = 0;
    std::size_t draft_steps = 0;
    const std::size_t cap = cache.layout().fp_capacity();

    while (out.tokens.size() < config.decode_length) {
        const std::size_t remaining = config.decode_length - out.tokens.size();
        const std::size_t room = cap - cache.fp_count() - 1;
        const std::size_t gamma = std::min({config.gamma, std::max<std::size_t>(1, room), remaining});

        const DraftResult draft = draft_phase(model, cache, pending, gamma, config, rng);
        m.peak_cache_bytes = std::max(m.peak_cache_bytes, static_cast<double>(cache.memory_report().total()));
        const VerifyResult ver = verify_phase(model, cache, pending, draft, config, rng);

        TraceStep ts;
        ts.step = out.trace.steps.size();
        ts.gamma = gamma;
        ts.drafted = draft.tokens;
        ts.accepted = ver.accept_flags;
        ts.correction = ver.correction;
        ts.bonus = ver.bonus;
        ts.draft_bytes = draft.stats.weight_bytes + draft.stats.kv.code_bytes + draft.stats.kv.param_bytes +
                         draft.stats.kv.fp_bytes;
        ts.target_bytes = ver.stats.weight_bytes + ver.stats.kv.code_bytes + ver.stats.kv.param_bytes + ver.stats.kv.fp_bytes;
        ts.draft_quantized_bytes = draft.stats.kv.code_bytes;
        ts.target_quantized_bytes = ver.stats.kv.code_bytes;
        ts.fp16_reference_bytes = ver.stats.kv.fp16_reference_bytes;
        ts.flops = draft.stats.flops() + ver.stats.flops();

        out.tokens.insert(out.tokens.end(), ver.emitted.begin(), ver.emitted.end());
        pending = ver.next_pending;
        ts.flushed = cache.flush_if_full();
        ts.fp_count = cache.fp_count();
        ts.quantized_count = cache.quantized_token_count();
        m.peak_cache_bytes = std::max(m.peak_cache_bytes, static_cast<double>(cache.memory_report().total()));

        m.drafted += gamma;
        m.accepted += ver.accepted;
        m.verifications += 1;
        m.emitted += ver.emitted.size();
        m.residual_fallbacks += ver.residual_fallback ? 1 : 0;

        sum_draft += ts.draft_bytes;
        draft_steps += gamma;
        sum_verify += ver.pass_bytes;
        // Same step against an FP cache with FP weights.
        const double kv_elems = static_cast<double>(ver.stats.kv.quantized_elements + ver.stats.kv.fp_elements) /
                                static_cast<double>(ver.target_steps);
        sum_ar += model.weight_bytes(WeightMode::kFp) + kv_elems * sizeof(float);

        out.trace.steps.push_back(std::move(ts));
    }
    out.tokens.resize(config.decode_length);

    if (m.drafted > 0) {
        m.acceptance_rate = static_cast<double>(m.accepted) / static_cast<double>(m.drafted);
        m.tokens_per_verification = static_cast<double>(m.emitted) / static_cast<double>(m.verifications);
        roofline::SpecCosts costs = config.costs;
        if (!costs.valid()) {
            const double cycles = static_cast<double>(m.verifications);
            costs.t_ar = sum_ar / cycles;
            costs.t_draft = sum_draft / static_cast<double>(draft_steps);
            costs.t_verify = sum_verify / cycles;
        }
        m.modeled_speedup = roofline::speedup_model(m.acceptance_rate, config.gamma, costs.t_ar, costs.t_draft, costs.t_verify);
    }
    return out;
}

std::vector<TokenId> autoregressive(const Model& model, std::span<const TokenId> prompt, std::size_t length,
                                    const CacheOptions& cache_options, ViewKind view, WeightMode weights,
                                    const SamplingConfig& sampling) {
    if (length == 0) return {};
    SamplerRng rng(sampling.seed);
    auto pre = model.prefill(prompt, cache_options);
    std::vector<TokenId> out;
    TokenId cur = pick(pre.logits, sampling, rng);
    out.push_back(cur);
    while (out.size() < length) {
        const auto logits = model.decode_step(cur, pre.cache, view, weights);
        pre.cache.flush_if_full();
        cur = pick(logits, sampling, rng);
        out.push_back(cur);
    }
    return out;
}

} // namespace selfspec
