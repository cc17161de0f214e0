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

#include "selfspec/selfspec.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "selfspec/error.hpp"
#include "selfspec/harness.hpp"
#include "selfspec/model.hpp"
#include "selfspec/specdec.hpp"

struct ss_model {
    selfspec::Model model;
};

struct ss_engine {
    const ss_model* model = nullptr;
    selfspec::SpecConfig config;
    std::optional<selfspec::SpecResult> last;
};

namespace {

thread_local std::string g_last_error;

ss_status set_error(ss_status status, const std::string& message) {
    g_last_error = message;
    return status;
}

ss_status to_status(selfspec::ErrorCode code) {
    return static_cast<ss_status>(static_cast<int>(code));
}

// Runs fn and turns exceptions into status codes.
template <typename Fn>
ss_status guarded(Fn&& fn) {
    try {
        fn();
        return SS_OK;
    } catch (const selfspec::Error& e) {
        return set_error(to_status(e.code()), e.what());
    } catch (const nlohmann::json::exception& e) {
        return set_error(SS_ERR_CONFIG, e.what());
    } catch (const std::bad_alloc&) {
        return set_error(SS_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return set_error(SS_ERR_INTERNAL, e.what());
    } catch (...) {
        return set_error(SS_ERR_INTERNAL, "unknown exception");
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void require(bool ok, const char* what) {
    if (!ok) throw selfspec::Error(selfspec::ErrorCode::kContract, what);
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw selfspec::Error(selfspec::ErrorCode::kConfig, "config must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* key) { return k == key; })) {
            throw selfspec::Error(selfspec::ErrorCode::kConfig, "unknown key '" + k + "'");
        }
    }
}

selfspec::ModelConfig parse_model_config(const char* json_text) {
    selfspec::ModelConfig c;
    if (json_text == nullptr || *json_text == '\0') return c;
    const auto j = nlohmann::json::parse(json_text);
    reject_unknown(j, {"num_layers", "num_heads", "head_dim", "mlp_hidden", "vocab", "max_positions"});
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.vocab = j.value("vocab", c.vocab);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.validate();
    return c;
}

selfspec::SpecConfig parse_spec_config(const char* json_text) {
    selfspec::SpecConfig c;
    if (json_text == nullptr || *json_text == '\0') return c;
    const auto j = nlohmann::json::parse(json_text);
    reject_unknown(j, {"gamma", "decode_length", "sampling", "temperature", "seed", "kv_quant", "weight_quant", "group_size",
                       "sensitive_layers"});
    c.gamma = j.value("gamma", c.gamma);
    c.decode_length = j.value("decode_length", c.decode_length);
    const std::string sampling = j.value("sampling", std::string("greedy"));
    if (sampling == "greedy") {
        c.sampling.mode = selfspec::SamplingMode::kGreedy;
    } else if (sampling == "stochastic") {
        c.sampling.mode = selfspec::SamplingMode::kStochastic;
    } else {
        throw selfspec::Error(selfspec::ErrorCode::kConfig, "sampling must be 'greedy' or 'stochastic'");
    }
    c.sampling.temperature = j.value("temperature", c.sampling.temperature);
    c.sampling.seed = j.value("seed", c.sampling.seed);
    c.draft_weights = j.value("weight_quant", true) ? selfspec::WeightMode::kInt4 : selfspec::WeightMode::kFp;
    c.cache.mode = j.value("kv_quant", true) ? selfspec::CacheMode::kHierarchical : selfspec::CacheMode::kFp;
    c.cache.group_size = j.value("group_size", c.cache.group_size);
    if (j.contains("sensitive_layers")) c.cache.sensitive_layers = j.at("sensitive_layers").get<std::set<std::size_t>>();
    c.validate();
    return c;
}

void emit_summary(const nlohmann::ordered_json& s, char** out) {
    if (out != nullptr) *out = dup_string(s.dump());
}

} // namespace

extern "C" {

const char* ss_version(void) {
    return "0.1.0";
}

const char* ss_status_name(ss_status status) {
    switch (status) {
    case SS_OK: return "ok";
    case SS_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case SS_ERR_INTERNAL: return "internal";
    default: break;
    }
    if (status >= SS_ERR_DIMENSION && status <= SS_ERR_IO) {
        return selfspec::error_code_name(static_cast<selfspec::ErrorCode>(status));
    }
    return "unknown";
}

const char* ss_last_error(void) {
    return g_last_error.c_str();
}

void ss_string_free(char* s) {
    std::free(s);
}

ss_status ss_set_log_level(const char* level) {
    if (level == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null log level");
    const std::string l(level);
    if (l == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (l == "info") {
        spdlog::set_level(spdlog::level::info);
    } else if (l == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        return set_error(SS_ERR_CONFIG, "log level must be error, info or debug");
    }
    return SS_OK;
}

ss_status ss_model_create_random(const char* config_json, uint64_t seed, size_t int4_group_size, ss_model** out) {
    if (out == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null output handle");
    *out = nullptr;
    return guarded([&] {
        require(int4_group_size > 0, "int4_group_size must be >= 1");
        const auto config = parse_model_config(config_json);
        *out = new ss_model{selfspec::Model(selfspec::ModelWeights::random(config, seed), int4_group_size)};
    });
}

ss_status ss_model_load(const char* path, size_t int4_group_size, ss_model** out) {
    if (out == nullptr || path == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    *out = nullptr;
    return guarded([&] {
        require(int4_group_size > 0, "int4_group_size must be >= 1");
        *out = new ss_model{selfspec::Model(selfspec::load_weights(path), int4_group_size)};
    });
}

ss_status ss_model_save(const ss_model* model, const char* path) {
    if (model == nullptr || path == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] { selfspec::save_weights(path, model->model.weights()); });
}

ss_status ss_model_info_json(const ss_model* model, char** out_json) {
    if (model == nullptr || out_json == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        const auto& c = model->model.config();
        nlohmann::ordered_json j;
        j["num_layers"] = c.num_layers;
        j["num_heads"] = c.num_heads;
        j["head_dim"] = c.head_dim;
        j["mlp_hidden"] = c.mlp_hidden;
        j["vocab"] = c.vocab;
        j["max_positions"] = c.max_positions;
        j["int4_group_size"] = model->model.int4_group_size();
        j["fp_weight_bytes"] = model->model.weight_bytes(selfspec::WeightMode::kFp);
        j["int4_weight_bytes"] = model->model.weight_bytes(selfspec::WeightMode::kInt4);
        *out_json = dup_string(j.dump());
    });
}

void ss_model_free(ss_model* model) {
    delete model;
}

ss_status ss_engine_create(const ss_model* model, const char* spec_json, ss_engine** out) {
    if (model == nullptr || out == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    *out = nullptr;
    return guarded([&] { *out = new ss_engine{model, parse_spec_config(spec_json), std::nullopt}; });
}

ss_status ss_engine_run(ss_engine* engine, const int32_t* prompt, size_t prompt_len, int32_t* out_tokens,
                        size_t capacity, size_t* out_len) {
    if (engine == nullptr || out_len == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    if (prompt == nullptr && prompt_len > 0) return set_error(SS_ERR_INVALID_ARGUMENT, "null prompt");
    if (out_tokens == nullptr && capacity > 0) return set_error(SS_ERR_INVALID_ARGUMENT, "null output buffer");
    return guarded([&] {
        engine->last.reset();
        auto result = selfspec::run(engine->model->model, std::span(prompt, prompt_len), engine->config);
        const std::size_t n = std::min(capacity, result.tokens.size());
        std::copy_n(result.tokens.begin(), n, out_tokens);
        *out_len = result.tokens.size();
        engine->last = std::move(result);
    });
}

ss_status ss_engine_metrics_json(const ss_engine* engine, char** out_json) {
    if (engine == nullptr || out_json == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        require(engine->last.has_value(), "no completed run");
        const auto& m = engine->last->metrics;
        nlohmann::ordered_json j;
        j["drafted"] = m.drafted;
        j["accepted"] = m.accepted;
        j["verifications"] = m.verifications;
        j["emitted"] = m.emitted;
        j["acceptance_rate"] = m.acceptance_rate;
        j["tokens_per_verification"] = m.tokens_per_verification;
        j["modeled_speedup"] = m.modeled_speedup;
        j["peak_cache_bytes"] = m.peak_cache_bytes;
        j["residual_fallbacks"] = m.residual_fallbacks;
        *out_json = dup_string(j.dump());
    });
}

ss_status ss_engine_write_trace(const ss_engine* engine, const char* path) {
    if (engine == nullptr || path == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        require(engine->last.has_value(), "no completed run");
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw selfspec::Error(selfspec::ErrorCode::kIo, std::string("cannot write ") + path);
        engine->last->trace.write_ndjson(os);
        if (!os) throw selfspec::Error(selfspec::ErrorCode::kIo, std::string("short write to ") + path);
    });
}

void ss_engine_free(ss_engine* engine) {
    delete engine;
}

ss_status ss_cmd_run(const char* config_json, char** out_summary) {
    if (config_json == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null config");
    return guarded([&] { emit_summary(selfspec::cmd_run(selfspec::ExperimentConfig::from_json_text(config_json)), out_summary); });
}

ss_status ss_cmd_gamma_sweep(const char* config_json, char** out_summary) {
    if (config_json == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null config");
    return guarded(
        [&] { emit_summary(selfspec::cmd_gamma_sweep(selfspec::ExperimentConfig::from_json_text(config_json)), out_summary); });
}

ss_status ss_cmd_ablate(const char* config_json, char** out_summary) {
    if (config_json == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null config");
    return guarded(
        [&] { emit_summary(selfspec::cmd_ablate(selfspec::ExperimentConfig::from_json_text(config_json)), out_summary); });
}

ss_status ss_cmd_roofline(const char* config_json, char** out_summary) {
    if (config_json == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null config");
    return guarded(
        [&] { emit_summary(selfspec::cmd_roofline(selfspec::ExperimentConfig::from_json_text(config_json)), out_summary); });
}

ss_status ss_cmd_gen_model(const char* config_json, const char* out_path, char** out_summary) {
    if (config_json == nullptr || out_path == nullptr) return set_error(SS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        emit_summary(selfspec::cmd_gen_model(selfspec::ExperimentConfig::from_json_text(config_json), out_path), out_summary);
    });
}

} // extern "C"
