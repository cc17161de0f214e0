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

// Experiment commands behind the CLI. Each command takes a resolved
// ExperimentConfig, writes its files under config.out and returns a small
// JSON summary. Nothing written depends on wall-clock time.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfspec/model.hpp"
#include "selfspec/roofline.hpp"
#include "selfspec/specdec.hpp"

namespace selfspec {

struct ExperimentConfig {
    std::optional<ModelConfig> model;
    std::string model_path;
    std::uint64_t seed = 0;
    std::size_t prompt_len = 64;
    std::size_t num_prompts = 4;

    std::vector<std::size_t> gammas = {4};
    std::size_t decode_length = 90;
    SamplingMode sampling = SamplingMode::kGreedy;
    float temperature = 1.0f;

    bool kv_quant = true;
    bool weight_quant = true;
    std::size_t group_size = 16;
    std::size_t weight_group_size = 32;
    std::set<std::size_t> sensitive_layers;

    // Cost model used for modeled speedups.
    roofline::ModelDims dims;
    std::size_t batch = 1;
    std::size_t context_len = 4096;
    std::optional<roofline::HardwareSpec> hardware;
    std::string hardware_path;

    std::vector<std::size_t> roofline_batches = {1, 2, 4, 8, 16, 32, 64, 128, 256};
    std::vector<std::size_t> roofline_contexts = {1024, 4096, 16384, 65536, 262144};

    std::filesystem::path out = "out";

    // Unknown keys are rejected.
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig from_json_text(const std::string& text);
    // Resolved configuration, minus the output directory.
    nlohmann::ordered_json to_json() const;

    void validate() const;
};

// Loads hardware_path if no inline spec was given.
roofline::HardwareSpec resolve_hardware(const ExperimentConfig& config);
// Inline model config -> seeded random weights; otherwise the weight file.
ModelWeights resolve_weights(const ExperimentConfig& config);
// Seeded uniform token stream for prompt `index`.
std::vector<TokenId> synthetic_prompt(std::uint64_t seed, std::size_t index, std::size_t length, std::size_t vocab);

SpecConfig spec_config(const ExperimentConfig& config, std::size_t gamma, bool kv_quant, bool weight_quant);

// Runs every prompt at one gamma and returns the pooled metrics.
struct RunOutcome {
    Metrics pooled;
    std::vector<SpecResult> results;
};
RunOutcome run_prompts(const Model& model, const ExperimentConfig& config, std::size_t gamma, bool kv_quant,
                       bool weight_quant);

// metrics.csv, trace.ndjson, tokens.csv, manifest.json
nlohmann::ordered_json cmd_run(const ExperimentConfig& config);
// gamma_sweep.csv, manifest.json; gammas are sorted and deduplicated.
nlohmann::ordered_json cmd_gamma_sweep(const ExperimentConfig& config);
// ablation.csv, manifest.json
nlohmann::ordered_json cmd_ablate(const ExperimentConfig& config);
// roofline.csv, kv_memory.csv, manifest.json
nlohmann::ordered_json cmd_roofline(const ExperimentConfig& config);
// Seeded random weights in the QSPW format.
nlohmann::ordered_json cmd_gen_model(const ExperimentConfig& config, const std::filesystem::path& out_path);

} // namespace selfspec
