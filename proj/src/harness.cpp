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

#include "selfspec/harness.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "binary_io.hpp"
#include "selfspec/error.hpp"

namespace selfspec {

namespace {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) fail(ErrorCode::kConfig, where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* key) { return k == key; })) {
            fail(ErrorCode::kConfig, "unknown key '" + k + "' in " + where);
        }
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void prepare_out(const ExperimentConfig& c) {
    std::error_code ec;
    std::filesystem::create_directories(c.out, ec);
    if (ec) fail(ErrorCode::kIo, "cannot create output directory " + c.out.string() + ": " + ec.message());
}

void write_manifest(const ExperimentConfig& c, const std::string& command) {
    ojson m;
    m["command"] = command;
    m["config"] = c.to_json();
    write_text(c.out / "manifest.json", m.dump(2) + "\n");
}

const char* sampling_name(SamplingMode m) {
    return m == SamplingMode::kGreedy ? "greedy" : "stochastic";
}

} // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    try {
        reject_unknown(j, {"model", "model_path", "seed", "prompt_len", "num_prompts", "spec", "quant", "cost_model",
                           "hardware", "hardware_path", "roofline", "out"},
                       "config");
        if (j.contains("model")) {
            const auto& m = j.at("model");
            reject_unknown(m, {"num_layers", "num_heads", "head_dim", "mlp_hidden", "vocab", "max_positions"}, "model");
            ModelConfig mc;
            read_opt(m, "num_layers", mc.num_layers);
            read_opt(m, "num_heads", mc.num_heads);
            read_opt(m, "head_dim", mc.head_dim);
            read_opt(m, "mlp_hidden", mc.mlp_hidden);
            read_opt(m, "vocab", mc.vocab);
            read_opt(m, "max_positions", mc.max_positions);
            c.model = mc;
        }
        read_opt(j, "model_path", c.model_path);
        read_opt(j, "seed", c.seed);
        read_opt(j, "prompt_len", c.prompt_len);
        read_opt(j, "num_prompts", c.num_prompts);
        if (j.contains("spec")) {
            const auto& s = j.at("spec");
            reject_unknown(s, {"gamma", "decode_length", "sampling", "temperature"}, "spec");
            if (s.contains("gamma")) {
                const auto& g = s.at("gamma");
                c.gammas = g.is_array() ? g.get<std::vector<std::size_t>>() : std::vector<std::size_t>{g.get<std::size_t>()};
            }
            read_opt(s, "decode_length", c.decode_length);
            if (s.contains("sampling")) {
                const auto mode = s.at("sampling").get<std::string>();
                if (mode == "greedy") {
                    c.sampling = SamplingMode::kGreedy;
                } else if (mode == "stochastic") {
                    c.sampling = SamplingMode::kStochastic;
                } else {
                    fail(ErrorCode::kConfig, "spec.sampling must be 'greedy' or 'stochastic'");
                }
            }
            read_opt(s, "temperature", c.temperature);
        }
        if (j.contains("quant")) {
            const auto& q = j.at("quant");
            reject_unknown(q, {"kv_quant", "weight_quant", "group_size", "weight_group_size", "sensitive_layers"}, "quant");
            read_opt(q, "kv_quant", c.kv_quant);
            read_opt(q, "weight_quant", c.weight_quant);
            read_opt(q, "group_size", c.group_size);
            read_opt(q, "weight_group_size", c.weight_group_size);
            read_opt(q, "sensitive_layers", c.sensitive_layers);
        }
        if (j.contains("cost_model")) {
            const auto& cm = j.at("cost_model");
            reject_unknown(cm, {"dims", "batch", "context_len"}, "cost_model");
            if (cm.contains("dims")) {
                const auto& d = cm.at("dims");
                reject_unknown(d, {"layers", "hidden", "heads", "kv_dim", "mlp_hidden", "vocab", "bytes_weight", "bytes_kv",
                                   "bytes_act"},
                               "cost_model.dims");
                read_opt(d, "layers", c.dims.layers);
                read_opt(d, "hidden", c.dims.hidden);
                read_opt(d, "heads", c.dims.heads);
                read_opt(d, "kv_dim", c.dims.kv_dim);
                read_opt(d, "mlp_hidden", c.dims.mlp_hidden);
                read_opt(d, "vocab", c.dims.vocab);
                read_opt(d, "bytes_weight", c.dims.bytes_weight);
                read_opt(d, "bytes_kv", c.dims.bytes_kv);
                read_opt(d, "bytes_act", c.dims.bytes_act);
            }
            read_opt(cm, "batch", c.batch);
            read_opt(cm, "context_len", c.context_len);
        }
        if (j.contains("hardware")) c.hardware = roofline::HardwareSpec::from_json_text(j.at("hardware").dump());
        read_opt(j, "hardware_path", c.hardware_path);
        if (j.contains("roofline")) {
            const auto& r = j.at("roofline");
            reject_unknown(r, {"batches", "contexts"}, "roofline");
            read_opt(r, "batches", c.roofline_batches);
            read_opt(r, "contexts", c.roofline_contexts);
        }
        if (j.contains("out")) c.out = j.at("out").get<std::string>();
    } catch (const json::exception& e) {
        fail(ErrorCode::kConfig, std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::kConfig, std::string("config: ") + e.what());
    }
    return from_json(j);
}

ojson ExperimentConfig::to_json() const {
    ojson j;
    if (model) {
        j["model"] = {{"num_layers", model->num_layers}, {"num_heads", model->num_heads}, {"head_dim", model->head_dim},
                      {"mlp_hidden", model->mlp_hidden}, {"vocab", model->vocab}, {"max_positions", model->max_positions}};
    }
    if (!model_path.empty()) j["model_path"] = model_path;
    j["seed"] = seed;
    j["prompt_len"] = prompt_len;
    j["num_prompts"] = num_prompts;
    j["spec"] = {{"gamma", gammas}, {"decode_length", decode_length}, {"sampling", sampling_name(sampling)},
                 {"temperature", temperature}};
    j["quant"] = {{"kv_quant", kv_quant}, {"weight_quant", weight_quant}, {"group_size", group_size},
                  {"weight_group_size", weight_group_size}, {"sensitive_layers", sensitive_layers}};
    j["cost_model"] = {{"dims",
                        {{"layers", dims.layers}, {"hidden", dims.hidden}, {"heads", dims.heads}, {"kv_dim", dims.kv_dim},
                         {"mlp_hidden", dims.mlp_hidden}, {"vocab", dims.vocab}, {"bytes_weight", dims.bytes_weight},
                         {"bytes_kv", dims.bytes_kv}, {"bytes_act", dims.bytes_act}}},
                       {"batch", batch},
                       {"context_len", context_len}};
    if (hardware) {
        j["hardware"] = {{"name", hardware->name}, {"peak_flops", hardware->peak_flops}, {"peak_bw", hardware->peak_bw},
                         {"vram_bytes", hardware->vram_bytes}, {"devices", hardware->devices}};
    }
    if (!hardware_path.empty()) j["hardware_path"] = hardware_path;
    j["roofline"] = {{"batches", roofline_batches}, {"contexts", roofline_contexts}};
    return j;
}

void ExperimentConfig::validate() const {
    if (!model && model_path.empty()) fail(ErrorCode::kConfig, "config needs an inline model or a model_path");
    if (model) model->validate();
    if (prompt_len == 0) fail(ErrorCode::kConfig, "prompt_len must be >= 1");
    if (num_prompts == 0) fail(ErrorCode::kConfig, "num_prompts must be >= 1");
    if (gammas.empty()) fail(ErrorCode::kConfig, "spec.gamma must name at least one value");
    for (std::size_t g : gammas) {
        if (g == 0 || g > group_size) fail(ErrorCode::kConfig, "every gamma must lie in [1, group_size]");
    }
    if (decode_length == 0) fail(ErrorCode::kConfig, "decode_length must be >= 1");
    if (sampling == SamplingMode::kStochastic && !(temperature > 0.0f)) fail(ErrorCode::kConfig, "temperature must be positive");
    if (group_size == 0 || weight_group_size == 0) fail(ErrorCode::kConfig, "group sizes must be >= 1");
    dims.validate();
    if (batch == 0 || context_len == 0) fail(ErrorCode::kConfig, "cost_model batch and context_len must be >= 1");
    if (hardware) hardware->validate();
    if (roofline_batches.empty() || roofline_contexts.empty()) fail(ErrorCode::kConfig, "roofline grid must be nonempty");
    for (std::size_t v : roofline_batches) {
        if (v == 0) fail(ErrorCode::kConfig, "roofline batches must be >= 1");
    }
    for (std::size_t v : roofline_contexts) {
        if (v == 0) fail(ErrorCode::kConfig, "roofline contexts must be >= 1");
    }
}

roofline::HardwareSpec resolve_hardware(const ExperimentConfig& config) {
    if (config.hardware) return *config.hardware;
    if (config.hardware_path.empty()) fail(ErrorCode::kConfig, "no hardware spec: set hardware or hardware_path");
    return roofline::HardwareSpec::load(config.hardware_path);
}

ModelWeights resolve_weights(const ExperimentConfig& config) {
    if (config.model) return ModelWeights::random(*config.model, config.seed);
    return load_weights(config.model_path);
}

std::vector<TokenId> synthetic_prompt(std::uint64_t seed, std::size_t index, std::size_t length, std::size_t vocab) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), 0x9e3779b9u};
    std::mt19937_64 rng(seq);
    std::vector<TokenId> out(length);
    // Modulo bias is irrelevant here and keeps the stream implementation-independent.
    for (auto& t : out) t = static_cast<TokenId>(rng() % vocab);
    return out;
}

SpecConfig spec_config(const ExperimentConfig& config, std::size_t gamma, bool kv_quant, bool weight_quant) {
    SpecConfig s;
    s.gamma = gamma;
    s.decode_length = config.decode_length;
    s.sampling.mode = config.sampling;
    s.sampling.temperature = config.temperature;
    s.sampling.seed = config.seed;
    s.draft_weights = weight_quant ? WeightMode::kInt4 : WeightMode::kFp;
    s.cache.mode = kv_quant ? CacheMode::kHierarchical : CacheMode::kFp;
    s.cache.group_size = config.group_size;
    s.cache.sensitive_layers = config.sensitive_layers;
    if (config.hardware || !config.hardware_path.empty()) {
        s.costs = roofline::spec_costs(config.dims, resolve_hardware(config), config.batch, config.context_len, gamma,
                                       kv_quant, weight_quant);
    }
    return s;
}

RunOutcome run_prompts(const Model& model, const ExperimentConfig& config, std::size_t gamma, bool kv_quant,
                       bool weight_quant) {
    const SpecConfig base = spec_config(config, gamma, kv_quant, weight_quant);
    RunOutcome out;
    double speedup_sum = 0;
    for (std::size_t p = 0; p < config.num_prompts; ++p) {
        SpecConfig sc = base;
        sc.sampling.seed = config.seed + p;
        const auto prompt = synthetic_prompt(config.seed, p, config.prompt_len, model.config().vocab);
        out.results.push_back(run(model, prompt, sc));
        const Metrics& m = out.results.back().metrics;
        out.pooled.drafted += m.drafted;
        out.pooled.accepted += m.accepted;
        out.pooled.verifications += m.verifications;
        out.pooled.emitted += m.emitted;
        out.pooled.residual_fallbacks += m.residual_fallbacks;
        out.pooled.peak_cache_bytes = std::max(out.pooled.peak_cache_bytes, m.peak_cache_bytes);
        speedup_sum += m.modeled_speedup;
        spdlog::debug("gamma {} prompt {}: acceptance {:.4f}", gamma, p, m.acceptance_rate);
    }
    Metrics& m = out.pooled;
    if (m.drafted > 0) {
        m.acceptance_rate = static_cast<double>(m.accepted) / static_cast<double>(m.drafted);
        m.tokens_per_verification = static_cast<double>(m.emitted) / static_cast<double>(m.verifications);
    }
    if (base.costs.valid() && m.drafted > 0) {
        m.modeled_speedup =
            roofline::speedup_model(m.acceptance_rate, gamma, base.costs.t_ar, base.costs.t_draft, base.costs.t_verify);
    } else {
        m.modeled_speedup = speedup_sum / static_cast<double>(config.num_prompts);
    }
    return out;
}

ojson cmd_run(const ExperimentConfig& config) {
    config.validate();
    if (config.gammas.size() != 1) fail(ErrorCode::kConfig, "run takes a single gamma; use gamma-sweep for a list");
    prepare_out(config);
    const Model model(resolve_weights(config), config.weight_group_size);
    const std::size_t gamma = config.gammas.front();
    const RunOutcome r = run_prompts(model, config, gamma, config.kv_quant, config.weight_quant);

    std::string csv = "prompt,gamma,kv_quant,weight_quant,drafted,accepted,acceptance_rate,tokens_per_verification,"
                      "modeled_speedup,peak_cache_bytes\n";
    auto row = [&](const std::string& name, const Metrics& m) {
        csv += name + "," + std::to_string(gamma) + "," + (config.kv_quant ? "true" : "false") + "," +
               (config.weight_quant ? "true" : "false") + "," + std::to_string(m.drafted) + "," +
               std::to_string(m.accepted) + "," + fmt(m.acceptance_rate) + "," + fmt(m.tokens_per_verification) + "," +
               fmt(m.modeled_speedup) + "," + fmt(m.peak_cache_bytes) + "\n";
    };
    std::ostringstream trace;
    std::string tokens = "prompt,tokens\n";
    for (std::size_t p = 0; p < r.results.size(); ++p) {
        row(std::to_string(p), r.results[p].metrics);
        r.results[p].trace.write_ndjson(trace, p);
        tokens += std::to_string(p) + ",";
        for (std::size_t i = 0; i < r.results[p].tokens.size(); ++i) {
            tokens += (i ? " " : "") + std::to_string(r.results[p].tokens[i]);
        }
        tokens += "\n";
    }
    row("all", r.pooled);

    write_text(config.out / "metrics.csv", csv);
    write_text(config.out / "trace.ndjson", trace.str());
    write_text(config.out / "tokens.csv", tokens);
    write_manifest(config, "run");

    ojson s;
    s["command"] = "run";
    s["gamma"] = gamma;
    s["acceptance_rate"] = r.pooled.acceptance_rate;
    s["tokens_per_verification"] = r.pooled.tokens_per_verification;
    s["modeled_speedup"] = r.pooled.modeled_speedup;
    s["peak_cache_bytes"] = r.pooled.peak_cache_bytes;
    return s;
}

ojson cmd_gamma_sweep(const ExperimentConfig& config) {
    config.validate();
    prepare_out(config);
    std::vector<std::size_t> gammas = config.gammas;
    std::sort(gammas.begin(), gammas.end());
    gammas.erase(std::unique(gammas.begin(), gammas.end()), gammas.end());

    const Model model(resolve_weights(config), config.weight_group_size);
    std::vector<Metrics> rows;
    for (std::size_t g : gammas) rows.push_back(run_prompts(model, config, g, config.kv_quant, config.weight_quant).pooled);

    std::size_t best = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].modeled_speedup > rows[best].modeled_speedup) best = i;
    }
    bool nonincreasing = true;
    for (std::size_t i = 1; i < rows.size(); ++i) nonincreasing = nonincreasing && rows[i].acceptance_rate <= rows[i - 1].acceptance_rate;

    std::string csv = "gamma,acceptance_rate,tokens_per_verification,modeled_speedup,best\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        csv += std::to_string(gammas[i]) + "," + fmt(rows[i].acceptance_rate) + "," + fmt(rows[i].tokens_per_verification) +
               "," + fmt(rows[i].modeled_speedup) + "," + (i == best ? "true" : "false") + "\n";
    }
    write_text(config.out / "gamma_sweep.csv", csv);
    write_manifest(config, "gamma-sweep");

    ojson s;
    s["command"] = "gamma-sweep";
    s["gammas"] = gammas;
    s["best_gamma"] = gammas[best];
    s["acceptance_nonincreasing"] = nonincreasing;
    return s;
}

ojson cmd_ablate(const ExperimentConfig& config) {
    config.validate();
    if (config.gammas.size() != 1) fail(ErrorCode::kConfig, "ablate takes a single gamma");
    prepare_out(config);
    const auto hw = resolve_hardware(config);
    const Model model(resolve_weights(config), config.weight_group_size);
    const std::size_t gamma = config.gammas.front();

    struct Variant {
        const char* name;
        bool kv;
        bool weight;
    };
    const Variant variants[] = {{"neither", false, false}, {"kv-only", true, false}, {"weight-only", false, true}, {"both", true, true}};

    std::string csv = "variant,kv_quant,weight_quant,acceptance_rate,tokens_per_verification,modeled_speedup,spec_speedup\n";
    ojson s;
    s["command"] = "ablate";
    for (const auto& v : variants) {
        const Metrics m = run_prompts(model, config, gamma, v.kv, v.weight).pooled;
        const auto costs = roofline::spec_costs(config.dims, hw, config.batch, config.context_len, gamma, v.kv, v.weight);
        const double step_speedup = costs.t_ar / costs.t_draft;
        csv += std::string(v.name) + "," + (v.kv ? "true" : "false") + "," + (v.weight ? "true" : "false") + "," +
               fmt(m.acceptance_rate) + "," + fmt(m.tokens_per_verification) + "," + fmt(step_speedup) + "," +
               fmt(m.modeled_speedup) + "\n";
        s[v.name] = {{"acceptance_rate", m.acceptance_rate}, {"modeled_speedup", step_speedup}, {"spec_speedup", m.modeled_speedup}};
    }
    write_text(config.out / "ablation.csv", csv);
    write_manifest(config, "ablate");
    return s;
}

ojson cmd_roofline(const ExperimentConfig& config) {
    config.validate();
    prepare_out(config);
    const auto hw = resolve_hardware(config);
    const auto rows = roofline::roofline_grid(config.dims, hw, config.roofline_batches, config.roofline_contexts);
    const auto mem = roofline::kv_memory_sweep(config.roofline_batches, config.roofline_contexts, config.dims, hw);
    write_text(config.out / "roofline.csv", roofline::roofline_csv(rows));
    write_text(config.out / "kv_memory.csv", roofline::kv_memory_csv(mem));
    write_manifest(config, "roofline");

    bool decode_memory = true, prefill_compute = true;
    for (const auto& r : rows) {
        if (r.component != "aggregate") continue;
        if (r.phase == roofline::Phase::kDecode) decode_memory = decode_memory && r.bound == roofline::Bound::kMemory;
        if (r.phase == roofline::Phase::kPrefill) prefill_compute = prefill_compute && r.bound == roofline::Bound::kCompute;
    }
    ojson s;
    s["command"] = "roofline";
    s["rows"] = rows.size();
    s["ridge"] = hw.ridge();
    s["decode_all_memory_bound"] = decode_memory;
    s["prefill_all_compute_bound"] = prefill_compute;
    return s;
}

ojson cmd_gen_model(const ExperimentConfig& config, const std::filesystem::path& out_path) {
    if (!config.model) fail(ErrorCode::kConfig, "gen-model needs an inline model config");
    const auto weights = ModelWeights::random(*config.model, config.seed);
    if (out_path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(out_path.parent_path(), ec);
        if (ec) fail(ErrorCode::kIo, "cannot create " + out_path.parent_path().string());
    }
    save_weights(out_path, weights);
    ojson s;
    s["command"] = "gen-model";
    s["path"] = out_path.string();
    s["seed"] = config.seed;
    s["tensors"] = weights.named_tensors().size();
    return s;
}

} // namespace selfspec
