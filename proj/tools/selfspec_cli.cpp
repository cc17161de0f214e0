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

// selfspec command-line driver. Talks to the engine only through the C API.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "selfspec/selfspec.h"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
    std::string config;
    std::vector<std::size_t> gamma;
    std::optional<std::size_t> context_len;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string hardware;
    std::optional<bool> kv_quant;
    std::optional<bool> weight_quant;
};

struct ConfigIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
    if (path.empty()) return json{{"model", json::object()}};
    std::ifstream in(path);
    if (!in) throw ConfigIoError("cannot open config " + path);
    json j = json::parse(in);
    // Paths inside the file are relative to the file.
    const fs::path base = fs::path(path).parent_path();
    for (const char* key : {"model_path", "hardware_path"}) {
        if (j.contains(key) && j[key].is_string()) {
            const fs::path p = j[key].get<std::string>();
            if (p.is_relative()) j[key] = (base / p).lexically_normal().string();
        }
    }
    return j;
}

json resolve(const Options& o) {
    json j = load_config(o.config);
    if (!o.gamma.empty()) j["spec"]["gamma"] = o.gamma;
    if (o.context_len) j["cost_model"]["context_len"] = *o.context_len;
    if (o.seed) j["seed"] = *o.seed;
    if (!o.out.empty()) j["out"] = o.out;
    if (!o.hardware.empty()) {
        j.erase("hardware");
        j["hardware_path"] = o.hardware;
    }
    if (o.kv_quant) j["quant"]["kv_quant"] = *o.kv_quant;
    if (o.weight_quant) j["quant"]["weight_quant"] = *o.weight_quant;
    return j;
}

int finish(ss_status st, char* summary) {
    if (st != SS_OK) {
        std::cerr << "error (" << ss_status_name(st) << "): " << ss_last_error() << "\n";
        return static_cast<int>(st);
    }
    if (summary != nullptr) {
        std::cout << summary << "\n";
        ss_string_free(summary);
    }
    return 0;
}

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "experiment config (JSON)");
    cmd->add_option("--seed", o.seed, "seed for weights, prompts and sampling");
}

void add_engine(CLI::App* cmd, Options& o) {
    cmd->add_option("--gamma", o.gamma, "speculation length(s)")->delimiter(',');
    cmd->add_option("--context-len", o.context_len, "context length S_L for the cost model");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--hardware", o.hardware, "hardware spec (JSON)");
    cmd->add_option("--kv-quant", o.kv_quant, "quantize the KV cache (true/false)");
    cmd->add_option("--weight-quant", o.weight_quant, "INT4 draft weights (true/false)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"selfspec: self-speculative decoding with a hierarchical quantized KV cache"};
    app.require_subcommand(1);
    Options o;

    auto* run = app.add_subcommand("run", "speculative decoding over synthetic prompts");
    auto* sweep = app.add_subcommand("gamma-sweep", "acceptance and modeled speedup per gamma");
    auto* ablate = app.add_subcommand("ablate", "kv-only / weight-only / both / neither");
    auto* roof = app.add_subcommand("roofline", "FLOP / byte counts and bound classification over a grid");
    auto* gen = app.add_subcommand("gen-model", "write seeded random weights");
    for (auto* c : {run, sweep, ablate, roof, gen}) add_common(c, o);
    for (auto* c : {run, sweep, ablate}) add_engine(c, o);
    roof->add_option("--out", o.out, "output directory");
    roof->add_option("--hardware", o.hardware, "hardware spec (JSON)");
    roof->add_option("--context-len", o.context_len, "context length for the cost model");
    gen->add_option("--out", o.out, "weight file to write")->required();

    CLI11_PARSE(app, argc, argv);

    if (const char* level = std::getenv("QUANTSPEC_LOG")) {
        if (ss_set_log_level(level) != SS_OK) {
            std::cerr << "error: " << ss_last_error() << "\n";
            return 2;
        }
    } else {
        ss_set_log_level("error");
    }

    std::string config_text;
    try {
        config_text = resolve(o).dump();
    } catch (const ConfigIoError& e) {
        std::cerr << "error (" << ss_status_name(SS_ERR_IO) << "): " << e.what() << "\n";
        return static_cast<int>(SS_ERR_IO);
    } catch (const std::exception& e) {
        std::cerr << "error (" << ss_status_name(SS_ERR_CONFIG) << "): " << e.what() << "\n";
        return static_cast<int>(SS_ERR_CONFIG);
    }

    json j = json::parse(config_text);
    char* summary = nullptr;
    ss_status st = SS_OK;
    if (run->parsed()) {
        st = ss_cmd_run(config_text.c_str(), &summary);
    } else if (sweep->parsed()) {
        st = ss_cmd_gamma_sweep(config_text.c_str(), &summary);
    } else if (ablate->parsed()) {
        st = ss_cmd_ablate(config_text.c_str(), &summary);
    } else if (roof->parsed()) {
        st = ss_cmd_roofline(config_text.c_str(), &summary);
    } else {
        // gen-model: --out names the file, not a directory.
        j.erase("out");
        st = ss_cmd_gen_model(j.dump().c_str(), o.out.c_str(), &summary);
    }
    return finish(st, summary);
}
