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

// Analytic FLOP / memory-traffic counters for a Llama-style decoder and a
// roofline classifier on top of them.
//
// Counting rules:
//   linear     2 FLOPs per multiply-add over the seven per-layer matrices and
//              the classifier; weights are read once per pass; every matmul
//              reads its input activation and writes its output.
//   attention  QK^T plus AV at 4 * S_L * d FLOPs per query token and layer
//              (x0.5 for causal prefill), softmax at 5 FLOPs per score;
//              scores are never materialized, only per-row max and
//              denominator are written.
//   nonlinear  RMSNorm 4 FLOPs/element, SiLU gate 6 FLOPs/element; counted
//              in the aggregate only, no extra traffic (fused).

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace selfspec::roofline {

inline constexpr double kRmsNormFlopsPerElement = 4.0;
inline constexpr double kSoftmaxFlopsPerScore = 5.0;
inline constexpr double kSiluGateFlopsPerElement = 6.0;
inline constexpr double kCausalFactor = 0.5;

struct HardwareSpec {
    std::string name = "unnamed";
    double peak_flops = 0; // FLOP/s
    double peak_bw = 0;    // bytes/s
    double vram_bytes = 0; // per device
    std::size_t devices = 1;

    double ridge() const noexcept { return peak_flops / peak_bw; }
    void validate() const;

    static HardwareSpec from_json_text(const std::string& text);
    static HardwareSpec load(const std::filesystem::path& path);
};

struct ModelDims {
    std::size_t layers = 32;
    std::size_t hidden = 4096;
    std::size_t heads = 32;
    std::size_t kv_dim = 4096;
    std::size_t mlp_hidden = 11008;
    std::size_t vocab = 32000;
    double bytes_weight = 2;
    double bytes_kv = 2;
    double bytes_act = 2;

    // Llama-2-7B in FP16.
    static ModelDims llama2_7b() { return ModelDims{}; }
    void validate() const;

    // Sum of d_in * d_out over all linear matrices including the classifier.
    double linear_params() const noexcept;
    // Resident weights: linear matrices plus the embedding table.
    double weight_bytes() const noexcept;
    // Sum of (d_in + d_out) over the same matrices.
    double linear_io_elements() const noexcept;
};

struct WorkloadPoint {
    std::size_t batch = 1;
    std::size_t context = 1024; // S_L
    std::size_t gen_len = 1;    // k, decode only
    // Query tokens per sequence processed in one decode pass (1 for plain
    // decoding, gamma + 1 for a verification pass).
    std::size_t tokens_per_pass = 1;

    void validate() const;
};

struct RooflinePoint {
    double flops = 0;
    double mops = 0; // bytes

    double intensity() const noexcept { return mops > 0 ? flops / mops : 0.0; }
};

struct PhaseCounts {
    RooflinePoint linear;
    RooflinePoint attention;
    RooflinePoint aggregate;
};

PhaseCounts count_prefill(const WorkloadPoint& w, const ModelDims& m);
PhaseCounts count_decode(const WorkloadPoint& w, const ModelDims& m);

enum class Bound { kCompute, kMemory };
const char* bound_name(Bound b) noexcept;

struct Classification {
    Bound bound = Bound::kMemory;
    double latency = 0; // seconds
};

// Intensity at or above the ridge point counts as compute-bound.
Classification classify(const RooflinePoint& p, const HardwareSpec& hw) noexcept;

// Latency share of attention in linear + attention.
double attention_fraction(const PhaseCounts& c, const HardwareSpec& hw) noexcept;

enum class Phase { kPrefill, kDecode };
const char* phase_name(Phase p) noexcept;

struct RooflineRow {
    Phase phase = Phase::kDecode;
    std::size_t batch = 0;
    std::size_t context = 0;
    std::string component;
    double flops = 0;
    double mops = 0;
    double intensity = 0;
    Bound bound = Bound::kMemory;
    double attention_fraction = 0;
};

// Prefill then decode, batches outer, contexts inner, components in
// linear / attention / aggregate order.
std::vector<RooflineRow> roofline_grid(const ModelDims& m, const HardwareSpec& hw, const std::vector<std::size_t>& batches,
                                       const std::vector<std::size_t>& contexts);
std::string roofline_csv(const std::vector<RooflineRow>& rows);

struct KvMemoryRow {
    std::size_t batch = 0;
    std::size_t context = 0;
    double kv_bytes = 0;
    double weight_bytes = 0;
    double ratio = 0;
    std::size_t devices_needed = 0;
    bool fits_one_device = false;
    bool fits = false; // within hw.devices
};

KvMemoryRow kv_memory(std::size_t batch, std::size_t context, const ModelDims& m, const HardwareSpec& hw);
std::vector<KvMemoryRow> kv_memory_sweep(const std::vector<std::size_t>& batches, const std::vector<std::size_t>& contexts,
                                         const ModelDims& m, const HardwareSpec& hw);
std::string kv_memory_csv(const std::vector<KvMemoryRow>& rows);

// Expected tokens per draft/verify cycle for per-token acceptance alpha.
double expected_tokens(double alpha, std::size_t gamma);
double speedup_model(double alpha, std::size_t gamma, double t_ar, double t_draft, double t_verify);

struct SpecCosts {
    double t_ar = 0;     // one FP16 autoregressive decode step
    double t_draft = 0;  // one draft step
    double t_verify = 0; // one verification pass over gamma + 1 tokens

    bool valid() const noexcept { return t_ar > 0 && t_draft > 0 && t_verify > 0; }
};

// Modeled decode latencies at (batch, context). The draft reads INT4 KV
// (0.5 B) when kv_quant and INT4 weights when weight_quant; verification reads
// the INT8-grade view (1 B) with FP16 weights.
SpecCosts spec_costs(const ModelDims& m, const HardwareSpec& hw, std::size_t batch, std::size_t context, std::size_t gamma,
                     bool kv_quant, bool weight_quant);

} // namespace selfspec::roofline
