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

#include "selfspec/roofline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "selfspec/error.hpp"

namespace selfspec::roofline {

namespace {

double latency(const RooflinePoint& p, const HardwareSpec& hw) noexcept {
    return std::max(p.flops / hw.peak_flops, p.mops / hw.peak_bw);
}

RooflinePoint sum(const RooflinePoint& a, const RooflinePoint& b) {
    return RooflinePoint{a.flops + b.flops, a.mops + b.mops};
}

// FLOPs of the norms and the gated activation for `tokens` query tokens.
double nonlinear_flops(const ModelDims& m, double tokens) {
    const double d = static_cast<double>(m.hidden);
    const double norms = (2.0 * static_cast<double>(m.layers) + 1.0) * d;
    const double gate = static_cast<double>(m.layers) * static_cast<double>(m.mlp_hidden);
    return tokens * (kRmsNormFlopsPerElement * norms + kSiluGateFlopsPerElement * gate);
}

// Activation elements touched by attention per query token and layer: read
// Q, K, V of the new token(s), write O.
double attention_io_elements(const ModelDims& m) {
    return 2.0 * static_cast<double>(m.hidden) + 2.0 * static_cast<double>(m.kv_dim);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

void HardwareSpec::validate() const {
    if (!(peak_flops > 0) || !(peak_bw > 0) || !(vram_bytes > 0) || devices == 0) {
        fail(ErrorCode::kConfig, "hardware spec: peak_flops, peak_bw, vram_bytes and devices must be positive");
    }
}

HardwareSpec HardwareSpec::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kConfig, std::string("hardware spec: ") + e.what());
    }
    HardwareSpec hw;
    try {
        hw.name = j.value("name", hw.name);
        hw.peak_flops = j.at("peak_flops").get<double>();
        hw.peak_bw = j.at("peak_bw").get<double>();
        hw.vram_bytes = j.at("vram_bytes").get<double>();
        hw.devices = j.value("devices", std::size_t{1});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kConfig, std::string("hardware spec: ") + e.what());
    }
    hw.validate();
    return hw;
}

HardwareSpec HardwareSpec::load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return from_json_text(std::string(bytes.begin(), bytes.end()));
}

void ModelDims::validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || kv_dim == 0 || mlp_hidden == 0 || vocab == 0) {
        fail(ErrorCode::kConfig, "model dims must be positive");
    }
    if (!(bytes_weight > 0) || !(bytes_kv > 0) || !(bytes_act > 0)) {
        fail(ErrorCode::kConfig, "bytes per element must be positive");
    }
}

double ModelDims::linear_params() const noexcept {
    const double d = static_cast<double>(hidden);
    const double kv = static_cast<double>(kv_dim);
    const double f = static_cast<double>(mlp_hidden);
    const double per_layer = 2.0 * d * d + 2.0 * d * kv + 3.0 * d * f;
    return static_cast<double>(layers) * per_layer + d * static_cast<double>(vocab);
}

double ModelDims::weight_bytes() const noexcept {
    return (linear_params() + static_cast<double>(vocab) * static_cast<double>(hidden)) * bytes_weight;
}

double ModelDims::linear_io_elements() const noexcept {
    const double d = static_cast<double>(hidden);
    const double kv = static_cast<double>(kv_dim);
    const double f = static_cast<double>(mlp_hidden);
    // wq, wk, wv, wo, w_gate, w_up, w_down
    const double per_layer = (d + d) + (d + kv) + (d + kv) + (d + d) + 2.0 * (d + f) + (f + d);
    return static_cast<double>(layers) * per_layer + d + static_cast<double>(vocab);
}

void WorkloadPoint::validate() const {
    if (batch == 0 || context == 0 || gen_len == 0 || tokens_per_pass == 0) {
        fail(ErrorCode::kConfig, "workload point fields must be positive");
    }
}

PhaseCounts count_prefill(const WorkloadPoint& w, const ModelDims& m) {
    w.validate();
    m.validate();
    const double b = static_cast<double>(w.batch);
    const double s = static_cast<double>(w.context);
    const double d = static_cast<double>(m.hidden);
    const double h = static_cast<double>(m.heads);
    const double layers = static_cast<double>(m.layers);
    const double tokens = b * s;

    PhaseCounts c;
    c.linear.flops = 2.0 * tokens * m.linear_params();
    c.linear.mops = m.linear_params() * m.bytes_weight + tokens * m.linear_io_elements() * m.bytes_act;

    const double scores = kCausalFactor * b * h * s * s;
    c.attention.flops = layers * (kCausalFactor * 4.0 * b * s * s * d + kSoftmaxFlopsPerScore * scores);
    c.attention.mops = layers * (tokens * attention_io_elements(m) * m.bytes_act + 2.0 * b * h * s * m.bytes_act);

    c.aggregate = sum(c.linear, c.attention);
    c.aggregate.flops += nonlinear_flops(m, tokens);
    return c;
}

PhaseCounts count_decode(const WorkloadPoint& w, const ModelDims& m) {
    w.validate();
    m.validate();
    const double b = static_cast<double>(w.batch);
    const double s = static_cast<double>(w.context);
    const double d = static_cast<double>(m.hidden);
    const double h = static_cast<double>(m.heads);
    const double kv = static_cast<double>(m.kv_dim);
    const double layers = static_cast<double>(m.layers);
    const double t = static_cast<double>(w.tokens_per_pass);
    const double k = static_cast<double>(w.gen_len);

    PhaseCounts c;
    c.linear.flops = k * 2.0 * b * t * m.linear_params();
    c.linear.mops = k * (m.linear_params() * m.bytes_weight + b * t * m.linear_io_elements() * m.bytes_act);

    c.attention.flops = k * layers * (4.0 * b * t * s * d + kSoftmaxFlopsPerScore * b * t * h * s);
    c.attention.mops = k * layers *
                       (2.0 * b * s * kv * m.bytes_kv + b * t * attention_io_elements(m) * m.bytes_act +
                        2.0 * b * t * h * m.bytes_act);

    c.aggregate = sum(c.linear, c.attention);
    c.aggregate.flops += k * nonlinear_flops(m, b * t);
    return c;
}

const char* bound_name(Bound b) noexcept {
    return b == Bound::kCompute ? "compute" : "memory";
}

const char* phase_name(Phase p) noexcept {
    return p == Phase::kPrefill ? "prefill" : "decode";
}

Classification classify(const RooflinePoint& p, const HardwareSpec& hw) noexcept {
    Classification c;
    c.bound = p.intensity() >= hw.ridge() ? Bound::kCompute : Bound::kMemory;
    c.latency = latency(p, hw);
    return c;
}

double attention_fraction(const PhaseCounts& c, const HardwareSpec& hw) noexcept {
    const double a = latency(c.attention, hw);
    const double total = a + latency(c.linear, hw);
    return total > 0 ? a / total : 0.0;
}

std::vector<RooflineRow> roofline_grid(const ModelDims& m, const HardwareSpec& hw, const std::vector<std::size_t>& batches,
                                       const std::vector<std::size_t>& contexts) {
    hw.validate();
    std::vector<RooflineRow> rows;
    for (Phase phase : {Phase::kPrefill, Phase::kDecode}) {
        for (std::size_t b : batches) {
            for (std::size_t s : contexts) {
                WorkloadPoint w;
                w.batch = b;
                w.context = s;
                const PhaseCounts c = phase == Phase::kPrefill ? count_prefill(w, m) : count_decode(w, m);
                const double frac = attention_fraction(c, hw);
                const std::pair<const char*, const RooflinePoint*> parts[] = {
                    {"linear", &c.linear}, {"attention", &c.attention}, {"aggregate", &c.aggregate}};
                for (const auto& [name, p] : parts) {
                    rows.push_back(RooflineRow{phase, b, s, name, p->flops, p->mops, p->intensity(), classify(*p, hw).bound,
                                               frac});
                }
            }
        }
    }
    return rows;
}

std::string roofline_csv(const std::vector<RooflineRow>& rows) {
    std::string out = "phase,B,S_L,component,flops,mops,intensity,bound,attention_fraction\n";
    for (const auto& r : rows) {
        out += std::string(phase_name(r.phase)) + "," + std::to_string(r.batch) + "," + std::to_string(r.context) + "," +
               r.component + "," + fmt(r.flops) + "," + fmt(r.mops) + "," + fmt(r.intensity) + "," + bound_name(r.bound) +
               "," + fmt(r.attention_fraction) + "\n";
    }
    return out;
}

KvMemoryRow kv_memory(std::size_t batch, std::size_t context, const ModelDims& m, const HardwareSpec& hw) {
    m.validate();
    hw.validate();
    KvMemoryRow r;
    r.batch = batch;
    r.context = context;
    r.kv_bytes = 2.0 * static_cast<double>(batch) * static_cast<double>(context) * static_cast<double>(m.layers) *
                 static_cast<double>(m.kv_dim) * m.bytes_kv;
    r.weight_bytes = m.weight_bytes();
    r.ratio = r.kv_bytes / r.weight_bytes;
    const double total = r.kv_bytes + r.weight_bytes;
    r.devices_needed = static_cast<std::size_t>(std::ceil(total / hw.vram_bytes));
    r.fits_one_device = total <= hw.vram_bytes;
    r.fits = r.devices_needed <= hw.devices;
    return r;
}

std::vector<KvMemoryRow> kv_memory_sweep(const std::vector<std::size_t>& batches, const std::vector<std::size_t>& contexts,
                                         const ModelDims& m, const HardwareSpec& hw) {
    std::vector<KvMemoryRow> rows;
    for (std::size_t b : batches) {
        for (std::size_t s : contexts) rows.push_back(kv_memory(b, s, m, hw));
    }
    return rows;
}

std::string kv_memory_csv(const std::vector<KvMemoryRow>& rows) {
    std::string out = "B,S_L,kv_bytes,weight_bytes,ratio,devices_needed,fits_one_device,fits\n";
    for (const auto& r : rows) {
        out += std::to_string(r.batch) + "," + std::to_string(r.context) + "," + fmt(r.kv_bytes) + "," +
               fmt(r.weight_bytes) + "," + fmt(r.ratio) + "," + std::to_string(r.devices_needed) + "," +
               (r.fits_one_device ? "true" : "false") + "," + (r.fits ? "true" : "false") + "\n";
    }
    return out;
}

double expected_tokens(double alpha, std::size_t gamma) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorCode::kConfig, "acceptance rate must be in [0, 1]");
    if (gamma == 0) fail(ErrorCode::kConfig, "gamma must be >= 1");
    if (alpha == 1.0) return static_cast<double>(gamma + 1);
    return (1.0 - std::pow(alpha, static_cast<double>(gamma + 1))) / (1.0 - alpha);
}

double speedup_model(double alpha, std::size_t gamma, double t_ar, double t_draft, double t_verify) {
    const double e = expected_tokens(alpha, gamma);
    const double cycle = static_cast<double>(gamma) * t_draft + t_verify;
    if (!(cycle > 0) || !(t_ar > 0)) fail(ErrorCode::kConfig, "speedup_model: costs must be positive");
    return e * t_ar / cycle;
}

SpecCosts spec_costs(const ModelDims& m, const HardwareSpec& hw, std::size_t batch, std::size_t context, std::size_t gamma,
                     bool kv_quant, bool weight_quant) {
    WorkloadPoint w;
    w.batch = batch;
    w.context = context;

    SpecCosts c;
    c.t_ar = classify(count_decode(w, m).aggregate, hw).latency;

    ModelDims draft = m;
    if (kv_quant) draft.bytes_kv = m.bytes_kv / 4.0;
    if (weight_quant) draft.bytes_weight = m.bytes_weight / 4.0;
    c.t_draft = classify(count_decode(w, draft).aggregate, hw).latency;

    ModelDims verify = m;
    if (kv_quant) verify.bytes_kv = m.bytes_kv / 2.0;
    WorkloadPoint wv = w;
    wv.tokens_per_pass = gamma + 1;
    c.t_verify = classify(count_decode(wv, verify).aggregate, hw).latency;
    return c;
}

} // namespace selfspec::roofline
