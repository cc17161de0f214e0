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

#include "selfspec/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "binary_io.hpp"
#include "selfspec/error.hpp"
#include "selfspec/quant.hpp"

namespace selfspec {

namespace {

constexpr char kWeightMagic[4] = {'Q', 'S', 'P', 'W'};
constexpr std::uint8_t kWeightVersion = 1;

Tensor gaussian(std::vector<std::size_t> shape, float stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, stddev);
    for (float& v : t.data) v = dist(rng);
    return t;
}

Tensor ones(std::size_t n) {
    return Tensor({n}, std::vector<float>(n, 1.0f));
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    return static_cast<std::uint32_t>(crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::size_t> expected_shape(const std::string& name, const ModelConfig& c) {
    const std::size_t d = c.hidden();
    if (name == "embedding") return {c.vocab, d};
    if (name == "final_norm") return {d};
    if (name == "lm_head") return {d, c.vocab};
    const auto dot = name.rfind('.');
    const std::string leaf = name.substr(dot + 1);
    if (leaf == "attn_norm" || leaf == "mlp_norm") return {d};
    if (leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "wo") return {d, d};
    if (leaf == "w_gate" || leaf == "w_up") return {d, c.mlp_hidden};
    if (leaf == "w_down") return {c.mlp_hidden, d};
    return {};
}

struct ForwardScratch {
    std::vector<float> h, q, k, v, attn, o, gate, up, act, down, logits;
};

} // namespace

void ModelConfig::validate() const {
    if (num_layers == 0 || num_heads == 0 || head_dim == 0 || mlp_hidden == 0 || max_positions == 0) {
        fail(ErrorCode::kConfig, "model config dimensions must be positive");
    }
    if (head_dim % 2 != 0) fail(ErrorCode::kConfig, "head_dim must be even for rotary embedding");
    if (vocab < 2) fail(ErrorCode::kConfig, "vocab must be >= 2");
}

ModelWeights ModelWeights::random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.hidden();
    const float sd_d = 1.0f / std::sqrt(static_cast<float>(d));
    const float sd_m = 1.0f / std::sqrt(static_cast<float>(config.mlp_hidden));

    ModelWeights w;
    w.config = config;
    w.embedding = gaussian({config.vocab, d}, 1.0f, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = ones(d);
        lw.wq = gaussian({d, d}, sd_d, rng);
        lw.wk = gaussian({d, d}, sd_d, rng);
        lw.wv = gaussian({d, d}, sd_d, rng);
        lw.wo = gaussian({d, d}, sd_d, rng);
        lw.mlp_norm = ones(d);
        lw.w_gate = gaussian({d, config.mlp_hidden}, sd_d, rng);
        lw.w_up = gaussian({d, config.mlp_hidden}, sd_d, rng);
        lw.w_down = gaussian({config.mlp_hidden, d}, sd_m, rng);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = ones(d);
    w.lm_head = gaussian({d, config.vocab}, sd_d, rng);
    return w;
}

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const auto& lw = layers[l];
        out.emplace_back(p + "attn_norm", &lw.attn_norm);
        out.emplace_back(p + "wq", &lw.wq);
        out.emplace_back(p + "wk", &lw.wk);
        out.emplace_back(p + "wv", &lw.wv);
        out.emplace_back(p + "wo", &lw.wo);
        out.emplace_back(p + "mlp_norm", &lw.mlp_norm);
        out.emplace_back(p + "w_gate", &lw.w_gate);
        out.emplace_back(p + "w_up", &lw.w_up);
        out.emplace_back(p + "w_down", &lw.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("lm_head", &lm_head);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

std::size_t ModelWeights::linear_elements() const {
    std::size_t n = lm_head.numel();
    for (const auto& lw : layers) {
        n += lw.wq.numel() + lw.wk.numel() + lw.wv.numel() + lw.wo.numel();
        n += lw.w_gate.numel() + lw.w_up.numel() + lw.w_down.numel();
    }
    return n;
}

std::vector<std::uint8_t> serialize_weights(const ModelWeights& weights) {
    const auto& c = weights.config;
    io::ByteWriter head;
    head.str(std::string_view(kWeightMagic, 4));
    head.u8(kWeightVersion);
    for (std::size_t v : {c.num_layers, c.num_heads, c.head_dim, c.mlp_hidden, c.vocab, c.max_positions}) {
        head.u32(static_cast<std::uint32_t>(v));
    }

    io::ByteWriter body;
    const auto tensors = weights.named_tensors();
    body.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        body.u32(static_cast<std::uint32_t>(name.size()));
        body.str(name);
        body.u32(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t dim : t->shape) body.u32(static_cast<std::uint32_t>(dim));
        body.f32s(t->data);
    }

    auto out = std::move(head.buffer());
    out.insert(out.end(), body.buffer().begin(), body.buffer().end());
    io::ByteWriter crc;
    crc.u32(crc32_of(body.buffer()));
    out.insert(out.end(), crc.buffer().begin(), crc.buffer().end());
    return out;
}

ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "weight file");
    if (r.str(4) != std::string_view(kWeightMagic, 4)) fail(ErrorCode::kFormat, "weight file: bad magic");
    if (r.u8() != kWeightVersion) fail(ErrorCode::kFormat, "weight file: unsupported version");
    ModelConfig c;
    c.num_layers = r.u32();
    c.num_heads = r.u32();
    c.head_dim = r.u32();
    c.mlp_hidden = r.u32();
    c.vocab = r.u32();
    c.max_positions = r.u32();
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorCode::kFormat, std::string("weight file: ") + e.what());
    }

    const std::size_t body_begin = r.position();
    if (r.remaining() < 4) fail(ErrorCode::kFormat, "weight file: truncated input");
    const auto body = bytes.subspan(body_begin, bytes.size() - body_begin - 4);
    io::ByteReader crc_reader(bytes.subspan(bytes.size() - 4), "weight file");
    if (crc_reader.u32() != crc32_of(body)) fail(ErrorCode::kFormat, "weight file: CRC mismatch");

    ModelWeights w;
    w.config = c;
    w.layers.resize(c.num_layers);
    auto slots = w.named_tensors();

    io::ByteReader br(body, "weight file");
    const std::uint32_t count = br.u32();
    if (count != slots.size()) fail(ErrorCode::kFormat, "weight file: unexpected tensor count");
    for (auto& [expected_name, slot] : slots) {
        const std::string name = br.str(br.u32());
        if (name != expected_name) fail(ErrorCode::kFormat, "weight file: expected tensor " + expected_name + ", got " + name);
        const std::uint32_t rank = br.u32();
        if (rank > 4) fail(ErrorCode::kFormat, "weight file: bad rank for " + name);
        std::vector<std::size_t> shape(rank);
        for (auto& dim : shape) dim = br.u32();
        if (shape != expected_shape(name, c)) fail(ErrorCode::kFormat, "weight file: shape mismatch for " + name);
        Tensor t(shape);
        br.f32s(t.data);
        *slot = std::move(t);
    }
    if (br.remaining() != 0) fail(ErrorCode::kFormat, "weight file: trailing bytes in body");
    return w;
}

void save_weights(const std::filesystem::path& path, const ModelWeights& weights) {
    io::write_file(path, serialize_weights(weights));
}

ModelWeights load_weights(const std::filesystem::path& path) {
    return deserialize_weights(io::read_file(path));
}

ModelWeights int4_weights(const ModelWeights& weights, std::size_t group_size) {
    ModelWeights out = weights;
    auto requant = [group_size](Tensor& t) { t = quantize_weights(t, group_size).dequantize(); };
    for (auto& lw : out.layers) {
        for (Tensor* t : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_gate, &lw.w_up, &lw.w_down}) requant(*t);
    }
    requant(out.lm_head);
    return out;
}

KVChunk KVChunk::whole(const Tensor& keys, const Tensor& values) {
    const std::size_t n = keys.numel() == 0 ? 0 : keys.rows();
    return KVChunk{keys.data, values.data, n, n == 0 ? 0 : keys.cols(), 0};
}

std::vector<float> chunked_attention(std::span<const float> q, std::span<const KVChunk> chunks, float scale) {
    if (chunks.empty()) fail(ErrorCode::kContract, "chunked_attention: no chunks");
    const std::size_t hd = q.size();
    float run_max = -std::numeric_limits<float>::infinity();
    float run_den = 0.0f;
    std::vector<float> run_num(hd, 0.0f);
    std::vector<float> scores;
    std::vector<float> num(hd);
    bool any = false;

    for (const auto& c : chunks) {
        if (c.tokens == 0) continue;
        if (c.offset + hd > c.stride) fail(ErrorCode::kDimension, "chunked_attention: head slice outside chunk row");
        scores.resize(c.tokens);
        float cmax = -std::numeric_limits<float>::infinity();
        for (std::size_t t = 0; t < c.tokens; ++t) {
            const float* k = c.keys.data() + t * c.stride + c.offset;
            float s = 0.0f;
            for (std::size_t i = 0; i < hd; ++i) s += q[i] * k[i];
            scores[t] = s * scale;
            cmax = std::max(cmax, scores[t]);
        }
        float den = 0.0f;
        std::fill(num.begin(), num.end(), 0.0f);
        for (std::size_t t = 0; t < c.tokens; ++t) {
            const float p = std::exp(scores[t] - cmax);
            den += p;
            const float* v = c.values.data() + t * c.stride + c.offset;
            for (std::size_t i = 0; i < hd; ++i) num[i] += p * v[i];
        }
        if (!any) {
            run_max = cmax;
            run_den = den;
            run_num = num;
            any = true;
            continue;
        }
        const float m = std::max(run_max, cmax);
        const float a = std::exp(run_max - m);
        const float b = std::exp(cmax - m);
        run_den = run_den * a + den * b;
        for (std::size_t i = 0; i < hd; ++i) run_num[i] = run_num[i] * a + num[i] * b;
        run_max = m;
    }
    if (!any) fail(ErrorCode::kContract, "chunked_attention: all chunks are empty");
    const float inv = 1.0f / run_den;
    for (float& v : run_num) v *= inv;
    return run_num;
}

StepStats& StepStats::operator+=(const StepStats& o) {
    linear_flops += o.linear_flops;
    attention_flops += o.attention_flops;
    weight_bytes += o.weight_bytes;
    kv += o.kv;
    return *this;
}

Model::Model(ModelWeights weights, std::size_t int4_group_size)
    : fp_(std::move(weights)), int4_group_size_(int4_group_size) {
    fp_.config.validate();
    int4_ = int4_weights(fp_, int4_group_size_);
    for (const auto& lw : fp_.layers) {
        for (const Tensor* t : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_gate, &lw.w_up, &lw.w_down}) {
            const auto q = quantize_weights(*t, int4_group_size_);
            int4_weight_bytes_ += static_cast<double>(q.code_bytes() + q.param_bytes());
        }
    }
    const auto q = quantize_weights(fp_.lm_head, int4_group_size_);
    int4_weight_bytes_ += static_cast<double>(q.code_bytes() + q.param_bytes());
}

double Model::weight_bytes(WeightMode mode) const noexcept {
    if (mode == WeightMode::kInt4) return int4_weight_bytes_;
    return static_cast<double>(fp_.linear_elements() * sizeof(float));
}

CacheLayout Model::cache_layout(const CacheOptions& options) const {
    CacheLayout layout;
    layout.num_layers = config().num_layers;
    layout.num_heads = config().num_heads;
    layout.head_dim = config().head_dim;
    layout.group_size = options.group_size;
    layout.sensitive_layers = options.sensitive_layers;
    layout.quantize = options.mode == CacheMode::kHierarchical;
    layout.validate();
    return layout;
}

void Model::check_token(TokenId token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= config().vocab) {
        fail(ErrorCode::kData, "token id " + std::to_string(token) + " outside vocab of " + std::to_string(config().vocab));
    }
}

Model::PrefillResult Model::prefill(std::span<const TokenId> tokens, const CacheOptions& options) const {
    const auto& c = config();
    if (tokens.empty()) fail(ErrorCode::kEmptyPrompt, "prefill: empty prompt");
    if (tokens.size() > c.max_positions) fail(ErrorCode::kData, "prefill: prompt longer than max_positions");
    for (TokenId t : tokens) check_token(t);

    const std::size_t n = tokens.size();
    const std::size_t d = c.hidden();
    const std::size_t hd = c.head_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const auto& w = fp_;

    Tensor x({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        auto e = w.embedding.row(static_cast<std::size_t>(tokens[i]));
        std::copy(e.begin(), e.end(), x.row(i).begin());
    }

    std::vector<Tensor> keys, values;
    for (const auto& lw : w.layers) {
        const Tensor h = rmsnorm(x, lw.attn_norm);
        Tensor q = matmul(h, lw.wq);
        Tensor k = matmul(h, lw.wk);
        Tensor v = matmul(h, lw.wv);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t hh = 0; hh < c.num_heads; ++hh) {
                rope_inplace(q.row(i).subspan(hh * hd, hd), i);
                rope_inplace(k.row(i).subspan(hh * hd, hd), i);
            }
        }
        Tensor attn({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t hh = 0; hh < c.num_heads; ++hh) {
                const KVChunk chunk{k.data, v.data, i + 1, d, hh * hd};
                const auto o = chunked_attention(q.row(i).subspan(hh * hd, hd), std::span(&chunk, 1), scale);
                std::copy(o.begin(), o.end(), attn.row(i).begin() + static_cast<std::ptrdiff_t>(hh * hd));
            }
        }
        const Tensor proj = matmul(attn, lw.wo);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += proj.data[i];

        const Tensor h2 = rmsnorm(x, lw.mlp_norm);
        Tensor gate = matmul(h2, lw.w_gate);
        const Tensor up = matmul(h2, lw.w_up);
        for (std::size_t i = 0; i < gate.numel(); ++i) gate.data[i] = silu(gate.data[i]) * up.data[i];
        const Tensor down = matmul(gate, lw.w_down);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += down.data[i];

        keys.push_back(std::move(k));
        values.push_back(std::move(v));
    }

    std::vector<float> last(d);
    rmsnorm(x.row(n - 1), w.final_norm.data, kRmsNormEps, last);
    std::vector<float> logits(c.vocab);
    matvec(last, w.lm_head, logits);

    return PrefillResult{std::move(logits), HierarchicalKVCache::prefill_quantize(cache_layout(options), keys, values)};
}

std::vector<float> Model::decode_step(TokenId token, HierarchicalKVCache& cache, ViewKind view, WeightMode weight_mode,
                                      StepStats* stats) const {
    check_token(token);
    const auto& c = config();
    const auto& lay = cache.layout();
    if (lay.num_layers != c.num_layers || lay.num_heads != c.num_heads || lay.head_dim != c.head_dim) {
        fail(ErrorCode::kDimension, "decode_step: cache layout does not match model");
    }
    const std::size_t pos = cache.length();
    if (pos >= c.max_positions) fail(ErrorCode::kData, "decode_step: position beyond max_positions");
    if (cache.append_capacity() == 0) {
        fail(ErrorCode::kBufferOverflow, "decode_step: C_F2 is full; flush before appending");
    }

    const auto& w = weights(weight_mode);
    const std::size_t d = c.hidden();
    const std::size_t hd = c.head_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    std::vector<float> x(w.embedding.row(static_cast<std::size_t>(token)).begin(),
                         w.embedding.row(static_cast<std::size_t>(token)).end());
    ForwardScratch s;
    s.h.resize(d);
    s.q.resize(d);
    s.k.resize(d);
    s.v.resize(d);
    s.attn.resize(d);
    s.o.resize(d);
    s.gate.resize(c.mlp_hidden);
    s.up.resize(c.mlp_hidden);
    s.down.resize(d);

    StepStats local;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const auto& lw = w.layers[l];
        rmsnorm(x, lw.attn_norm.data, kRmsNormEps, s.h);
        matvec(s.h, lw.wq, s.q);
        matvec(s.h, lw.wk, s.k);
        matvec(s.h, lw.wv, s.v);
        for (std::size_t hh = 0; hh < c.num_heads; ++hh) {
            rope_inplace(std::span(s.q).subspan(hh * hd, hd), pos);
            rope_inplace(std::span(s.k).subspan(hh * hd, hd), pos);
        }
        cache.append_decode_token(l, s.k, s.v);

        const CacheView cv = cache.view(l, view);
        std::vector<KVChunk> chunks;
        chunks.reserve(cv.segments.size());
        for (const auto& seg : cv.segments) chunks.push_back(KVChunk::whole(seg.keys, seg.values));
        for (std::size_t hh = 0; hh < c.num_heads; ++hh) {
            for (auto& ch : chunks) ch.offset = hh * hd;
            const auto o = chunked_attention(std::span(s.q).subspan(hh * hd, hd), chunks, scale);
            std::copy(o.begin(), o.end(), s.attn.begin() + static_cast<std::ptrdiff_t>(hh * hd));
        }
        matvec(s.attn, lw.wo, s.o);
        for (std::size_t i = 0; i < d; ++i) x[i] += s.o[i];

        rmsnorm(x, lw.mlp_norm.data, kRmsNormEps, s.h);
        matvec(s.h, lw.w_gate, s.gate);
        matvec(s.h, lw.w_up, s.up);
        for (std::size_t i = 0; i < c.mlp_hidden; ++i) s.gate[i] = silu(s.gate[i]) * s.up[i];
        matvec(s.gate, lw.w_down, s.down);
        for (std::size_t i = 0; i < d; ++i) x[i] += s.down[i];

        local.kv += cv.stats;
        local.attention_flops += 4.0 * static_cast<double>(cv.length) * static_cast<double>(d);
    }

    rmsnorm(x, w.final_norm.data, kRmsNormEps, s.h);
    std::vector<float> logits(c.vocab);
    matvec(s.h, w.lm_head, logits);

    if (stats != nullptr) {
        local.linear_flops = 2.0 * static_cast<double>(w.linear_elements());
        local.weight_bytes = weight_bytes(weight_mode);
        *stats += local;
    }
    return logits;
}

} // namespace selfspec
