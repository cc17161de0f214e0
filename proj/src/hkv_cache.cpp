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

#include "selfspec/hkv_cache.hpp"

#include <algorithm>
#include <string>

#include "binary_io.hpp"
#include "selfspec/error.hpp"

namespace selfspec {

namespace {

constexpr char kCacheMagic[4] = {'Q', 'S', 'K', 'V'};
constexpr std::uint8_t kCacheVersion = 1;
constexpr std::size_t kParamPairBytes = 2 * sizeof(float);

Tensor transpose(const Tensor& x) {
    Tensor out({x.cols(), x.rows()});
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
    }
    return out;
}

Tensor rows_of(std::span<const float> flat, std::size_t first, std::size_t count, std::size_t width) {
    auto s = flat.subspan(first * width, count * width);
    return Tensor({count, width}, std::vector<float>(s.begin(), s.end()));
}

void write_plane(io::ByteWriter& w, const QuantPlane& p) {
    w.u32(static_cast<std::uint32_t>(p.rows()));
    w.u32(static_cast<std::uint32_t>(p.row_len()));
    w.u32(static_cast<std::uint32_t>(p.group_size()));
    w.u8(static_cast<std::uint8_t>(p.mode()));
    w.u8(static_cast<std::uint8_t>(p.axis()));
    w.bytes(p.packed());
    for (const auto& prm : p.all_params()) {
        w.f32(prm.scale);
        w.f32(prm.zero_point);
    }
}

QuantPlane read_plane(io::ByteReader& r) {
    const std::size_t rows = r.u32();
    const std::size_t row_len = r.u32();
    const std::size_t group = r.u32();
    const auto mode = r.u8();
    const auto axis = r.u8();
    if (group == 0 || mode > 1 || axis > 1) fail(ErrorCode::kFormat, "cache snapshot: bad plane header");
    QuantPlane p(rows, row_len, group, static_cast<QuantMode>(mode), static_cast<QuantAxis>(axis));
    auto packed = r.take(p.code_bytes());
    std::copy(packed.begin(), packed.end(), p.packed().begin());
    for (std::size_t g = 0; g < p.num_groups(); ++g) {
        p.params(g).scale = r.f32();
        p.params(g).zero_point = r.f32();
        p.params(g).mode = static_cast<QuantMode>(mode);
    }
    return p;
}

} // namespace

LoadStats& LoadStats::operator+=(const LoadStats& o) {
    code_bytes += o.code_bytes;
    param_bytes += o.param_bytes;
    fp_bytes += o.fp_bytes;
    fp16_reference_bytes += o.fp16_reference_bytes;
    quantized_elements += o.quantized_elements;
    fp_elements += o.fp_elements;
    return *this;
}

void CacheLayout::validate() const {
    if (num_layers == 0 || num_heads == 0 || head_dim == 0) {
        fail(ErrorCode::kConfig, "cache layout needs nonzero layers, heads and head_dim");
    }
    if (group_size == 0) fail(ErrorCode::kConfig, "cache group size must be >= 1");
    for (std::size_t l : sensitive_layers) {
        if (l >= num_layers) fail(ErrorCode::kConfig, "sensitive layer " + std::to_string(l) + " out of range");
    }
}

QuantizedBlock encode_block(const Tensor& keys, const Tensor& values, std::size_t group_size) {
    if (keys.shape != values.shape || keys.rows() != group_size) {
        fail(ErrorCode::kCacheIntegrity, "encode_block expects matching [G x kv_dim] keys and values");
    }
    return QuantizedBlock{hierarchical_encode_plane(transpose(keys), group_size, QuantAxis::kChannel),
                          hierarchical_encode_plane(values, group_size, QuantAxis::kToken)};
}

KVSegment decode_block(const QuantizedBlock& block, ViewKind kind) {
    if (kind == ViewKind::kFull) fail(ErrorCode::kContract, "full-precision view requested over quantized tokens");
    KVSegment seg;
    seg.quantized = true;
    if (kind == ViewKind::kDraft) {
        seg.keys = transpose(dequant_draft(block.keys.upper));
        seg.values = dequant_draft(block.values.upper);
    } else {
        seg.keys = transpose(dequant_target(block.keys.upper, block.keys.lower));
        seg.values = dequant_target(block.values.upper, block.values.lower);
    }
    return seg;
}

HierarchicalKVCache::HierarchicalKVCache(CacheLayout layout) : layout_(std::move(layout)) {
    layout_.validate();
    layers_.resize(layout_.num_layers);
}

HierarchicalKVCache HierarchicalKVCache::prefill_quantize(CacheLayout layout, std::span<const Tensor> keys,
                                                          std::span<const Tensor> values) {
    HierarchicalKVCache cache(std::move(layout));
    const auto& lay = cache.layout_;
    if (keys.size() != lay.num_layers || values.size() != lay.num_layers) {
        fail(ErrorCode::kDimension, "prefill_quantize expects one K and one V tensor per layer");
    }
    const std::size_t d = lay.kv_dim();
    const std::size_t prompt = keys[0].numel() / d;
    if (prompt == 0) fail(ErrorCode::kEmptyPrompt, "prefill_quantize: empty prompt");

    const std::size_t g = lay.group_size;
    const std::size_t n_quant = prompt >= g ? ((prompt - g) / g) * g : 0;

    for (std::size_t l = 0; l < lay.num_layers; ++l) {
        if (keys[l].shape != std::vector<std::size_t>{prompt, d} || values[l].shape != keys[l].shape) {
            fail(ErrorCode::kDimension, "prefill_quantize: layer " + std::to_string(l) + " K/V shape mismatch");
        }
        auto& st = cache.layers_[l];
        for (std::size_t t = 0; t < n_quant; t += g) {
            if (lay.layer_quantized(l)) {
                st.blocks.push_back(encode_block(rows_of(keys[l].data, t, g, d), rows_of(values[l].data, t, g, d), g));
            } else {
                st.archive_k.insert(st.archive_k.end(), keys[l].data.begin() + t * d, keys[l].data.begin() + (t + g) * d);
                st.archive_v.insert(st.archive_v.end(), values[l].data.begin() + t * d,
                                    values[l].data.begin() + (t + g) * d);
            }
        }
        st.fp_k.assign(keys[l].data.begin() + n_quant * d, keys[l].data.end());
        st.fp_v.assign(values[l].data.begin() + n_quant * d, values[l].data.end());
        st.fp_count = prompt - n_quant;
    }
    cache.flushed_ = n_quant;
    cache.floor_ = std::min(g, prompt - n_quant);
    return cache;
}

std::size_t HierarchicalKVCache::length() const noexcept {
    std::size_t fp = layers_.front().fp_count;
    for (const auto& st : layers_) fp = std::min(fp, st.fp_count);
    return flushed_ + fp;
}

std::size_t HierarchicalKVCache::fp_count() const noexcept {
    return length() - flushed_;
}

std::size_t HierarchicalKVCache::f1_count() const noexcept {
    return std::min(fp_count(), layout_.group_size);
}

std::size_t HierarchicalKVCache::f2_count() const noexcept {
    return fp_count() - f1_count();
}

void HierarchicalKVCache::require_uniform(const char* op) const {
    for (const auto& st : layers_) {
        if (st.fp_count != layers_.front().fp_count) {
            fail(ErrorCode::kCacheIntegrity, std::string(op) + ": layers hold different token counts (partial layer sweep)");
        }
    }
}

void HierarchicalKVCache::append_decode_token(std::size_t layer, std::span<const float> k, std::span<const float> v) {
    if (layer >= layers_.size()) fail(ErrorCode::kContract, "append_decode_token: layer out of range");
    const std::size_t d = layout_.kv_dim();
    if (k.size() != d || v.size() != d) fail(ErrorCode::kDimension, "append_decode_token: K/V width != kv_dim");
    auto& st = layers_[layer];
    if (st.fp_count >= layout_.fp_capacity()) {
        fail(ErrorCode::kBufferOverflow, "append_decode_token: C_F2 is full in layer " + std::to_string(layer));
    }
    st.fp_k.insert(st.fp_k.end(), k.begin(), k.end());
    st.fp_v.insert(st.fp_v.end(), v.begin(), v.end());
    ++st.fp_count;
}

void HierarchicalKVCache::rollback(std::size_t n_reject) {
    if (n_reject == 0) return;
    require_uniform("rollback");
    const std::size_t fp = fp_count();
    if (n_reject > fp || fp - n_reject < floor_) {
        fail(ErrorCode::kCacheIntegrity, "rollback of " + std::to_string(n_reject) + " tokens exceeds the " +
                                             std::to_string(fp - std::min(fp, floor_)) + " rejectable tokens in C_F2");
    }
    const std::size_t d = layout_.kv_dim();
    for (auto& st : layers_) {
        st.fp_count -= n_reject;
        st.fp_k.resize(st.fp_count * d);
        st.fp_v.resize(st.fp_count * d);
    }
}

void HierarchicalKVCache::flush_layer(std::size_t layer) {
    auto& st = layers_[layer];
    const std::size_t g = layout_.group_size;
    const std::size_t d = layout_.kv_dim();
    if (layout_.layer_quantized(layer)) {
        st.blocks.push_back(encode_block(rows_of(st.fp_k, 0, g, d), rows_of(st.fp_v, 0, g, d), g));
    } else {
        st.archive_k.insert(st.archive_k.end(), st.fp_k.begin(), st.fp_k.begin() + g * d);
        st.archive_v.insert(st.archive_v.end(), st.fp_v.begin(), st.fp_v.begin() + g * d);
    }
    st.fp_k.erase(st.fp_k.begin(), st.fp_k.begin() + g * d);
    st.fp_v.erase(st.fp_v.begin(), st.fp_v.begin() + g * d);
    st.fp_count -= g;
}

bool HierarchicalKVCache::flush_if_full() {
    require_uniform("flush_if_full");
    if (!f2_full()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) flush_layer(l);
    flushed_ += layout_.group_size;
    floor_ = layout_.group_size;
    return true;
}

CacheView HierarchicalKVCache::view(std::size_t layer, ViewKind kind) const {
    if (layer >= layers_.size()) fail(ErrorCode::kContract, "view: layer out of range");
    const auto& st = layers_[layer];
    const std::size_t d = layout_.kv_dim();
    CacheView out;

    for (const auto& block : st.blocks) {
        out.segments.push_back(decode_block(block, kind));
        const auto& k = block.keys;
        const auto& v = block.values;
        const std::size_t elems = k.upper.numel() + v.upper.numel();
        out.stats.quantized_elements += elems;
        out.stats.code_bytes += static_cast<double>(k.upper.code_bytes() + v.upper.code_bytes());
        if (kind == ViewKind::kTarget) {
            out.stats.code_bytes += static_cast<double>(k.lower.code_bytes() + v.lower.code_bytes());
        }
        out.stats.param_bytes += static_cast<double>((k.upper.num_groups() + v.upper.num_groups()) * kParamPairBytes);
        out.stats.fp16_reference_bytes += 2.0 * static_cast<double>(elems);
    }

    auto push_fp = [&](std::span<const float> ks, std::span<const float> vs, std::size_t first, std::size_t count) {
        if (count == 0) return;
        out.segments.push_back(KVSegment{rows_of(ks, first, count, d), rows_of(vs, first, count, d), false});
        out.stats.fp_elements += 2 * count * d;
        out.stats.fp_bytes += static_cast<double>(2 * count * d * sizeof(float));
    };
    push_fp(st.archive_k, st.archive_v, 0, st.archive_k.size() / d);
    const std::size_t f1 = std::min(st.fp_count, layout_.group_size);
    push_fp(st.fp_k, st.fp_v, 0, f1);
    push_fp(st.fp_k, st.fp_v, f1, st.fp_count - f1);

    out.length = flushed_ + st.fp_count;
    return out;
}

LoadStats HierarchicalKVCache::load_stats(ViewKind kind) const {
    LoadStats total;
    for (std::size_t l = 0; l < layers_.size(); ++l) total += view(l, kind).stats;
    return total;
}

MemoryReport HierarchicalKVCache::memory_report() const {
    MemoryReport r;
    const std::size_t d = layout_.kv_dim();
    std::size_t quant_elems = 0;
    std::size_t groups = 0;
    for (const auto& st : layers_) {
        for (const auto& b : st.blocks) {
            r.upper_bytes += b.keys.upper.code_bytes() + b.values.upper.code_bytes();
            r.lower_bytes += b.keys.lower.code_bytes() + b.values.lower.code_bytes();
            groups += b.keys.upper.num_groups() + b.values.upper.num_groups();
            quant_elems += b.keys.upper.numel() + b.values.upper.numel();
        }
        r.fp_archive_bytes += (st.archive_k.size() + st.archive_v.size()) * sizeof(float);
    }
    r.param_bytes = groups * kParamPairBytes;
    r.fp_buffer_bytes = layout_.num_layers * layout_.fp_capacity() * d * 2 * sizeof(float);
    // INT8 copy (1 B/elem) + INT4 copy (0.5 B/elem), each with its own params.
    r.separate_copies_bytes = quant_elems + (quant_elems + 1) / 2 + 2 * r.param_bytes + r.fp_buffer_bytes +
                              r.fp_archive_bytes;
    r.fp16_reference_bytes = 2 * flushed_ * d * 2 * layout_.num_layers;
    return r;
}

std::vector<std::uint8_t> HierarchicalKVCache::serialize() const {
    require_uniform("serialize");
    io::ByteWriter w;
    w.str(std::string_view(kCacheMagic, 4));
    w.u8(kCacheVersion);
    w.u32(static_cast<std::uint32_t>(layout_.num_layers));
    w.u32(static_cast<std::uint32_t>(layout_.num_heads));
    w.u32(static_cast<std::uint32_t>(layout_.head_dim));
    w.u32(static_cast<std::uint32_t>(layout_.group_size));
    w.u8(layout_.quantize ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(layout_.sensitive_layers.size()));
    for (std::size_t l : layout_.sensitive_layers) w.u32(static_cast<std::uint32_t>(l));
    w.u64(flushed_);
    w.u32(static_cast<std::uint32_t>(floor_));
    for (const auto& st : layers_) {
        w.u32(static_cast<std::uint32_t>(st.fp_count));
        w.u32(static_cast<std::uint32_t>(st.blocks.size()));
        for (const auto& b : st.blocks) {
            write_plane(w, b.keys.upper);
            write_plane(w, b.keys.lower);
            write_plane(w, b.values.upper);
            write_plane(w, b.values.lower);
        }
        w.u64(st.archive_k.size());
        w.f32s(st.archive_k);
        w.f32s(st.archive_v);
        w.f32s(st.fp_k);
        w.f32s(st.fp_v);
    }
    return std::move(w.buffer());
}

HierarchicalKVCache HierarchicalKVCache::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "cache snapshot");
    if (r.str(4) != std::string_view(kCacheMagic, 4)) fail(ErrorCode::kFormat, "cache snapshot: bad magic");
    if (r.u8() != kCacheVersion) fail(ErrorCode::kFormat, "cache snapshot: unsupported version");
    CacheLayout layout;
    layout.num_layers = r.u32();
    layout.num_heads = r.u32();
    layout.head_dim = r.u32();
    layout.group_size = r.u32();
    layout.quantize = r.u8() != 0;
    const std::uint32_t n_sensitive = r.u32();
    for (std::uint32_t i = 0; i < n_sensitive; ++i) layout.sensitive_layers.insert(r.u32());
    try {
        layout.validate();
    } catch (const Error& e) {
        fail(ErrorCode::kFormat, std::string("cache snapshot: ") + e.what());
    }

    HierarchicalKVCache cache(layout);
    cache.flushed_ = r.u64();
    cache.floor_ = r.u32();
    const std::size_t d = layout.kv_dim();
    for (auto& st : cache.layers_) {
        st.fp_count = r.u32();
        if (st.fp_count > layout.fp_capacity()) fail(ErrorCode::kFormat, "cache snapshot: FP buffer over capacity");
        const std::uint32_t n_blocks = r.u32();
        for (std::uint32_t b = 0; b < n_blocks; ++b) {
            QuantizedBlock blk;
            blk.keys.upper = read_plane(r);
            blk.keys.lower = read_plane(r);
            blk.values.upper = read_plane(r);
            blk.values.lower = read_plane(r);
            st.blocks.push_back(std::move(blk));
        }
        const std::uint64_t archive = r.u64();
        if (archive > r.remaining() / 8) fail(ErrorCode::kFormat, "cache snapshot: truncated archive");
        st.archive_k.resize(archive);
        st.archive_v.resize(archive);
        r.f32s(st.archive_k);
        r.f32s(st.archive_v);
        st.fp_k.resize(st.fp_count * d);
        st.fp_v.resize(st.fp_count * d);
        r.f32s(st.fp_k);
        r.f32s(st.fp_v);
    }
    if (r.remaining() != 0) fail(ErrorCode::kFormat, "cache snapshot: trailing bytes");
    return cache;
}

void HierarchicalKVCache::dump(const std::filesystem::path& path) const {
    io::write_file(path, serialize());
}

HierarchicalKVCache HierarchicalKVCache::load(const std::filesystem::path& path) {
    return deserialize(io::read_file(path));
}

} // namespace selfspec
