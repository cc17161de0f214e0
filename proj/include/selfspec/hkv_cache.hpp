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

// Hierarchical KV cache with a double full-precision buffer.
//
// Per layer the token sequence is
//
//   [ quantized blocks of G tokens ... | C_F1 (G tokens) | C_F2 (0..G tokens) ]
//
// The full-precision buffer is stored as one run of fp_count <= 2G tokens:
// C_F1 is its first min(fp_count, G) tokens and C_F2 the rest. New tokens go
// to the end of C_F2, rejected drafts are popped from the end of C_F2, and
// once C_F2 holds G tokens a flush encodes C_F1 into a new block and slides
// C_F2 down into C_F1.
//
// Key blocks are grouped along the channel axis (one group = one channel
// across the G tokens of a block); value blocks along the token axis (one
// group = G consecutive channels of one token).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <vector>

#include "selfspec/quant.hpp"
#include "selfspec/tensor.hpp"

namespace selfspec {

struct CacheLayout {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;
    std::size_t group_size = 128;
    // Layers whose KV is never quantized.
    std::set<std::size_t> sensitive_layers;
    // When false every layer behaves as a sensitive layer (plain FP cache).
    bool quantize = true;

    std::size_t kv_dim() const noexcept { return num_heads * head_dim; }
    std::size_t fp_capacity() const noexcept { return 2 * group_size; }
    bool layer_quantized(std::size_t layer) const noexcept {
        return quantize && !sensitive_layers.contains(layer);
    }
    void validate() const;

    bool operator==(const CacheLayout&) const = default;
};

// Bytes a view reads from the cache.
struct LoadStats {
    double code_bytes = 0;           // packed 4-bit codes of the quantized region
    double param_bytes = 0;          // (scale, zero) pairs of the quantized region
    double fp_bytes = 0;             // full-precision region at 4 B/element
    double fp16_reference_bytes = 0; // the quantized region priced at 2 B/element
    std::size_t quantized_elements = 0;
    std::size_t fp_elements = 0;

    LoadStats& operator+=(const LoadStats& o);
};

// A contiguous run of tokens; rows are tokens, columns are kv_dim channels.
struct KVSegment {
    Tensor keys;
    Tensor values;
    bool quantized = false;

    std::size_t tokens() const { return keys.numel() == 0 ? 0 : keys.rows(); }
};

struct CacheView {
    std::vector<KVSegment> segments;
    std::size_t length = 0;
    LoadStats stats;
};

enum class ViewKind { kFull, kDraft, kTarget };

struct MemoryReport {
    std::size_t upper_bytes = 0;
    std::size_t lower_bytes = 0;
    std::size_t param_bytes = 0;
    std::size_t fp_buffer_bytes = 0;  // double-buffer capacity, all layers
    std::size_t fp_archive_bytes = 0; // flushed tokens of unquantized layers

    // Same tokens stored as an INT8 cache plus a separate INT4 draft copy,
    // each with its own params, plus the same FP buffer.
    std::size_t separate_copies_bytes = 0;
    // Every flushed token at 2 B/element.
    std::size_t fp16_reference_bytes = 0;

    std::size_t total() const noexcept {
        return upper_bytes + lower_bytes + param_bytes + fp_buffer_bytes + fp_archive_bytes;
    }
};

struct QuantizedBlock {
    HierarchicalPlanes keys;   // kv_dim rows x G tokens
    HierarchicalPlanes values; // G rows x kv_dim channels

    bool operator==(const QuantizedBlock&) const = default;
};

class HierarchicalKVCache {
public:
    explicit HierarchicalKVCache(CacheLayout layout);

    // Builds a cache from per-layer prompt K/V ([S_P x kv_dim] each). The
    // oldest floor((S_P - G) / G) * G tokens are quantized; the rest stay in
    // the FP buffer with C_F1 full. Prompts shorter than G stay entirely in a
    // partially filled C_F1.
    static HierarchicalKVCache prefill_quantize(CacheLayout layout, std::span<const Tensor> keys,
                                                std::span<const Tensor> values);

    const CacheLayout& layout() const noexcept { return layout_; }

    // Tokens fully appended across every layer.
    std::size_t length() const noexcept;
    std::size_t quantized_token_count() const noexcept { return flushed_; }
    std::size_t fp_count() const noexcept;
    std::size_t f1_count() const noexcept;
    std::size_t f2_count() const noexcept;
    bool f2_full() const noexcept { return fp_count() == layout_.fp_capacity(); }
    // Tokens that can still be appended before a flush is required.
    std::size_t append_capacity() const noexcept { return layout_.fp_capacity() - fp_count(); }
    // Oldest FP position a rollback may reach.
    std::size_t rollback_floor() const noexcept { return floor_; }

    // Appends one token's K/V to C_F2 of one layer. A token is complete once
    // every layer has received it.
    void append_decode_token(std::size_t layer, std::span<const float> k, std::span<const float> v);

    // Drops the newest n tokens from C_F2 in every layer.
    void rollback(std::size_t n_reject);

    // Encodes C_F1 into a block and slides C_F2 down once C_F2 holds G
    // tokens. Returns whether a flush happened.
    bool flush_if_full();

    CacheView view(std::size_t layer, ViewKind kind) const;
    CacheView draft_view(std::size_t layer) const { return view(layer, ViewKind::kDraft); }
    CacheView target_view(std::size_t layer) const { return view(layer, ViewKind::kTarget); }

    // Bytes one view of every layer would load.
    LoadStats load_stats(ViewKind kind) const;

    MemoryReport memory_report() const;

    const std::vector<QuantizedBlock>& blocks(std::size_t layer) const { return layers_.at(layer).blocks; }

    std::vector<std::uint8_t> serialize() const;
    static HierarchicalKVCache deserialize(std::span<const std::uint8_t> bytes);
    void dump(const std::filesystem::path& path) const;
    static HierarchicalKVCache load(const std::filesystem::path& path);

    bool operator==(const HierarchicalKVCache&) const = default;

private:
    struct LayerState {
        std::vector<QuantizedBlock> blocks;
        std::vector<float> archive_k; // flushed tokens of unquantized layers
        std::vector<float> archive_v;
        std::vector<float> fp_k;      // fp_count x kv_dim
        std::vector<float> fp_v;
        std::size_t fp_count = 0;

        bool operator==(const LayerState&) const = default;
    };

    void require_uniform(const char* op) const;
    void flush_layer(std::size_t layer);

    CacheLayout layout_;
    std::vector<LayerState> layers_;
    std::size_t flushed_ = 0;
    std::size_t floor_ = 0;
};

QuantizedBlock encode_block(const Tensor& keys, const Tensor& values, std::size_t group_size);
KVSegment decode_block(const QuantizedBlock& block, ViewKind kind);

} // namespace selfspec
