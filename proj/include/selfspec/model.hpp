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

// Llama-style decoder (RMSNorm, rotary positions, MHA, SiLU-gated MLP) that
// runs against a HierarchicalKVCache.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "selfspec/hkv_cache.hpp"
#include "selfspec/tensor.hpp"

namespace selfspec {

using TokenId = std::int32_t;

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t mlp_hidden = 128;
    std::size_t vocab = 64;
    std::size_t max_positions = 4096;

    std::size_t hidden() const noexcept { return num_heads * head_dim; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor attn_norm; // [d]
    Tensor wq, wk, wv, wo; // [d x d]
    Tensor mlp_norm;  // [d]
    Tensor w_gate, w_up; // [d x mlp]
    Tensor w_down;    // [mlp x d]

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Tensor embedding; // [V x d]
    std::vector<LayerWeights> layers;
    Tensor final_norm; // [d]
    Tensor lm_head;    // [d x V]

    // Seeded Gaussian init; linear weights have variance 1/d_in, norm gains are 1.
    static ModelWeights random(const ModelConfig& config, std::uint64_t seed);

    // Every tensor with its serialized name, in file order.
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
    std::vector<std::pair<std::string, Tensor*>> named_tensors();

    // Elements of the seven projection / MLP matrices plus the classifier.
    std::size_t linear_elements() const;

    bool operator==(const ModelWeights&) const = default;
};

std::vector<std::uint8_t> serialize_weights(const ModelWeights& weights);
ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes);
void save_weights(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_weights(const std::filesystem::path& path);

// Copy of the weights with every linear matrix replaced by its INT4
// (asymmetric, grouped along the input dimension) reconstruction.
ModelWeights int4_weights(const ModelWeights& weights, std::size_t group_size);

enum class WeightMode { kFp, kInt4 };
enum class CacheMode { kFp, kHierarchical };

// One attention chunk: `tokens` rows of width `stride`, head columns begin
// at `offset`.
struct KVChunk {
    std::span<const float> keys;
    std::span<const float> values;
    std::size_t tokens = 0;
    std::size_t stride = 0;
    std::size_t offset = 0;

    static KVChunk whole(const Tensor& keys, const Tensor& values);
};

// Softmax attention of one query head over a partition of the KV sequence.
// Each chunk is reduced to (max, denominator, weighted numerator) and the
// partials are merged with a running rescale, so the result does not depend
// on where the sequence is cut.
std::vector<float> chunked_attention(std::span<const float> q, std::span<const KVChunk> chunks, float scale);

struct StepStats {
    double linear_flops = 0;
    double attention_flops = 0;
    double weight_bytes = 0;
    LoadStats kv;

    double flops() const noexcept { return linear_flops + attention_flops; }
    StepStats& operator+=(const StepStats& o);
};

struct CacheOptions {
    CacheMode mode = CacheMode::kHierarchical;
    std::size_t group_size = 128;
    std::set<std::size_t> sensitive_layers;
};

class Model {
public:
    // int4_group_size sets the grouping of the INT4 draft weights.
    explicit Model(ModelWeights weights, std::size_t int4_group_size = 128);

    const ModelConfig& config() const noexcept { return fp_.config; }
    const ModelWeights& weights(WeightMode mode = WeightMode::kFp) const noexcept {
        return mode == WeightMode::kFp ? fp_ : int4_;
    }
    std::size_t int4_group_size() const noexcept { return int4_group_size_; }

    CacheLayout cache_layout(const CacheOptions& options) const;

    struct PrefillResult {
        std::vector<float> logits; // next-token logits after the last prompt token
        HierarchicalKVCache cache;
    };

    // Causal full-precision attention over the whole prompt with FP weights,
    // then the cache is built (and quantized in hierarchical mode).
    PrefillResult prefill(std::span<const TokenId> tokens, const CacheOptions& options) const;

    // Runs one token: its K/V is appended to C_F2 of every layer, attention
    // reads the selected view. Returns next-token logits.
    std::vector<float> decode_step(TokenId token, HierarchicalKVCache& cache, ViewKind view, WeightMode weight_mode,
                                   StepStats* stats = nullptr) const;

    // Bytes of linear weights loaded once per forward pass.
    double weight_bytes(WeightMode mode) const noexcept;

private:
    void check_token(TokenId token) const;

    ModelWeights fp_;
    ModelWeights int4_;
    std::size_t int4_group_size_;
    double int4_weight_bytes_ = 0;
};

} // namespace selfspec
