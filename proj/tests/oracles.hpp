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

// Straight-line reference implementations used only by the tests. They share
// no code with the library and work in double precision.

#include <cstdint>
#include <span>
#include <vector>

#include "selfspec/model.hpp"
#include "selfspec/tensor.hpp"

namespace oracle {

std::vector<double> matmul(const selfspec::Tensor& a, const selfspec::Tensor& b);

// softmax(q K^T * scale) V over rows of width `stride`, head columns at `offset`.
std::vector<double> attention(std::span<const float> q, std::span<const float> keys, std::span<const float> values,
                              std::size_t tokens, std::size_t stride, std::size_t offset, double scale);

struct Rtn {
    std::vector<int> codes;
    double scale;
    double zero;
};
// min/max asymmetric 4-bit round-to-nearest, scale floored at 1e-8.
Rtn rtn_u4(std::span<const float> x);

// Logits after every prefix of `tokens`, recomputed from scratch per prefix.
std::vector<std::vector<double>> forward_all(const selfspec::ModelWeights& w, std::span<const selfspec::TokenId> tokens);
std::vector<double> forward_last(const selfspec::ModelWeights& w, std::span<const selfspec::TokenId> tokens);

// Greedy continuation by full recompute.
std::vector<selfspec::TokenId> greedy(const selfspec::ModelWeights& w, std::vector<selfspec::TokenId> prompt,
                                      std::size_t length);

// Small deterministic generator for property tests.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : s_(seed * 0x9E3779B97F4A7C15ull + 1) {}
    std::uint64_t next() {
        s_ ^= s_ << 13;
        s_ ^= s_ >> 7;
        s_ ^= s_ << 17;
        return s_;
    }
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double range(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }
    float normal() {
        // Irwin-Hall approximation is plenty for test data.
        double s = 0;
        for (int i = 0; i < 12; ++i) s += uniform();
        return static_cast<float>(s - 6.0);
    }
    std::vector<float> vec(std::size_t n, double lo, double hi) {
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(range(lo, hi));
        return v;
    }
    selfspec::Tensor matrix(std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
        return selfspec::Tensor::matrix(r, c, vec(r * c, lo, hi));
    }

private:
    std::uint64_t s_;
};

} // namespace oracle
