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

#include <cstddef>
#include <span>
#include <vector>

namespace selfspec {

inline constexpr float kRmsNormEps = 1e-5f;
inline constexpr float kRopeBase = 10000.0f;

// Dense row-major fp32 tensor. Rank-2 tensors are used for everything the
// engine touches; higher ranks are only carried through serialization.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    std::size_t numel() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;

    bool operator==(const Tensor&) const = default;
};

bool all_finite(std::span<const float> values) noexcept;

// a[m x k] * b[k x n]. Each dot product is summed left to right over k.
Tensor matmul(const Tensor& a, const Tensor& b);

// out[n] = x[k] * w[k x n], same summation order as matmul.
void matvec(std::span<const float> x, const Tensor& w, std::span<float> out);

std::vector<float> softmax_row(std::span<const float> v);
Tensor softmax_row(const Tensor& v);

void rmsnorm(std::span<const float> x, std::span<const float> gain, float eps, std::span<float> out);
// Normalizes every row of v (last dimension) and applies gain.
Tensor rmsnorm(const Tensor& v, const Tensor& gain, float eps = kRmsNormEps);

// Rotates consecutive pairs (2i, 2i+1) by position * base^(-2i/dim).
void rope_inplace(std::span<float> head, std::size_t position, float base = kRopeBase);
// Applies rope_inplace to every row of x.
Tensor rope(const Tensor& x, std::size_t position, float base = kRopeBase);

float silu(float x) noexcept;

} // namespace selfspec
