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

#include "selfspec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "selfspec/error.hpp"

namespace selfspec {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape_in) : shape(std::move(shape_in)) {
    data.assign(shape_numel(shape), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape_in, std::vector<float> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
    if (shape_numel(shape) != data.size()) {
        fail(ErrorCode::kDimension, "tensor shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
    if (shape.size() != 2) fail(ErrorCode::kDimension, "expected rank-2 tensor, got " + shape_str(shape));
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.empty()) fail(ErrorCode::kDimension, "scalar tensor has no columns");
    return shape.back();
}

std::span<float> Tensor::row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<float>(data).subspan(r * c, c);
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const float>(data).subspan(r * c, c);
}

bool all_finite(std::span<const float> values) noexcept {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
        fail(ErrorCode::kDimension, "matmul shape mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));
    }
    const std::size_t m = a.shape[0], n = b.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        matvec(a.row(i), b, out.row(i));
    }
    return out;
}

void matvec(std::span<const float> x, const Tensor& w, std::span<float> out) {
    if (w.rank() != 2 || x.size() != w.shape[0] || out.size() != w.shape[1]) {
        fail(ErrorCode::kDimension, "matvec shape mismatch: [" + std::to_string(x.size()) + "] x " +
                                        shape_str(w.shape));
    }
    const std::size_t n = w.shape[1];
    std::fill(out.begin(), out.end(), 0.0f);
    // i-k-j order: every out[j] still accumulates over k in ascending order.
    for (std::size_t kk = 0; kk < x.size(); ++kk) {
        const float xv = x[kk];
        const float* wrow = w.data.data() + kk * n;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += xv * wrow[j];
        }
    }
}

std::vector<float> softmax_row(std::span<const float> v) {
    if (v.empty()) fail(ErrorCode::kDimension, "softmax of empty row");
    const float mx = *std::max_element(v.begin(), v.end());
    std::vector<float> out(v.size());
    float sum = 0.0f;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    const float inv = 1.0f / sum;
    for (float& o : out) o *= inv;
    return out;
}

Tensor softmax_row(const Tensor& v) {
    Tensor out = v;
    const std::size_t r = v.numel() / v.cols();
    for (std::size_t i = 0; i < r; ++i) {
        auto probs = softmax_row(v.row(i));
        std::copy(probs.begin(), probs.end(), out.row(i).begin());
    }
    return out;
}

void rmsnorm(std::span<const float> x, std::span<const float> gain, float eps, std::span<float> out) {
    if (x.size() != gain.size() || out.size() != x.size()) {
        fail(ErrorCode::kDimension, "rmsnorm gain length " + std::to_string(gain.size()) +
                                        " does not match input length " + std::to_string(x.size()));
    }
    float ss = 0.0f;
    for (float v : x) ss += v * v;
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
}

Tensor rmsnorm(const Tensor& v, const Tensor& gain, float eps) {
    Tensor out = v;
    const std::size_t r = v.numel() / v.cols();
    for (std::size_t i = 0; i < r; ++i) {
        rmsnorm(v.row(i), gain.data, eps, out.row(i));
    }
    return out;
}

void rope_inplace(std::span<float> head, std::size_t position, float base) {
    const std::size_t dim = head.size();
    if (dim % 2 != 0) fail(ErrorCode::kConfig, "rope needs an even head dimension, got " + std::to_string(dim));
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        const double theta = static_cast<double>(position) * freq;
        const float c = static_cast<float>(std::cos(theta));
        const float s = static_cast<float>(std::sin(theta));
        const float x0 = head[2 * i];
        const float x1 = head[2 * i + 1];
        head[2 * i] = x0 * c - x1 * s;
        head[2 * i + 1] = x0 * s + x1 * c;
    }
}

Tensor rope(const Tensor& x, std::size_t position, float base) {
    Tensor out = x;
    const std::size_t r = x.numel() / x.cols();
    for (std::size_t i = 0; i < r; ++i) {
        rope_inplace(out.row(i), position, base);
    }
    return out;
}

float silu(float x) noexcept {
    return x / (1.0f + std::exp(-x));
}

} // namespace selfspec
