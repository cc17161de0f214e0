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

#include "selfspec/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "selfspec/error.hpp"

namespace selfspec {

namespace {

// std::round rounds half away from zero.
int rtn_clamp(float x, int lo, int hi) {
    const float r = std::round(x);
    if (r <= static_cast<float>(lo)) return lo;
    if (r >= static_cast<float>(hi)) return hi;
    return static_cast<int>(r);
}

void require_finite(std::span<const float> values, const char* what) {
    if (!all_finite(values)) fail(ErrorCode::kData, std::string(what) + ": non-finite input");
}

} // namespace

GroupCodes quantize_group_asym_u4(std::span<const float> values) {
    if (values.empty()) fail(ErrorCode::kData, "quantize_group_asym_u4: empty group");
    require_finite(values, "quantize_group_asym_u4");

    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    GroupCodes out;
    out.params.mode = QuantMode::kAsymmetricU4;
    out.params.zero_point = *mn;
    out.params.scale = std::max((*mx - *mn) / 15.0f, kScaleFloor);
    out.codes.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        out.codes[i] = static_cast<std::int8_t>(rtn_clamp((values[i] - out.params.zero_point) / out.params.scale, 0, 15));
    }
    return out;
}

GroupCodes quantize_group_sym_s4(std::span<const float> errors, float scale) {
    if (!(scale > 0.0f)) fail(ErrorCode::kConfig, "quantize_group_sym_s4: scale must be positive");
    require_finite(errors, "quantize_group_sym_s4");

    GroupCodes out;
    out.params = {scale, 0.0f, QuantMode::kSymmetricS4};
    out.codes.resize(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) {
        out.codes[i] = static_cast<std::int8_t>(rtn_clamp(errors[i] / scale, -8, 7));
    }
    return out;
}

float dequant_code(int code, const GroupQuantParams& params) noexcept {
    return static_cast<float>(static_cast<double>(code) * params.scale + params.zero_point);
}

float dequant_two_plane(int upper_code, int lower_code, const GroupQuantParams& upper) noexcept {
    const double s = upper.scale;
    return static_cast<float>(upper_code * s + lower_code * (s / kLowerPlaneDivisor) + upper.zero_point);
}

HierarchicalGroup hierarchical_encode(std::span<const float> values) {
    HierarchicalGroup g;
    g.upper = quantize_group_asym_u4(values);
    std::vector<float> residual(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        residual[i] = values[i] - dequant_code(g.upper.codes[i], g.upper.params);
    }
    g.lower = quantize_group_sym_s4(residual, g.upper.params.scale / kLowerPlaneDivisor);
    return g;
}

QuantPlane::QuantPlane(std::size_t rows, std::size_t row_len, std::size_t group_size, QuantMode mode, QuantAxis axis)
    : rows_(rows), row_len_(row_len), group_size_(group_size), mode_(mode), axis_(axis) {
    if (group_size == 0) fail(ErrorCode::kConfig, "quant plane group size must be positive");
    groups_per_row_ = (row_len + group_size - 1) / group_size;
    packed_.assign((rows * row_len + 1) / 2, 0);
    params_.assign(rows * groups_per_row_, GroupQuantParams{1.0f, 0.0f, mode});
}

int QuantPlane::code(std::size_t index) const noexcept {
    const std::uint8_t byte = packed_[index / 2];
    const int nibble = (index % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    if (mode_ == QuantMode::kSymmetricS4 && nibble >= 8) return nibble - 16;
    return nibble;
}

void QuantPlane::set_code(std::size_t index, int code) {
    const bool ok = mode_ == QuantMode::kAsymmetricU4 ? (code >= 0 && code <= 15) : (code >= -8 && code <= 7);
    if (!ok) fail(ErrorCode::kData, "code " + std::to_string(code) + " out of range for plane mode");
    const auto nibble = static_cast<std::uint8_t>(code & 0x0F);
    std::uint8_t& byte = packed_[index / 2];
    if (index % 2 == 0) {
        byte = static_cast<std::uint8_t>((byte & 0xF0) | nibble);
    } else {
        byte = static_cast<std::uint8_t>((byte & 0x0F) | (nibble << 4));
    }
}

std::size_t QuantPlane::group_of(std::size_t index) const noexcept {
    const std::size_t r = index / row_len_;
    const std::size_t c = index % row_len_;
    return r * groups_per_row_ + c / group_size_;
}

std::pair<std::size_t, std::size_t> QuantPlane::group_range(std::size_t group) const noexcept {
    const std::size_t r = group / groups_per_row_;
    const std::size_t g = group % groups_per_row_;
    const std::size_t begin = r * row_len_ + g * group_size_;
    const std::size_t end = r * row_len_ + std::min(row_len_, (g + 1) * group_size_);
    return {begin, end};
}

bool QuantPlane::same_structure(const QuantPlane& other) const noexcept {
    return rows_ == other.rows_ && row_len_ == other.row_len_ && group_size_ == other.group_size_;
}

HierarchicalPlanes hierarchical_encode_plane(const Tensor& x, std::size_t group_size, QuantAxis axis) {
    const std::size_t rows = x.rows();
    const std::size_t row_len = x.cols();
    HierarchicalPlanes planes{QuantPlane(rows, row_len, group_size, QuantMode::kAsymmetricU4, axis),
                              QuantPlane(rows, row_len, group_size, QuantMode::kSymmetricS4, axis)};
    for (std::size_t g = 0; g < planes.upper.num_groups(); ++g) {
        const auto [begin, end] = planes.upper.group_range(g);
        const auto enc = hierarchical_encode(std::span<const float>(x.data).subspan(begin, end - begin));
        planes.upper.params(g) = enc.upper.params;
        planes.lower.params(g) = enc.lower.params;
        for (std::size_t i = begin; i < end; ++i) {
            planes.upper.set_code(i, enc.upper.codes[i - begin]);
            planes.lower.set_code(i, enc.lower.codes[i - begin]);
        }
    }
    return planes;
}

Tensor dequant_draft(const QuantPlane& upper) {
    Tensor out({upper.rows(), upper.row_len()});
    for (std::size_t g = 0; g < upper.num_groups(); ++g) {
        const auto [begin, end] = upper.group_range(g);
        const auto& p = upper.params(g);
        for (std::size_t i = begin; i < end; ++i) {
            out.data[i] = dequant_code(upper.code(i), p);
        }
    }
    return out;
}

Tensor dequant_target(const QuantPlane& upper, const QuantPlane& lower) {
    if (!upper.same_structure(lower) || lower.mode() != QuantMode::kSymmetricS4) {
        fail(ErrorCode::kCacheIntegrity, "dequant_target: upper and lower planes do not share group structure");
    }
    Tensor out({upper.rows(), upper.row_len()});
    for (std::size_t g = 0; g < upper.num_groups(); ++g) {
        const auto& p = upper.params(g);
        if (lower.params(g).scale != p.scale / kLowerPlaneDivisor) {
            fail(ErrorCode::kCacheIntegrity, "dequant_target: lower-plane scale is not upper scale / 16 in group " +
                                                 std::to_string(g));
        }
        const auto [begin, end] = upper.group_range(g);
        for (std::size_t i = begin; i < end; ++i) {
            out.data[i] = dequant_two_plane(upper.code(i), lower.code(i), p);
        }
    }
    return out;
}

QuantizedWeights quantize_weights(const Tensor& w, std::size_t group_size) {
    if (w.numel() == 0) fail(ErrorCode::kConfig, "quantize_weights: empty weight");
    if (group_size == 0) fail(ErrorCode::kConfig, "quantize_weights: group size must be positive");
    QuantizedWeights q;
    q.in_dim = w.rows();
    q.out_dim = w.cols();
    q.plane = QuantPlane(q.out_dim, q.in_dim, group_size, QuantMode::kAsymmetricU4, QuantAxis::kChannel);

    std::vector<float> column(q.in_dim);
    for (std::size_t j = 0; j < q.out_dim; ++j) {
        for (std::size_t i = 0; i < q.in_dim; ++i) column[i] = w.at(i, j);
        for (std::size_t gi = 0; gi < q.plane.groups_per_row(); ++gi) {
            const std::size_t g = j * q.plane.groups_per_row() + gi;
            const auto [begin, end] = q.plane.group_range(g);
            const std::size_t off = begin - j * q.in_dim;
            const auto enc = quantize_group_asym_u4(std::span<const float>(column).subspan(off, end - begin));
            q.plane.params(g) = enc.params;
            for (std::size_t i = begin; i < end; ++i) q.plane.set_code(i, enc.codes[i - begin]);
        }
    }
    return q;
}

Tensor QuantizedWeights::dequantize() const {
    const Tensor transposed = dequant_draft(plane);
    Tensor out({in_dim, out_dim});
    for (std::size_t j = 0; j < out_dim; ++j) {
        for (std::size_t i = 0; i < in_dim; ++i) out.at(i, j) = transposed.at(j, i);
    }
    return out;
}

std::size_t QuantizedWeights::param_bytes() const noexcept {
    return plane.num_groups() * 2 * sizeof(float);
}

} // namespace selfspec
