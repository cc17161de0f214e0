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

// 4-bit group quantization.
//
// The hierarchical scheme stores one INT8-grade value as two 4-bit planes
// that share a single (scale, zero) pair per group:
//
//   upper  c_u in [0, 15]   asymmetric RTN of x:          x ~= c_u * S + Z
//   lower  c_l in [-8, 7]   symmetric RTN of x - x_upper: e ~= c_l * S / 16
//
// so that x ~= (16 * c_u + c_l) * (S / 16) + Z. The draft path reads only the
// upper plane; the target path reads both.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "selfspec/tensor.hpp"

namespace selfspec {

inline constexpr float kScaleFloor = 1e-8f;
inline constexpr int kLowerPlaneDivisor = 16;

enum class QuantMode : std::uint8_t { kAsymmetricU4 = 0, kSymmetricS4 = 1 };
enum class QuantAxis : std::uint8_t { kChannel = 0, kToken = 1 };

struct GroupQuantParams {
    float scale = 1.0f;
    float zero_point = 0.0f;
    QuantMode mode = QuantMode::kAsymmetricU4;

    bool operator==(const GroupQuantParams&) const = default;
};

struct GroupCodes {
    std::vector<std::int8_t> codes;
    GroupQuantParams params;
};

struct HierarchicalGroup {
    GroupCodes upper;
    GroupCodes lower;
};

GroupCodes quantize_group_asym_u4(std::span<const float> values);
GroupCodes quantize_group_sym_s4(std::span<const float> errors, float scale);
HierarchicalGroup hierarchical_encode(std::span<const float> values);

// code * S + Z
float dequant_code(int code, const GroupQuantParams& params) noexcept;
// c_u * S + c_l * S / 16 + Z, evaluated exactly in double before rounding to
// float, so it agrees bit for bit with the combined-integer form.
float dequant_two_plane(int upper_code, int lower_code, const GroupQuantParams& upper) noexcept;

// A rows x row_len grid of 4-bit codes, two per byte (low nibble holds the
// even element). Every row is cut into groups of group_size elements; the
// last group of a row may be short. Symmetric codes are stored as
// two's-complement nibbles.
class QuantPlane {
public:
    QuantPlane() = default;
    QuantPlane(std::size_t rows, std::size_t row_len, std::size_t group_size, QuantMode mode, QuantAxis axis);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t row_len() const noexcept { return row_len_; }
    std::size_t group_size() const noexcept { return group_size_; }
    std::size_t groups_per_row() const noexcept { return groups_per_row_; }
    std::size_t num_groups() const noexcept { return params_.size(); }
    std::size_t numel() const noexcept { return rows_ * row_len_; }
    QuantMode mode() const noexcept { return mode_; }
    QuantAxis axis() const noexcept { return axis_; }

    int code(std::size_t index) const noexcept;
    void set_code(std::size_t index, int code);

    std::size_t group_of(std::size_t index) const noexcept;
    // Flat element range [begin, end) covered by group g.
    std::pair<std::size_t, std::size_t> group_range(std::size_t group) const noexcept;

    const GroupQuantParams& params(std::size_t group) const { return params_.at(group); }
    GroupQuantParams& params(std::size_t group) { return params_.at(group); }
    std::span<const GroupQuantParams> all_params() const noexcept { return params_; }

    std::span<const std::uint8_t> packed() const noexcept { return packed_; }
    std::span<std::uint8_t> packed() noexcept { return packed_; }

    // Bytes occupied by the packed codes.
    std::size_t code_bytes() const noexcept { return packed_.size(); }

    bool same_structure(const QuantPlane& other) const noexcept;
    bool operator==(const QuantPlane&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t row_len_ = 0;
    std::size_t group_size_ = 1;
    std::size_t groups_per_row_ = 0;
    QuantMode mode_ = QuantMode::kAsymmetricU4;
    QuantAxis axis_ = QuantAxis::kToken;
    std::vector<std::uint8_t> packed_;
    std::vector<GroupQuantParams> params_;
};

struct HierarchicalPlanes {
    QuantPlane upper;
    QuantPlane lower;

    bool operator==(const HierarchicalPlanes&) const = default;
};

// Encodes every group of a rows x row_len matrix.
HierarchicalPlanes hierarchical_encode_plane(const Tensor& x, std::size_t group_size, QuantAxis axis);

Tensor dequant_draft(const QuantPlane& upper);
Tensor dequant_target(const QuantPlane& upper, const QuantPlane& lower);

// Asymmetric u4 weights grouped along the input dimension. The plane stores
// W transposed: plane row j holds column j of the [in x out] weight.
struct QuantizedWeights {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    QuantPlane plane;

    Tensor dequantize() const;
    std::size_t code_bytes() const noexcept { return plane.code_bytes(); }
    std::size_t param_bytes() const noexcept;
};

QuantizedWeights quantize_weights(const Tensor& w, std::size_t group_size);

} // namespace selfspec
