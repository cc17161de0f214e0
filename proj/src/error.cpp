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

#include "selfspec/error.hpp"

namespace selfspec {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kData: return "data";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kCacheIntegrity: return "cache_integrity";
    case ErrorCode::kBufferOverflow: return "buffer_overflow";
    case ErrorCode::kEmptyPrompt: return "empty_prompt";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kIo: return "io";
    }
    return "unknown";
}

} // namespace selfspec
