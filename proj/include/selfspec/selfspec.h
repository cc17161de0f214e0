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

#ifndef SELFSPEC_SELFSPEC_H_
#define SELFSPEC_SELFSPEC_H_

/* C interface to the selfspec engine.
 *
 * Every call returns an ss_status. On failure the message is available from
 * ss_last_error() on the same thread until the next failing call. Strings
 * returned through char** are heap-allocated and must be released with
 * ss_string_free(). Configuration is passed as JSON text. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define SS_API __attribute__((visibility("default")))
#else
#define SS_API
#endif

typedef enum ss_status {
  SS_OK = 0,
  SS_ERR_DIMENSION = 1,
  SS_ERR_DATA = 2,
  SS_ERR_CONFIG = 3,
  SS_ERR_FORMAT = 4,
  SS_ERR_CACHE_INTEGRITY = 5,
  SS_ERR_BUFFER_OVERFLOW = 6,
  SS_ERR_EMPTY_PROMPT = 7,
  SS_ERR_CONTRACT = 8,
  SS_ERR_IO = 9,
  SS_ERR_INVALID_ARGUMENT = 10, /* null handle or pointer */
  SS_ERR_INTERNAL = 11,
} ss_status;

typedef struct ss_model ss_model;
typedef struct ss_engine ss_engine;

SS_API const char* ss_version(void);
SS_API const char* ss_status_name(ss_status status);
SS_API const char* ss_last_error(void);
SS_API void ss_string_free(char* s);

/* "error", "info" or "debug". */
SS_API ss_status ss_set_log_level(const char* level);

/* Model config JSON: {"num_layers", "num_heads", "head_dim", "mlp_hidden",
 * "vocab", "max_positions"}; missing keys take the toy defaults. */
SS_API ss_status ss_model_create_random(const char* config_json, uint64_t seed, size_t int4_group_size,
                                        ss_model** out);
SS_API ss_status ss_model_load(const char* path, size_t int4_group_size, ss_model** out);
SS_API ss_status ss_model_save(const ss_model* model, const char* path);
SS_API ss_status ss_model_info_json(const ss_model* model, char** out_json);
SS_API void ss_model_free(ss_model* model);

/* Decoding config JSON: {"gamma", "decode_length", "sampling": "greedy" |
 * "stochastic", "temperature", "seed", "kv_quant", "weight_quant",
 * "group_size", "sensitive_layers"}. The engine keeps a pointer to the model,
 * which must outlive it. */
SS_API ss_status ss_engine_create(const ss_model* model, const char* spec_json, ss_engine** out);
/* Runs speculative decoding on a prompt. Writes up to `capacity` generated ids
 * to out_tokens and the full count to *out_len. */
SS_API ss_status ss_engine_run(ss_engine* engine, const int32_t* prompt, size_t prompt_len, int32_t* out_tokens,
                               size_t capacity, size_t* out_len);
/* Metrics of the last run. */
SS_API ss_status ss_engine_metrics_json(const ss_engine* engine, char** out_json);
/* Newline-delimited step trace of the last run. */
SS_API ss_status ss_engine_write_trace(const ss_engine* engine, const char* path);
SS_API void ss_engine_free(ss_engine* engine);

/* Experiment commands. `config_json` is a full experiment config; a JSON
 * summary is returned through out_summary (may be NULL). */
SS_API ss_status ss_cmd_run(const char* config_json, char** out_summary);
SS_API ss_status ss_cmd_gamma_sweep(const char* config_json, char** out_summary);
SS_API ss_status ss_cmd_ablate(const char* config_json, char** out_summary);
SS_API ss_status ss_cmd_roofline(const char* config_json, char** out_summary);
SS_API ss_status ss_cmd_gen_model(const char* config_json, const char* out_path, char** out_summary);

#ifdef __cplusplus
}
#endif

#endif /* SELFSPEC_SELFSPEC_H_ */
