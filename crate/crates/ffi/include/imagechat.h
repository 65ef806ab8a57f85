#ifndef IMAGECHAT_H
#define IMAGECHAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum IcStatus {
  IC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IC_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  IC_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument was well-formed but rejected, e.g. malformed JSON.
   */
  IC_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Loading a file or model failed.
   */
  IC_STATUS_LOAD_FAILED = 4,
  /**
   * The engine answered with a structured error; the out JSON holds
   * `{code, message}`.
   */
  IC_STATUS_API_ERROR = 5,
  /**
   * A panic was caught at the boundary.
   */
  IC_STATUS_INTERNAL = 6,
} IcStatus;

/**
 * Opaque chat engine.
 */
typedef struct IcEngine IcEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread; do not free.
 */
const char *ic_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *ic_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or was returned by this library and not yet freed.
 */
void ic_string_free(char *s);

/**
 * ROUGE-L F-measure between a hypothesis and a reference, both tokenized
 * the same way as the evaluation pipeline.
 *
 * # Safety
 * String arguments are nul-terminated; `out` is writable.
 */
enum IcStatus ic_rouge_l(const char *hyp, const char *reference, double *out);

/**
 * Unigram F1 over token multisets.
 *
 * # Safety
 * String arguments are nul-terminated; `out` is writable.
 */
enum IcStatus ic_token_f1(const char *hyp, const char *reference, double *out);

/**
 * Corpus BLEU-4 in [0, 1] over `n` aligned hypothesis and reference
 * strings. `smoothed` selects add-one smoothing on the 2- to 4-gram
 * precisions.
 *
 * # Safety
 * `hyps` and `refs` each point to `n` nul-terminated strings; `out` is
 * writable.
 */
enum IcStatus ic_bleu4(const char *const *hyps,
                       const char *const *refs,
                       size_t n,
                       bool smoothed,
                       double *out);

/**
 * Exact two-tailed binomial p-value of `wins_a` against `wins_b` under
 * p = 1/2.
 *
 * # Safety
 * `out` is writable.
 */
enum IcStatus ic_binomial_two_tailed(uint64_t wins_a, uint64_t wins_b, double *out);

/**
 * Whether an utterance counts as a question.
 *
 * # Safety
 * `s` is nul-terminated; `out` is writable.
 */
enum IcStatus ic_is_question(const char *s, bool *out);

/**
 * Builds an engine from a JSON run config with the same keys as the
 * command-line config file, e.g.
 * `{"features": "f.imf", "checkpoint": "r.ckpt", "data": "d.jsonl"}`.
 *
 * # Safety
 * `config_json` is nul-terminated; `out` is writable.
 */
enum IcStatus ic_engine_open(const char *config_json, struct IcEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` is null or was returned by [`ic_engine_open`] and not yet freed.
 */
void ic_engine_free(struct IcEngine *engine);

/**
 * The chat endpoint: a session operation (a body with `op`) or a one-shot
 * reply request. Writes the JSON answer to `out_json`; on an engine error
 * the status is `IC_STATUS_API_ERROR` and `out_json` holds `{code, message}`.
 *
 * # Safety
 * `engine` is valid; `request_json` is nul-terminated; `out_json` is writable.
 */
enum IcStatus ic_engine_chat(const struct IcEngine *engine,
                             const char *request_json,
                             char **out_json);

/**
 * Scores caller-supplied candidates for a context, best first.
 *
 * # Safety
 * As for [`ic_engine_chat`].
 */
enum IcStatus ic_engine_rank(const struct IcEngine *engine,
                             const char *request_json,
                             char **out_json);

/**
 * Style traits with their classes and the known image ids.
 *
 * # Safety
 * `engine` is valid; `out_json` is writable.
 */
enum IcStatus ic_engine_catalog(const struct IcEngine *engine, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMAGECHAT_H */
