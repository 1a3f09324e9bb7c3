#ifndef TRELM_H
#define TRELM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum TrelmStatus {
  TRELM_STATUS_OK = 0,
  TRELM_STATUS_NULL_ARGUMENT = 1,
  TRELM_STATUS_INVALID_UTF8 = 2,
  TRELM_STATUS_IO = 3,
  TRELM_STATUS_PARSE = 4,
  TRELM_STATUS_CONFIG = 5,
  TRELM_STATUS_CHECKPOINT = 6,
  TRELM_STATUS_INVALID_ARGUMENT = 7,
  TRELM_STATUS_BUFFER_TOO_SMALL = 8,
  TRELM_STATUS_INTERNAL = 9,
  TRELM_STATUS_PANIC = 10,
} TrelmStatus;

/**
 * Run configuration holding every key at its default.
 */
typedef struct TrelmConfig TrelmConfig;

/**
 * A transformer checkpoint.
 */
typedef struct TrelmModel TrelmModel;

/**
 * A joint subword vocabulary.
 */
typedef struct TrelmVocab TrelmVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *trelm_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next trelm call on the same thread.
 */
const char *trelm_last_error_message(void);

/**
 * Byte length of the last error message, 0 if there is none.
 */
size_t trelm_last_error_length(void);

/**
 * Static name of a status code.
 */
const char *trelm_status_name(enum TrelmStatus status);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` is NULL or came from this library and has not been freed.
 */
void trelm_string_free(char *s);

struct TrelmConfig *trelm_config_new(void);

/**
 * # Safety
 * `cfg` is NULL or a live handle from [`trelm_config_new`].
 */
void trelm_config_free(struct TrelmConfig *cfg);

/**
 * Sets one `key` to `value`. Unknown keys are rejected.
 *
 * # Safety
 * `cfg` is a live config handle; `key` and `value` are NUL-terminated.
 */
enum TrelmStatus trelm_config_set(struct TrelmConfig *cfg, const char *key, const char *value);

/**
 * Merges a file of `key=value` lines.
 *
 * # Safety
 * `cfg` is a live config handle; `path` is NUL-terminated.
 */
enum TrelmStatus trelm_config_load(struct TrelmConfig *cfg, const char *path);

/**
 * Current value of `key` as a new string; free it with [`trelm_string_free`].
 *
 * # Safety
 * `cfg` is a live config handle, `key` is NUL-terminated and `out` is writable.
 */
enum TrelmStatus trelm_config_get(const struct TrelmConfig *cfg, const char *key, char **out);

/**
 * # Safety
 * `path` is NUL-terminated and `out` is writable. On success `*out` owns a
 * handle released with [`trelm_vocab_free`].
 */
enum TrelmStatus trelm_vocab_load(const char *path, struct TrelmVocab **out);

/**
 * # Safety
 * `v` is NULL or a live vocabulary handle.
 */
void trelm_vocab_free(struct TrelmVocab *v);

/**
 * Number of tokens, 0 for a NULL handle.
 *
 * # Safety
 * `v` is NULL or a live vocabulary handle.
 */
size_t trelm_vocab_size(const struct TrelmVocab *v);

/**
 * Encodes `text` into `ids`. `*len` receives the id count; when it exceeds
 * `cap` nothing is written and the call returns `TRELM_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `v` is a live handle, `text` is NUL-terminated, `ids` points to `cap`
 * writable elements (or is NULL when `cap` is 0) and `len` is writable.
 */
enum TrelmStatus trelm_vocab_encode(const struct TrelmVocab *v,
                                    const char *text,
                                    uint32_t *ids,
                                    size_t cap,
                                    size_t *len);

/**
 * Decodes `len` ids, dropping special tokens, into a new string.
 *
 * # Safety
 * `v` is a live handle, `ids` points to `len` readable elements and `out` is writable.
 */
enum TrelmStatus trelm_vocab_decode(const struct TrelmVocab *v,
                                    const uint32_t *ids,
                                    size_t len,
                                    char **out);

/**
 * # Safety
 * `path` is NUL-terminated and `out` is writable. On success `*out` owns a
 * handle released with [`trelm_model_free`].
 */
enum TrelmStatus trelm_model_load(const char *path, struct TrelmModel **out);

/**
 * # Safety
 * `m` is NULL or a live model handle.
 */
void trelm_model_free(struct TrelmModel *m);

/**
 * Bits per word of masked tokens over the non-empty lines of `text`, under
 * the evaluation mask drawn from `mask_seed`. `lang` is 0 for source, 1 for target.
 *
 * # Safety
 * Handles are live, `text` is NUL-terminated and `bpw` is writable.
 */
enum TrelmStatus trelm_model_bpw(const struct TrelmModel *m,
                                 const struct TrelmVocab *v,
                                 const char *text,
                                 uint32_t lang,
                                 uint64_t mask_seed,
                                 double *bpw);

/**
 * Translates one source sentence with the CdLM decoder into a new string.
 *
 * # Safety
 * Handles are live, `source` is NUL-terminated and `out` is writable.
 */
enum TrelmStatus trelm_generate(const struct TrelmModel *m,
                                const struct TrelmVocab *v,
                                const char *source,
                                char **out);

/**
 * Corpus BLEU-1..`max_n` of newline-separated hypotheses against references,
 * as percentages written to `scores[0..max_n]`. `unit` is 0 for words, 1 for characters.
 *
 * # Safety
 * Strings are NUL-terminated and `scores` points to `max_n` writable doubles.
 */
enum TrelmStatus trelm_bleu(const char *hyp,
                            const char *refs,
                            uint32_t unit,
                            size_t max_n,
                            double *scores);

/**
 * Runs every pipeline stage into `out_dir`, reusing cached stages.
 *
 * # Safety
 * `cfg` is a live config handle and `out_dir` is NUL-terminated.
 */
enum TrelmStatus trelm_run_pipeline(const struct TrelmConfig *cfg,
                                    uint64_t seed,
                                    const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRELM_H */
