#ifndef DAPT_H
#define DAPT_H

#include <stddef.h>
#include <stdint.h>

typedef enum {
  DAPT_STATUS_OK = 0,
  DAPT_STATUS_NULL_POINTER = 1,
  DAPT_STATUS_INVALID_ARGUMENT = 2,
  DAPT_STATUS_IO = 3,
  DAPT_STATUS_FORMAT = 4,
  DAPT_STATUS_TOKENIZER_MISMATCH = 5,
  DAPT_STATUS_BUFFER_TOO_SMALL = 6,
  DAPT_STATUS_RUNTIME = 7,
  DAPT_STATUS_PANIC = 8,
} DaptStatus;

/**
 * A model checkpoint together with the tokenizer it was trained with.
 */
typedef struct DaptCheckpoint DaptCheckpoint;

/**
 * A byte-level BPE tokenizer.
 */
typedef struct DaptTokenizer DaptTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message for the last failed call on this thread, or null. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *dapt_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dapt_version(void);

/**
 * Loads a tokenizer directory (`vocab.txt` and `merges.txt`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
DaptStatus dapt_tokenizer_load(const char *dir, DaptTokenizer **out);

/**
 * # Safety
 * `tok` must come from this library and not be used afterwards. Null is ignored.
 */
void dapt_tokenizer_free(DaptTokenizer *tok);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `tok` must be null or a live handle.
 */
size_t dapt_tokenizer_vocab_size(const DaptTokenizer *tok);

/**
 * Encodes UTF-8 text into token ids.
 *
 * # Safety
 * `tok` must be a live handle, `text` NUL-terminated, `out_ids` valid for
 * `capacity` writes and `out_len` writable.
 */
DaptStatus dapt_tokenizer_encode(const DaptTokenizer *tok,
                                 const char *text,
                                 uint32_t *out_ids,
                                 size_t capacity,
                                 size_t *out_len);

/**
 * Decodes ids to UTF-8 (special tokens rejected). On success the buffer
 * holds the bytes plus a terminating NUL; `out_len` counts the NUL.
 *
 * # Safety
 * `tok` must be a live handle, `ids` valid for `n_ids` reads, `out`
 * valid for `capacity` writes and `out_len` writable.
 */
DaptStatus dapt_tokenizer_decode(const DaptTokenizer *tok,
                                 const uint32_t *ids,
                                 size_t n_ids,
                                 char *out,
                                 size_t capacity,
                                 size_t *out_len);

/**
 * Loads a checkpoint file and the tokenizer embedded in it.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
DaptStatus dapt_checkpoint_load(const char *path, DaptCheckpoint **out);

/**
 * # Safety
 * `ckpt` must come from this library and not be used afterwards. Null is ignored.
 */
void dapt_checkpoint_free(DaptCheckpoint *ckpt);

/**
 * Number of classifier outputs, or 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
size_t dapt_checkpoint_num_classes(const DaptCheckpoint *ckpt);

/**
 * Hidden size (length of a document embedding), or 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
size_t dapt_checkpoint_hidden_dim(const DaptCheckpoint *ckpt);

/**
 * A new tokenizer handle copied from the checkpoint.
 *
 * # Safety
 * `ckpt` must be a live handle and `out` a valid pointer.
 */
DaptStatus dapt_checkpoint_tokenizer(const DaptCheckpoint *ckpt, DaptTokenizer **out);

/**
 * Class probabilities for one document (`num_classes` values).
 *
 * # Safety
 * `ckpt` must be a live handle, `text` NUL-terminated, `out_probs` valid
 * for `capacity` writes and `out_len` writable.
 */
DaptStatus dapt_checkpoint_classify(const DaptCheckpoint *ckpt,
                                    const char *text,
                                    double *out_probs,
                                    size_t capacity,
                                    size_t *out_len);

/**
 * The final hidden state at the `<s>` position (`hidden_dim` values).
 *
 * # Safety
 * Same requirements as [`dapt_checkpoint_classify`].
 */
DaptStatus dapt_checkpoint_embed(const DaptCheckpoint *ckpt,
                                 const char *text,
                                 double *out_values,
                                 size_t capacity,
                                 size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAPT_H */
