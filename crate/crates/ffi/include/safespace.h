/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SAFESPACE_H
#define SAFESPACE_H

#include <stddef.h>

// Result of every call.
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  // A required pointer argument was null.
  SS_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  SS_STATUS_INVALID_UTF8 = 2,
  // The input was rejected: empty or oversized text, incomplete or
  // mismatched responses.
  SS_STATUS_INVALID_INPUT = 3,
  // A lexicon, questionnaire or responses document did not parse.
  SS_STATUS_PARSE_ERROR = 4,
  // A file could not be read.
  SS_STATUS_IO_ERROR = 5,
  // The library hit an internal bug. The handle is still safe to free.
  SS_STATUS_INTERNAL = 6,
} SsStatus;

typedef enum SsVerdict {
  SS_VERDICT_CLEAN = 0,
  SS_VERDICT_CAUTION = 1,
  SS_VERDICT_ABUSIVE = 2,
} SsVerdict;

// Phrase lexicon plus the thresholds used to classify its scores.
typedef struct SsLexicon SsLexicon;

typedef struct SsQuestionnaire SsQuestionnaire;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a lexicon from `path`, or the bundled lexicon when `path` is null.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be valid for
// writes.
enum SsStatus ss_lexicon_load(const char *path, struct SsLexicon **out);

// # Safety
// `lexicon` must be null or a handle from [`ss_lexicon_load`] that has not
// been freed.
void ss_lexicon_free(struct SsLexicon *lexicon);

// Scores `text` and writes the full report as JSON: scores per category,
// flagged spans with byte offsets, and the verdict.
//
// # Safety
// `lexicon` must be a live handle, `text` a NUL-terminated string, and
// `out_json` valid for writes.
enum SsStatus ss_analyze_text(const struct SsLexicon *lexicon, const char *text, char **out_json);

// Verdict only, without allocating.
//
// # Safety
// As for [`ss_analyze_text`], with `out` valid for writes.
enum SsStatus ss_classify(const struct SsLexicon *lexicon, const char *text, enum SsVerdict *out);

// Loads a questionnaire definition from `path`, or the bundled one when
// `path` is null.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be valid for
// writes.
enum SsStatus ss_questionnaire_load(const char *path, struct SsQuestionnaire **out);

// # Safety
// `questionnaire` must be null or a live handle from
// [`ss_questionnaire_load`].
void ss_questionnaire_free(struct SsQuestionnaire *questionnaire);

// Scores a responses document (`questionnaire_id`, `version`, `answers`)
// and writes the assessment as JSON.
//
// # Safety
// `questionnaire` must be a live handle, `responses_json` a NUL-terminated
// string, and `out_json` valid for writes.
enum SsStatus ss_questionnaire_score(const struct SsQuestionnaire *questionnaire,
                                     const char *responses_json,
                                     char **out_json);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned by this library, freed once.
void ss_string_free(char *s);

// Description of the last failure on the calling thread, or an empty
// string after a success. Valid until the next call on this thread.
const char *ss_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFESPACE_H */
