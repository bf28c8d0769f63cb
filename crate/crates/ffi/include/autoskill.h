#ifndef AUTOSKILL_H
#define AUTOSKILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum AsStatus {
  AS_STATUS_OK = 0,
  AS_STATUS_NULL_ARGUMENT = 1,
  AS_STATUS_INVALID_UTF8 = 2,
  AS_STATUS_INVALID_INPUT = 3,
  AS_STATUS_IO = 4,
  AS_STATUS_COMPRESSION = 5,
  AS_STATUS_PANIC = 6,
} AsStatus;

// Opaque handle to an open skill bank.
typedef struct AsBank AsBank;

// Opaque handle to a conversation context.
typedef struct AsContext AsContext;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call on the same thread.
const char *as_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void as_string_free(char *s);

// Validates the package directory `dir`; writes the report as JSON.
// A package with findings still returns `Ok`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out_json` a writable pointer.
enum AsStatus as_skill_validate(const char *dir, char **out_json);

// Parses `SKILL.md` text for directory `dir_name` and re-renders it.
// The rendering is byte-identical to the input for any accepted file.
//
// # Safety
// `text` and `dir_name` must be NUL-terminated; `out_rendered` writable.
enum AsStatus as_skill_md_render(const char *text, const char *dir_name, char **out_rendered);

// Opens (creating if needed) the skill bank at `dir`.
//
// # Safety
// `dir` must be NUL-terminated; `out` writable.
enum AsStatus as_bank_open(const char *dir, struct AsBank **out);

// Writes the catalog of registered skills in its YAML form.
//
// # Safety
// `bank` must come from [`as_bank_open`]; `out_yaml` writable.
enum AsStatus as_bank_catalog_yaml(struct AsBank *bank, char **out_yaml);

// # Safety
// `bank` must come from [`as_bank_open`] and not be used afterwards.
void as_bank_free(struct AsBank *bank);

// Creates an empty context with the given compression budget.
//
// # Safety
// `out` must be writable.
enum AsStatus as_context_new(size_t compress_token_threshold,
                             size_t node_compress_token_threshold,
                             size_t keep_first_turns,
                             size_t keep_last_turns,
                             struct AsContext **out);

// Appends a plain-text turn.
//
// # Safety
// `ctx` must come from [`as_context_new`]; `text` NUL-terminated.
enum AsStatus as_context_append_text(struct AsContext *ctx, const char *text);

// Token estimate of the active chain.
//
// # Safety
// `ctx` must come from [`as_context_new`]; `out` writable.
enum AsStatus as_context_active_tokens(struct AsContext *ctx, size_t *out);

// Compresses the history if it is over budget, summarizing by keeping the
// first `summary_bytes` bytes. Writes the compression report as JSON.
//
// # Safety
// `ctx` must come from [`as_context_new`]; `out_json` writable.
enum AsStatus as_context_compress(struct AsContext *ctx, size_t summary_bytes, char **out_json);

// Writes every original turn, oldest first, as a JSON array.
//
// # Safety
// `ctx` must come from [`as_context_new`]; `out_json` writable.
enum AsStatus as_context_replay_json(struct AsContext *ctx, char **out_json);

// # Safety
// `ctx` must come from [`as_context_new`] and not be used afterwards.
void as_context_free(struct AsContext *ctx);

// Appends a timestamped block to the memory file at `path`; writes the
// block's header line.
//
// # Safety
// `path` and `content` must be NUL-terminated; `out_header` writable.
enum AsStatus as_memory_append(const char *path, const char *content, char **out_header);

// Cuts `text` to at most `limit` characters, marking what was omitted.
//
// # Safety
// `text` must be NUL-terminated; `out` writable.
enum AsStatus as_truncate_tool_output(const char *text, size_t limit, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOSKILL_H */
