#ifndef INTERLOCUTOR_H
#define INTERLOCUTOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IlcStatus {
  ILC_STATUS_OK = 0,
  ILC_STATUS_NULL_ARGUMENT = 1,
  ILC_STATUS_INVALID_UTF8 = 2,
  ILC_STATUS_PARSE_ERROR = 3,
  ILC_STATUS_VALIDATION_ERROR = 4,
  ILC_STATUS_INVALID_INPUT = 5,
  ILC_STATUS_UNKNOWN_LANGUAGE = 6,
  ILC_STATUS_SESSION_NOT_ACTIVE = 7,
  ILC_STATUS_BUSY = 8,
  ILC_STATUS_INTERNAL = 9,
} IlcStatus;

// An engine plus its model gateway.
typedef struct IlcEngine IlcEngine;

// A parsed flow definition.
typedef struct IlcFlow IlcFlow;

// One participant session bound to an engine and a flow.
typedef struct IlcSession IlcSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or null. Valid until the next call.
const char *ilc_last_error(void);

// # Safety
// `s` must come from this library and not have been freed.
void ilc_string_free(char *s);

// Parses a flow document. Validation findings do not fail parsing; see [`ilc_flow_validate`].
//
// # Safety
// `json` must be a NUL-terminated string; `out_flow` must be writable.
enum IlcStatus ilc_flow_parse(const char *json, struct IlcFlow **out_flow);

// Writes the findings as a JSON array; returns `ValidationError` when there are any.
//
// # Safety
// `flow` must be a live handle; `out_findings` must be writable.
enum IlcStatus ilc_flow_validate(const struct IlcFlow *flow, char **out_findings);

// # Safety
// `flow` must be null or a handle from [`ilc_flow_parse`] not yet freed.
void ilc_flow_free(struct IlcFlow *flow);

// Creates an engine with a local rule-based backend registered as `rules`.
//
// # Safety
// `out_engine` must be writable.
enum IlcStatus ilc_engine_new(struct IlcEngine **out_engine);

// Registers a scripted backend answering from a fixture JSON array.
//
// # Safety
// `engine` must be a live handle; `id` and `fixture_json` NUL-terminated strings.
enum IlcStatus ilc_engine_add_scripted(const struct IlcEngine *engine,
                                       const char *id,
                                       bool local,
                                       const char *fixture_json);

// # Safety
// `engine` must be null or a handle from [`ilc_engine_new`] not yet freed.
void ilc_engine_free(struct IlcEngine *engine);

// Starts a session and writes the first agent message as JSON.
//
// # Safety
// `engine` and `flow` must be live handles; `language` may be null for the flow default.
enum IlcStatus ilc_session_start(const struct IlcEngine *engine,
                                 const struct IlcFlow *flow,
                                 const char *language,
                                 struct IlcSession **out_session,
                                 char **out_message);

// Rebuilds a session from JSON produced by [`ilc_session_state`].
//
// # Safety
// `engine` and `flow` must be live handles; `state_json` a NUL-terminated string.
enum IlcStatus ilc_session_restore(const struct IlcEngine *engine,
                                   const struct IlcFlow *flow,
                                   const char *state_json,
                                   struct IlcSession **out_session);

// Sends typed text and writes the agent's reply as JSON.
//
// # Safety
// `session` must be a live handle; `text` a NUL-terminated string.
enum IlcStatus ilc_session_send_text(const struct IlcSession *session,
                                     const char *message,
                                     char **out_message);

// Presses an option button (including `continue` and `add`) and writes the reply as JSON.
//
// # Safety
// `session` must be a live handle; `option_id` a NUL-terminated string.
enum IlcStatus ilc_session_choose(const struct IlcSession *session,
                                  const char *option_id,
                                  char **out_message);

// Whether the session still accepts input. False for a null handle.
//
// # Safety
// `session` must be null or a live handle.
bool ilc_session_is_active(const struct IlcSession *session);

// Serializes the full session state for later [`ilc_session_restore`].
//
// # Safety
// `session` must be a live handle; `out_json` must be writable.
enum IlcStatus ilc_session_state(const struct IlcSession *session, char **out_json);

// Writes the participant-visible transcript as `AGENT:`/`PARTICIPANT:` lines.
//
// # Safety
// `session` must be a live handle; `out_text` must be writable.
enum IlcStatus ilc_session_transcript(const struct IlcSession *session, char **out_text);

// Writes the session's token ledger as JSON.
//
// # Safety
// `session` must be a live handle; `out_json` must be writable.
enum IlcStatus ilc_session_tokens(const struct IlcSession *session, char **out_json);

// # Safety
// `session` must be null or a handle from this library not yet freed.
void ilc_session_free(struct IlcSession *session);

// Replays a scripted session end to end and writes its transcript.
//
// # Safety
// `flow_json` and `script_json` must be NUL-terminated strings; `out_text` writable.
enum IlcStatus ilc_replay(const char *flow_json,
                          const char *script_json,
                          uint64_t seed,
                          char **out_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERLOCUTOR_H */
