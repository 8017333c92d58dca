/*
 * gridwatch C API
 *
 * Stable extern-C surface over the analysis engine. All functions return a
 * gw_status; every out-parameter string is heap-allocated by the library and
 * must be released with gw_string_free(). Handles are opaque and freed with
 * their matching *_free function. On any failure gw_last_error() returns a
 * human-readable message for the calling thread.
 *
 * Structured inputs and outputs are JSON documents; rasters and ranked
 * tables are CSV; heatmaps are SVG. Formats are documented in README.md.
 */

#ifndef GRIDWATCH_H
#define GRIDWATCH_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gw_status {
  GW_OK = 0,
  /* Errors */
  GW_ERR_PARSE = 1,         /* malformed input (message has location) */
  GW_ERR_INVALID_ARG = 2,   /* null handle, bad option value */
  GW_ERR_IO = 3,            /* file missing/unwritable/corrupt store */
  GW_ERR_REJECTED = 4,      /* envelope/capsule rejected; message has reason */
  GW_ERR_INTERNAL = 5,
  /* Non-error solve outcomes */
  GW_SOLVE_DIVERGED = 10,
  GW_SOLVE_ISLANDED = 11,
} gw_status;

typedef struct gw_grid gw_grid;
typedef struct gw_server gw_server;

const char* gw_version(void);

/* Thread-local message describing the most recent failure in this thread. */
const char* gw_last_error(void);

void gw_string_free(char* s);

/* ------------------------------------------------------------------ grid */

/* Parses and validates a grid JSON document. lenient != 0 tolerates unknown
 * keys and missing in_service flags. */
gw_status gw_grid_parse(const char* json_text, int lenient, gw_grid** out_grid);
gw_status gw_grid_parse_file(const char* path, int lenient, gw_grid** out_grid);
void gw_grid_free(gw_grid* grid);

/* Counts plus the island partition, as JSON. */
gw_status gw_grid_summary(const gw_grid* grid, char** out_json);

/* ------------------------------------------------------------- power flow */

/* options_json (all optional): {"tol": 1e-8, "max_iter": 20}
 * Returns GW_OK on convergence, GW_SOLVE_DIVERGED / GW_SOLVE_ISLANDED
 * otherwise; out_json always carries the outcome, per-bus solution or
 * islands, per-branch flows, and the convergence trace. */
gw_status gw_powerflow(const gw_grid* grid, const char* options_json, char** out_json);

/* ------------------------------------------------------------ contingency */

/* config_json (all optional):
 *   {"reports": [IncidentReport, ...],   verified reports to weight assets
 *    "floor": 0.001, "threshold": 0.0,
 *    "budget": 0 (0 = unlimited), "max_order": 2,
 *    "raster_res": 32, "jobs": 4}
 * out_json: {"table_csv": "...", "raster_csv": "...", "raster_svg": "...",
 *            "summary": {...}} */
gw_status gw_contingency(const gw_grid* grid, const char* config_json, char** out_json);

/* ---------------------------------------------------------------- reports */

/* Ed25519 keypair for a reporting device:
 * {"device_key_id", "public_key_b64", "secret_key_b64"}.
 * seed: 0 for system randomness, nonzero for a deterministic test key. */
gw_status gw_report_keygen(const char* device_key_id, uint64_t seed, char** out_json);

/* Fills report_id/timestamp/nonce if absent, canonicalizes, signs.
 * key_json is the keygen output. Returns the envelope JSON
 * {payload_b64, signature_b64, device_key_id}. */
gw_status gw_report_sign(const char* report_json, const char* key_json, uint64_t seed,
                         char** out_envelope_json);

/* --------------------------------------------------------------- service */

/* registry_path: JSON array of {device_key_id, public_key_b64, ...}.
 * store_path: newline-delimited accepted-report log (created when absent).
 * geo_json (optional): {"origin_lat", "origin_lon", "meters_per_unit"}. */
gw_status gw_server_create(const gw_grid* grid, const char* registry_path,
                           const char* store_path, const char* geo_json, gw_server** out_server);
/* Blocks until gw_server_stop. GW_ERR_IO when the address cannot be bound. */
gw_status gw_server_listen(gw_server* server, const char* host, int port);
gw_status gw_server_stop(gw_server* server);
void gw_server_free(gw_server* server);

/* ---------------------------------------------------------------- capsule */

/* Owner signing keypair: {"public_key_b64", "secret_key_b64"}. */
gw_status gw_capsule_keygen(uint64_t seed, char** out_json);

/* Creates a keyserver state file ({"server_secret_b64", "keys": []}). */
gw_status gw_keyserver_init(const char* keyserver_path, uint64_t seed);

/* Mints an attestation token for a platform descriptor against the
 * keyserver's secret. */
gw_status gw_attestation_token(const char* keyserver_path, const char* platform,
                               char** out_token_hex);

/* request_json:
 *   {"payload": [{"name": "...", "data_b64": "..."}, ...],
 *    "policy": {"rules": [...]},
 *    "owner_key": {keygen output}}
 * Writes the binary capsule to capsule_path and escrows the key in the
 * keyserver file. out_json reports {capsule_id, key_id}. */
gw_status gw_capsule_package(const char* request_json, const char* keyserver_path,
                             const char* capsule_path, uint64_t seed, char** out_json);

/* Verifies, requests the key (platform+token attestation), decrypts, and
 * installs into the taint state file (created when absent). out_json
 * reports {capsule_id, label, objects}. GW_ERR_REJECTED on BadSignature /
 * KeyDenied / DigestMismatch / NotFound, with the reason in the message. */
gw_status gw_capsule_install(const char* capsule_path, const char* keyserver_path,
                             const char* owner_public_key_b64, const char* platform,
                             const char* token_hex, const char* state_path, char** out_json);

/* Replays {"objects": [...], "events": [...]} against the taint state and
 * returns the verdict transcript (JSON array). The updated state is saved
 * back atomically unless dry_run != 0. */
gw_status gw_capsule_simulate(const char* state_path, const char* script_json, int dry_run,
                              char** out_transcript_json);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* GRIDWATCH_H */
