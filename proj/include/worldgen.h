/* Public C ABI for the world-generation toolkit. Every entry point returns a
 * wg_status; on failure the thread-local message from wg_last_error()
 * describes what went wrong. Handles are opaque and single-owner. */
#ifndef WORLDGEN_H
#define WORLDGEN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum wg_status {
    WG_OK = 0,
    WG_ERR_SHAPE = 1,      /* tensor/sequence shape contract violated */
    WG_ERR_CONFIG = 2,     /* invalid or inconsistent configuration */
    WG_ERR_VOCABULARY = 3, /* unknown token/category */
    WG_ERR_CACHE = 4,      /* KV-cache bookkeeping violation */
    WG_ERR_STATE = 5,      /* operation illegal in the current state */
    WG_ERR_REQUEST = 6,    /* malformed streaming request */
    WG_ERR_INVARIANT = 7,  /* internal invariant or metric gate failed */
    WG_ERR_DIVERGENCE = 8, /* training diverged (non-finite loss) */
    WG_ERR_IO = 9,         /* file not found / unreadable / unwritable */
    WG_ERR_INTERNAL = 10   /* unexpected failure */
} wg_status;

/* Message for the most recent failure on this thread; never NULL. */
const char* wg_last_error(void);

const char* wg_version(void);

/* Strings returned through char** are heap-allocated; release them here. */
void wg_string_free(char* s);

/* ---- experiment configuration ------------------------------------------ */

typedef struct wg_config wg_config;

wg_status wg_config_default(wg_config** out);
wg_status wg_config_load(const char* path, wg_config** out);
wg_status wg_config_save(const wg_config* cfg, const char* path);
/* Hex identity of the resolved config. */
wg_status wg_config_hash(const wg_config* cfg, char** out);
void wg_config_free(wg_config* cfg);

/* ---- pipeline entry points ---------------------------------------------- */

/* Writes n episodes (seeds seed0..seed0+n-1) plus manifest.json to out_dir.
 * Pass n < 0 / seed0 = UINT64_MAX to use the config's data section. */
wg_status wg_gen_data(const wg_config* cfg, int n, uint64_t seed0, const char* out_dir);

/* Trains the learned codec (config codec section must select it); writes
 * codec_final.xwck and the loss log into out_dir. */
wg_status wg_train_codec(const wg_config* cfg, const char* out_dir);

/* Stage-1 flow-matching pretraining; writes stage1_final.xwck into out_dir.
 * codec_ckpt may be NULL (baseline codec or fresh learned codec). */
wg_status wg_train_stage1(const wg_config* cfg, const char* codec_ckpt, const char* out_dir);

/* Stage-2 few-step distillation from a stage-1 teacher checkpoint; writes
 * stage2_final.xwck into out_dir. */
wg_status wg_distill_stage2(const wg_config* cfg, const char* teacher_ckpt,
                            const char* out_dir);

/* Trains the action-measurement probe on ground truth and writes its JSON
 * parameters (gate statistics included) to out_path. Fails if the accuracy
 * gate does not pass. */
wg_status wg_train_probe(const wg_config* cfg, const char* out_path);

/* Runs the full metric suite for a checkpoint. mode is "stage1" or "stage2";
 * probe_path may be NULL (the probe is then trained in-process). Writes
 * report.json, metrics.csv, plot series, and the resolved config to out_dir. */
wg_status wg_run_eval(const wg_config* cfg, const char* ckpt, const char* mode,
                      const char* probe_path, const char* out_dir);

/* Renders a human-readable summary of a written report.json. */
wg_status wg_report_summary(const char* report_json_path, char** out);

/* ---- streaming rollout service ------------------------------------------ */

/* Newline-delimited JSON session protocol (open/step/fork/close). Generated
 * frames are written as episode files under out_dir and referenced by
 * "frames_ref" in responses. */
typedef struct wg_service wg_service;

wg_status wg_service_open(const wg_config* cfg, const char* ckpt, const char* out_dir,
                          wg_service** out);
/* Handles one request line; *response is always set on WG_OK (it may carry a
 * protocol-level {"error": ...} object for malformed requests). */
wg_status wg_service_handle(wg_service* svc, const char* request_line, char** response);
void wg_service_free(wg_service* svc);

#ifdef __cplusplus
}
#endif

#endif /* WORLDGEN_H */
