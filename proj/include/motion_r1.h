/* C interface to the motion_r1 pipeline. All functions are synchronous and
 * single-threaded; the last error message is stored per process. */
#ifndef MOTION_R1_H
#define MOTION_R1_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mr1_status {
  MR1_OK = 0,
  MR1_ERR_INVALID_ARG = 1,
  MR1_ERR_IO = 2,
  MR1_ERR_RUNTIME = 3
} mr1_status;

/* Opaque pipeline handle holding a parsed run configuration. */
typedef struct mr1_pipeline mr1_pipeline;

/* Parses the config file and returns a handle in *out. */
mr1_status mr1_pipeline_open(const char* config_path, mr1_pipeline** out);

/* Overrides after open. Keys: "seed" (u64), "out_dir" (path),
 * "no_cot" / "deterministic" / "resume" ("true"|"false"). */
mr1_status mr1_pipeline_set_option(mr1_pipeline* p, const char* key,
                                   const char* value);

/* Stage names: datagen, tokenizer-train, encoders-train, cot-build, sft,
 * grpo, eval. skipped_out (optional) is set to 1 when resume logic skipped
 * the stage. */
mr1_status mr1_pipeline_run_stage(mr1_pipeline* p, const char* stage,
                                  int* skipped_out);
mr1_status mr1_pipeline_run_all(mr1_pipeline* p);

void mr1_pipeline_close(mr1_pipeline* p);

/* Generates for one description from checkpoints in out_dir and returns a
 * JSON object {parse_ok, think, motion_tokens, raw, frames} in *json_out;
 * free it with mr1_string_free. greedy != 0 selects greedy decoding. */
mr1_status mr1_generate(const char* out_dir, const char* text, int greedy,
                        uint64_t seed, int no_cot, char** json_out);

/* Message from the most recent failing call on this thread of execution;
 * empty string when no error has occurred. */
const char* mr1_last_error(void);

const char* mr1_version(void);

void mr1_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* MOTION_R1_H */
