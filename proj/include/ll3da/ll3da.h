/* C API for the ll3da shared library. All functions return a status code;
 * 0 is success and nonzero values match the CLI exit codes. String outputs
 * are heap-allocated and released with ll3da_string_free(). */
#ifndef LL3DA_H
#define LL3DA_H

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ll3da_status {
    LL3DA_OK = 0,
    LL3DA_ERR_USAGE = 1,
    LL3DA_ERR_DATA = 2,
    LL3DA_ERR_NUMERIC = 3
} ll3da_status;

/* Opaque handle holding the run configuration, the last error message and
 * a cached model for repeated evaluate/generate calls. */
typedef struct ll3da_session ll3da_session;

const char* ll3da_version(void);

/* config_json_path may be NULL or empty; defaults apply then. */
ll3da_status ll3da_session_open(const char* config_json_path, ll3da_session** out);
void ll3da_session_close(ll3da_session* s);

/* Message for the most recent failing call on this session. */
const char* ll3da_last_error(const ll3da_session* s);

void ll3da_string_free(char* s);

/* Writes scenes/, corpus.txt, vocab.txt and manifest.json under out_dir. */
ll3da_status ll3da_generate_dataset(ll3da_session* s, const char* out_dir);

/* Next-token pre-training of the language model on the dataset corpus;
 * the resulting checkpoint carries the frozen LM plus fresh adapters. */
ll3da_status ll3da_pretrain(ll3da_session* s, const char* data_dir, const char* out_checkpoint);

/* Instruction tuning starting from init_checkpoint (a pretrain output or a
 * previous run for fine-tuning). Writes checkpoints and loss_log.csv. */
ll3da_status ll3da_train(ll3da_session* s, const char* data_dir, const char* init_checkpoint,
                         const char* out_dir);

/* opts_json keys: task (densecap|qa|scene_description|dialogue|planning|detect),
 * split (train|val|all), localize, click_related, proposals, strategy, seed,
 * beam_size, max_new_tokens, report_json, report_csv. The metric report is
 * returned as JSON in *report_out when non-NULL. */
ll3da_status ll3da_evaluate(ll3da_session* s, const char* checkpoint, const char* data_dir,
                            const char* opts_json, char** report_out);

/* opts_json keys: clicks ([[x,y,z],...]), boxes ([[cx,cy,cz,w,h,l],...]),
 * strategy, seed, beam_size, top_k, top_p, max_new_tokens. */
ll3da_status ll3da_generate(ll3da_session* s, const char* checkpoint, const char* scene_path,
                            const char* instruction, const char* opts_json, char** response_out);

ll3da_status ll3da_checkpoint_inspect(const char* path, char** json_out);

#ifdef __cplusplus
}
#endif

#endif /* LL3DA_H */
